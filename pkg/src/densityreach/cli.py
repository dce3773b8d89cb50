"""Command-line interface.

Every run writes into one output directory with fixed file names. Logs go to
stderr; nothing is written to stdout except ``--help``.

Exit codes: 0 success, 1 usage or configuration error, 2 search exhausted or
verdict fail.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import conditions as C
from . import dynamics as D
from .poly import from_json, to_string
from .problem import BUILTIN, ProblemError, load_problem, save_problem
from .sdp import SolverOptions, export_sdpa, parse_sdpa
from . import sos

logger = logging.getLogger("densityreach")

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    subcommand: str
    problem: str | None = None
    condition: str | None = None
    lam: str | None = None
    deg_rho: tuple[int, int] | None = None
    deg_mult: int | None = None
    search: bool = True
    tol_feas: float = 1e-8
    tol_gap: float = 1e-8
    max_iters: int = 200
    samples: int = 1000
    seed: int = 0
    tmax: float = 100.0
    dt: float = 0.01
    res: int | None = None
    jobs: int = 1
    out: str = "densityreach-out"
    certificate: str | None = None
    x0: list[float] | None = None
    extra: dict = field(default_factory=dict)

    def solver_options(self) -> SolverOptions:
        return SolverOptions(tol_feas=self.tol_feas, tol_gap=self.tol_gap, max_iters=self.max_iters)

    def sim_options(self) -> D.SimOptions:
        return D.SimOptions(dt=self.dt, t_max=self.tmax)


def _deg_range(text: str) -> tuple[int, int]:
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
        else:
            lo = hi = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected INT or INT..INT, got {text!r}")
    if lo < 1 or hi < lo:
        raise argparse.ArgumentTypeError(f"bad degree range {text!r}")
    return lo, hi


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="densityreach", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    def common(sp, problem_required=True):
        sp.add_argument("--problem", required=problem_required,
                        help="problem JSON file or built-in name (" + ", ".join(BUILTIN) + ")")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="densityreach-out", help="output directory")

    def solving(sp, with_condition=True):
        if with_condition:
            sp.add_argument("--condition", choices=[c.value for c in C.Condition], required=True)
        sp.add_argument("--lambda", dest="lam", help="FLOAT or @poly.json")
        sp.add_argument("--deg-rho", type=_deg_range, default=None, help="INT or INT..INT")
        sp.add_argument("--deg-mult", type=int, default=None)
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--search", dest="search", action="store_true", default=True)
        g.add_argument("--no-search", dest="search", action="store_false")
        sp.add_argument("--tol-feas", type=float, default=1e-8)
        sp.add_argument("--tol-gap", type=float, default=1e-8)
        sp.add_argument("--max-iters", type=int, default=200)
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--res", type=int, default=None, help="check grid resolution per axis")

    def sim(sp):
        sp.add_argument("--samples", type=int, default=1000)
        sp.add_argument("--tmax", type=float, default=100.0)
        sp.add_argument("--dt", type=float, default=0.01)

    sp = sub.add_parser("verify", help="search for a certificate and check it")
    common(sp)
    solving(sp)

    sp = sub.add_parser("synthesize", help="synthesize a controller and validate the closed loop")
    common(sp)
    solving(sp, with_condition=False)
    sim(sp)

    sp = sub.add_parser("simulate", help="Monte Carlo reach-avoid validation or one trajectory")
    common(sp)
    sim(sp)
    sp.add_argument("--certificate", help="synthesis certificate providing the controller")
    sp.add_argument("--x0", type=_floats, help="single initial state, comma separated")

    sp = sub.add_parser("check", help="independently check a certificate")
    common(sp)
    sp.add_argument("--certificate", required=True)
    sp.add_argument("--res", type=int, default=200)

    sp = sub.add_parser("levelset", help="zero level set of a certificate's density")
    common(sp, problem_required=False)
    sp.add_argument("--certificate", required=True)
    sp.add_argument("--res", type=int, default=400)

    sp = sub.add_parser("export-sdpa", help="write the SDP of one condition in SDPA format")
    common(sp)
    sp.add_argument("--condition", choices=[c.value for c in C.Condition], required=True)
    sp.add_argument("--lambda", dest="lam")
    sp.add_argument("--deg-rho", type=_deg_range, required=True)
    sp.add_argument("--deg-mult", type=int, default=None)
    return p


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    keys = RunConfig.__dataclass_fields__
    cfg = RunConfig(**{k: v for k, v in vars(ns).items() if k in keys and v is not None})
    if cfg.out:
        cfg.out = str(Path(cfg.out).resolve())
    for attr in ("certificate",):
        val = getattr(cfg, attr)
        if val:
            setattr(cfg, attr, str(Path(val).resolve()))
    if cfg.problem and cfg.problem not in BUILTIN:
        cfg.problem = str(Path(cfg.problem).resolve())
    if cfg.subcommand == "synthesize":
        cfg.condition = C.Condition.SYNTHESIS.value
    if cfg.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    if cfg.samples < 1:
        raise UsageError("--samples must be at least 1")
    return cfg


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load_problem(ref: str, seed: int = 0):
    if ref in BUILTIN:
        return BUILTIN[ref](), []
    spec, warnings = load_problem(ref, seed=seed)
    for w in warnings:
        logger.warning("%s", w)
    return spec, warnings


def _kind(cfg: RunConfig, n: int) -> C.ConditionKind:
    lam = None
    if cfg.lam is not None:
        if cfg.lam.startswith("@"):
            obj = json.loads(Path(cfg.lam[1:]).read_text())
            lam = from_json(obj)
        else:
            try:
                lam = float(cfg.lam)
            except ValueError:
                raise UsageError(f"--lambda expects FLOAT or @poly.json, got {cfg.lam!r}")
    tag = C.Condition(cfg.condition)
    if lam is not None and not tag.uses_lambda:
        raise UsageError(f"condition {tag.value} takes no lambda")
    return C.ConditionKind.make(tag, lam, n)


def _candidates(cfg: RunConfig) -> list[tuple[int, int]]:
    lo, hi = cfg.deg_rho or (6, 12)
    if not cfg.search:
        ds = cfg.deg_mult if cfg.deg_mult is not None else 2 * ((lo + 1) // 2)
        return [(lo, ds)]
    if cfg.deg_mult is not None:
        return [(dr, cfg.deg_mult) for dr in range(lo, hi + 1)]
    return C.default_candidates(range(lo, hi + 1))


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, cfg: RunConfig, started: float, status: str, files: list[str]):
    manifest = {
        "config": asdict(cfg),
        "versions": {"densityreach": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "seeds": {"seed": cfg.seed},
        "status": status,
        "files": sorted(files),
        "wall_time_s": round(time.perf_counter() - started, 3),
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    D.write_json(out / "manifest.json", manifest)


def _cert_summary(cert: C.Certificate, report: D.CheckReport | None) -> list[str]:
    names = None if cert.num_vars != 2 else ["x", "y"]
    lines = [f"condition      {cert.kind.tag.value}",
             f"lambda         {'-' if cert.kind.lam is None else to_string(cert.kind.lam, names)}",
             f"degrees        d_rho={cert.d_rho} d_s={cert.d_s}",
             f"solver         {cert.solver.get('status')} ({cert.solver.get('message', '')})",
             f"classification {cert.classification} (sampled evidence)"]
    for k, v in sorted(cert.evidence.items()):
        lines.append(f"  {k}: {v}")
    if report is not None:
        lines.append(f"check          {report.verdict}")
        for c in report.constraints:
            lines.append(f"  {c.name:<9s} residual {c.residual:.2e}  min eig {c.min_eig:.2e}  "
                         f"margin {c.margin:.2e} on {c.samples} {c.domain} points")
        for msg in report.failures():
            lines.append(f"  FAIL {msg}")
    for k in sorted(cert.polys):
        lines.append(f"{k} = {to_string(cert.polys[k], names)}")
    return lines


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _solve(cfg: RunConfig, problem, out: Path):
    kind = _kind(cfg, problem.n)
    cands = _candidates(cfg)
    res = cfg.res or 200
    logger.info("%s on %s: %d candidate degree pair(s)", kind.tag.value, problem.name, len(cands))
    try:
        result = C.degree_search(problem, kind, cands, cfg.solver_options(), jobs=cfg.jobs,
                                 check_resolution=res)
    except C.SearchExhausted as exc:
        table = [a.row() for a in exc.attempts]
        (out / "summary.txt").write_text("search exhausted\n" + "\n".join(table) + "\n")
        for row in table:
            logger.error("%s", row)
        return None, exc.attempts
    return result, result.attempts


def cmd_verify(cfg: RunConfig) -> int:
    started = time.perf_counter()
    problem, _ = _load_problem(cfg.problem, cfg.seed)
    kind = _kind(cfg, problem.n)
    if kind.tag is C.Condition.SYNTHESIS and problem.control is None:
        raise UsageError("synthesis requires a problem with a control structure")
    out = _out_dir(cfg)
    save_problem(problem, out / "problem.json")
    result, attempts = _solve(cfg, problem, out)
    if result is None:
        _write_manifest(out, cfg, started, "search exhausted", ["summary.txt", "problem.json"])
        return EXIT_FAIL
    cert, report = result.certificate, result.check
    cert.save(out / "certificate.json")
    D.write_json(out / "check.json", report.to_json())
    lines = _cert_summary(cert, report) + ["", "attempts:"] + [a.row() for a in attempts]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    _write_manifest(out, cfg, started, "certified",
                    ["certificate.json", "check.json", "summary.txt", "problem.json"])
    logger.info("certificate at d_rho=%d d_s=%d, classified %s", cert.d_rho, cert.d_s,
                cert.classification)
    return EXIT_OK


def cmd_synthesize(cfg: RunConfig) -> int:
    started = time.perf_counter()
    problem, _ = _load_problem(cfg.problem, cfg.seed)
    if problem.control is None:
        raise UsageError("synthesis requires a problem with a control structure")
    out = _out_dir(cfg)
    save_problem(problem, out / "problem.json")
    result, attempts = _solve(cfg, problem, out)
    if result is None:
        _write_manifest(out, cfg, started, "search exhausted", ["summary.txt", "problem.json"])
        return EXIT_FAIL
    cert, report = result.certificate, result.check
    ctrl = C.recover_controller(cert, box=problem.box)
    validation = D.validate_reach_avoid(problem, ctrl, cfg.samples, cfg.seed, cfg.sim_options())
    cert.save(out / "certificate.json")
    D.write_json(out / "check.json", report.to_json())
    D.write_json(out / "validation.json", validation.to_json())
    lines = _cert_summary(cert, report)
    lines += ["", f"closed loop    reach fraction {validation.reach_fraction:.4f} over "
              f"{validation.samples} samples (left safe {validation.left_safe}, "
              f"of which controller-domain exits {validation.domain_faults}; "
              f"timed out {validation.timed_out})", f"  {validation.note}"]
    lines += ["", "attempts:"] + [a.row() for a in attempts]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    _write_manifest(out, cfg, started, "certified",
                    ["certificate.json", "check.json", "validation.json", "summary.txt",
                     "problem.json"])
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    started = time.perf_counter()
    problem, _ = _load_problem(cfg.problem, cfg.seed)
    ctrl = None
    if cfg.certificate:
        ctrl = C.recover_controller(C.Certificate.load(cfg.certificate), box=problem.box)
    out = _out_dir(cfg)
    if cfg.x0 is not None:
        if len(cfg.x0) != problem.n:
            raise UsageError(f"--x0 needs {problem.n} values")
        res = D.simulate(problem, cfg.x0, ctrl, cfg.sim_options())
        D.write_trajectory_csv(out / "trajectory.csv", res)
        summary = (f"outcome {res.outcome} at t={res.t_event:.9f}"
                   + (f" flags {','.join(res.flags)}" if res.flags else ""))
        (out / "summary.txt").write_text(summary + "\n")
        files = ["trajectory.csv", "summary.txt"]
    else:
        rep = D.validate_reach_avoid(problem, ctrl, cfg.samples, cfg.seed, cfg.sim_options())
        D.write_json(out / "validation.json", rep.to_json())
        summary = (f"reach fraction {rep.reach_fraction:.4f} over {rep.samples} samples: "
                   f"reached {rep.reached}, left safe {rep.left_safe}, timed out {rep.timed_out}\n"
                   f"{rep.note}\n")
        (out / "summary.txt").write_text(summary)
        files = ["validation.json", "summary.txt"]
    _write_manifest(out, cfg, started, "done", files)
    return EXIT_OK


def cmd_check(cfg: RunConfig) -> int:
    started = time.perf_counter()
    problem, _ = _load_problem(cfg.problem, cfg.seed)
    cert = C.Certificate.load(cfg.certificate)
    out = _out_dir(cfg)
    report = D.check_certificate(problem, cert, cfg.res or 200)
    D.write_json(out / "check.json", report.to_json())
    (out / "summary.txt").write_text("\n".join(_cert_summary(cert, report)) + "\n")
    _write_manifest(out, cfg, started, report.verdict, ["check.json", "summary.txt"])
    return EXIT_OK if report.passed else EXIT_FAIL


def _levelset_box(cfg: RunConfig, cert: C.Certificate):
    if cfg.problem:
        return _load_problem(cfg.problem, cfg.seed)[0].box
    sibling = Path(cfg.certificate).with_name("problem.json")
    if sibling.exists():
        return load_problem(sibling, validate=False)[0].box
    if cert.problem_name in BUILTIN:
        return BUILTIN[cert.problem_name]().box
    raise UsageError("no bounding box: pass --problem")


def cmd_levelset(cfg: RunConfig) -> int:
    started = time.perf_counter()
    cert = C.Certificate.load(cfg.certificate)
    if cert.num_vars != 2:
        raise UsageError("level sets are only extracted in two dimensions")
    box = _levelset_box(cfg, cert)
    out = _out_dir(cfg)
    name = next(k for k in ("rho", "rho1", "v") if k in cert.polys)
    curves = D.level_set_2d(cert.polys[name], box, cfg.res or 400)
    D.write_levelset_csv(out / "levelset.csv", curves)
    closed = sum(D.is_closed(c) for c in curves)
    (out / "summary.txt").write_text(f"{name} = 0: {len(curves)} curve(s), {closed} closed\n")
    _write_manifest(out, cfg, started, "done", ["levelset.csv", "summary.txt"])
    return EXIT_OK


def cmd_export_sdpa(cfg: RunConfig) -> int:
    started = time.perf_counter()
    problem, _ = _load_problem(cfg.problem, cfg.seed)
    kind = _kind(cfg, problem.n)
    d_rho = cfg.deg_rho[0]
    d_s = cfg.deg_mult if cfg.deg_mult is not None else 2 * ((d_rho + 1) // 2)
    enc = C.encode(problem, kind, d_rho, d_s)
    low = sos.lower_to_sdp(enc.program)
    out = _out_dir(cfg)
    path = out / f"{problem.name}_{kind.tag.value}_{d_rho}_{d_s}.dat-s"
    export_sdpa(low.sdp, path)
    parse_sdpa(path)   # round-trip sanity
    (out / "summary.txt").write_text(f"{path.name}: m={low.sdp.m} blocks="
                                     f"{[b.size for b in low.sdp.blocks]} free={low.sdp.n_free}\n")
    _write_manifest(out, cfg, started, "done", [path.name, "summary.txt"])
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "synthesize": cmd_synthesize, "simulate": cmd_simulate,
            "check": cmd_check, "levelset": cmd_levelset, "export-sdpa": cmd_export_sdpa}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if ns.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    logging.getLogger("densityreach.sdp").setLevel(logging.INFO)
    try:
        cfg = config_from_args(ns)
        return COMMANDS[cfg.subcommand](cfg)
    except (UsageError, ProblemError, C.ConditionError, FileNotFoundError,
            json.JSONDecodeError, KeyError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
