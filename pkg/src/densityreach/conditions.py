"""Density-function reach-avoid conditions, their SOS encodings and the degree search.

Six condition kinds are supported. For each, :func:`encode` builds a
:class:`~densityreach.sos.SosProgram` whose constraints are, with
``X = {h < 0}``, ``X0 = {l < 0}``, ``Xr = {g <= 0}`` and margin ``eps0``:

``weak-exp``     div(rho f) - lam rho + s0 h - s1 g,  rho - eps0 + s2 l,  -rho + p h
``weak-asym``    div(rho1 f) - lam rho1 + s0 h - s1 g,  div(rho2 f) - rho1 + s2 h - s3 g,
                 rho1 - eps0 + s4 l,  -rho1 + p h
``prajna``       div(rho f) - eps0 + s0 h - s1 g,  rho - eps0 + s2 l,  -rho + p h
``strong-asym``  grad v . f + s0 h - s1 g,  grad w . f - v + s2 h - s3 g,
                 v - eps0 + s4 l,  -v + p h
``strong-exp``   grad v . f - lam v + s0 h - s1 g,  v - eps0 + s2 l,  -v + p h
``synthesis``    div(rho f + G psi) - lam rho + s0 h - s1 g,  rho - eps0 + s2 l,  -rho + p h

every one of them required to be a sum of squares.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import sos
from .poly import Polynomial, PolyVector, divergence, from_json, to_json
from .problem import ProblemSpec, sample_box, sample_zero_set
from .sdp import FEASIBLE, SdpError, SolverOptions, solve

logger = logging.getLogger(__name__)

EPS0 = 1e-6
RHO_FLOOR = 1e-6
CLASSIFY_MARGIN = 1e-6

WEAK = "weak"
STRONG = "strong"
UNCLASSIFIED = "unclassified"


class Condition(str, Enum):
    WEAK_EXP = "weak-exp"
    WEAK_ASYM = "weak-asym"
    PRAJNA = "prajna"
    STRONG_EXP = "strong-exp"
    STRONG_ASYM = "strong-asym"
    SYNTHESIS = "synthesis"

    @property
    def uses_lambda(self) -> bool:
        return self in (Condition.WEAK_EXP, Condition.WEAK_ASYM, Condition.STRONG_EXP,
                        Condition.SYNTHESIS)

    @property
    def decision_names(self) -> tuple[str, ...]:
        return {
            Condition.WEAK_EXP: ("rho",),
            Condition.WEAK_ASYM: ("rho1", "rho2"),
            Condition.PRAJNA: ("rho",),
            Condition.STRONG_EXP: ("v",),
            Condition.STRONG_ASYM: ("v", "w"),
            Condition.SYNTHESIS: ("rho",),
        }[self]

    @property
    def num_multipliers(self) -> int:
        return 5 if self in (Condition.WEAK_ASYM, Condition.STRONG_ASYM) else 3


DEFAULT_LAMBDA = {Condition.WEAK_EXP: 0.001, Condition.STRONG_EXP: 0.001,
                  Condition.WEAK_ASYM: 0.0, Condition.SYNTHESIS: 0.001}


class ConditionError(ValueError):
    pass


@dataclass(frozen=True)
class ConditionKind:
    """A condition tag together with its ``lambda`` (``None`` when unused)."""

    tag: Condition
    lam: Polynomial | None = None

    @classmethod
    def make(cls, tag, lam=None, num_vars: int | None = None) -> "ConditionKind":
        tag = Condition(tag)
        if not tag.uses_lambda:
            return cls(tag, None)
        if lam is None:
            lam = DEFAULT_LAMBDA[tag]
        if not isinstance(lam, Polynomial):
            if num_vars is None:
                raise ConditionError("num_vars is required for a constant lambda")
            lam = Polynomial.constant(num_vars, float(lam))
        kind = cls(tag, lam)
        kind.validate(lam.num_vars)
        return kind

    def validate(self, n: int) -> None:
        if not self.tag.uses_lambda:
            return
        if self.lam is None:
            raise ConditionError(f"{self.tag.value} needs lambda")
        if self.lam.num_vars != n:
            raise ConditionError("lambda has the wrong number of variables")
        if self.lam.degree() > 4:
            raise ConditionError("lambda must have degree at most 4")
        if self.tag is Condition.STRONG_EXP:
            c = self.lam.constant_value()
            if c is None or c <= 0:
                raise ConditionError("strong-exp requires lambda to be a positive constant")

    @property
    def lam_constant(self) -> float | None:
        return None if self.lam is None else self.lam.constant_value()


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

@dataclass
class Encoding:
    kind: ConditionKind
    d_rho: int
    d_s: int
    eps0: float
    program: sos.SosProgram
    constraint_names: tuple[str, ...]


def _multiplier_ids(kind: Condition) -> list[str]:
    return [f"s{j}" for j in range(kind.num_multipliers)]


def encode(problem: ProblemSpec, kind: ConditionKind, d_rho: int, d_s: int,
           eps0: float = EPS0, slack_degrees: dict[str, int] | None = None) -> Encoding:
    """SOS program for ``kind`` on ``problem`` at degrees ``(d_rho, d_s)``."""
    tag = kind.tag
    if d_rho < 1 or d_s < 0:
        raise ConditionError("degrees must be positive")
    if d_s % 2:
        raise ConditionError("multiplier degree d_s must be even")
    if tag is Condition.SYNTHESIS and problem.control is None:
        raise ConditionError("synthesis requires a problem with a control structure")
    kind.validate(problem.n)
    slack_degrees = slack_degrees or {}

    n = problem.n
    f, h, l, g = problem.f, problem.h, problem.l, problem.g_target
    prog = sos.SosProgram(n)
    dec = {name: prog.declare_free(name, d_rho) for name in tag.decision_names}
    psi = []
    if tag is Condition.SYNTHESIS:
        psi = [prog.declare_free(f"psi{i + 1}", d_rho) for i in range(problem.control.m)]
    p = prog.declare_free("p", d_s)
    s = [prog.declare_sos(sid, d_s).expr() for sid in _multiplier_ids(tag)]
    E = {k: v.expr() for k, v in dec.items()}
    lam = kind.lam

    def add(expr, name):
        prog.add_sos_constraint(expr, name, slack_degrees.get(name))

    if tag in (Condition.WEAK_EXP, Condition.PRAJNA, Condition.SYNTHESIS):
        rho = E["rho"]
        flow = sos.density_divergence(rho, f)
        if tag is Condition.SYNTHESIS:
            for j, pj in enumerate(psi):
                flow = flow + sos.density_divergence(pj, problem.control.column(j))
        flow = flow - eps0 if tag is Condition.PRAJNA else flow - rho.mul_poly(lam)
        add(flow + s[0].mul_poly(h) - s[1].mul_poly(g), "flow")
        add(rho - eps0 + s[2].mul_poly(l), "init")
        add(-rho + p.expr().mul_poly(h), "boundary")
        names = ("flow", "init", "boundary")
    elif tag is Condition.WEAK_ASYM:
        r1, r2 = E["rho1"], E["rho2"]
        add(sos.density_divergence(r1, f) - r1.mul_poly(lam) + s[0].mul_poly(h) - s[1].mul_poly(g),
            "flow")
        add(sos.density_divergence(r2, f) - r1 + s[2].mul_poly(h) - s[3].mul_poly(g), "flow2")
        add(r1 - eps0 + s[4].mul_poly(l), "init")
        add(-r1 + p.expr().mul_poly(h), "boundary")
        names = ("flow", "flow2", "init", "boundary")
    elif tag is Condition.STRONG_ASYM:
        v, w = E["v"], E["w"]
        add(sos.lie_derivative(v, f) + s[0].mul_poly(h) - s[1].mul_poly(g), "flow")
        add(sos.lie_derivative(w, f) - v + s[2].mul_poly(h) - s[3].mul_poly(g), "flow2")
        add(v - eps0 + s[4].mul_poly(l), "init")
        add(-v + p.expr().mul_poly(h), "boundary")
        names = ("flow", "flow2", "init", "boundary")
    else:  # strong-exp
        v = E["v"]
        add(sos.lie_derivative(v, f) - v.mul_poly(lam) + s[0].mul_poly(h) - s[1].mul_poly(g),
            "flow")
        add(v - eps0 + s[2].mul_poly(l), "init")
        add(-v + p.expr().mul_poly(h), "boundary")
        names = ("flow", "init", "boundary")
    return Encoding(kind, d_rho, d_s, eps0, prog, names)


# ---------------------------------------------------------------------------
# certificates
# ---------------------------------------------------------------------------

@dataclass
class Certificate:
    """A solved condition instance.

    ``polys`` holds the decision polynomials and the free multiplier ``p``;
    ``grams`` maps every SOS object (multipliers ``s_j`` and the constraint
    slacks, keyed by constraint name) to ``(basis, Q)``.
    """

    kind: ConditionKind
    d_rho: int
    d_s: int
    eps0: float
    polys: dict[str, Polynomial]
    grams: dict[str, tuple[tuple, np.ndarray]]
    constraint_names: tuple[str, ...]
    solver: dict = field(default_factory=dict)
    problem_name: str = ""
    classification: str = UNCLASSIFIED
    evidence: dict = field(default_factory=dict)

    def multiplier(self, sid: str) -> Polynomial:
        basis, Q = self.grams[sid]
        return Polynomial.from_gram(basis, Q)

    @property
    def num_vars(self) -> int:
        return next(iter(self.polys.values())).num_vars

    @property
    def psi(self) -> PolyVector | None:
        names = sorted((k for k in self.polys if k.startswith("psi")), key=lambda s: int(s[3:]))
        return PolyVector([self.polys[k] for k in names]) if names else None

    def to_json(self) -> dict:
        return {
            "kind": self.kind.tag.value,
            "lambda": None if self.kind.lam is None else to_json(self.kind.lam),
            "degrees": {"d_rho": self.d_rho, "d_s": self.d_s},
            "eps0": self.eps0,
            "problem": self.problem_name,
            "constraints": list(self.constraint_names),
            "polynomials": {k: to_json(v) for k, v in self.polys.items()},
            "grams": {k: {"basis": [list(m) for m in b],
                          "lower": [Q[i, :i + 1].tolist() for i in range(len(Q))]}
                      for k, (b, Q) in self.grams.items()},
            "solver": self.solver,
            "classification": {"label": self.classification, "evidence": self.evidence},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Certificate":
        tag = Condition(obj["kind"])
        lam = None if obj.get("lambda") is None else from_json(obj["lambda"])
        grams = {}
        for k, d in obj["grams"].items():
            basis = tuple(tuple(m) for m in d["basis"])
            Q = np.zeros((len(basis), len(basis)))
            for i, row in enumerate(d["lower"]):
                Q[i, :i + 1] = row
                Q[:i + 1, i] = row
            grams[k] = (basis, Q)
        cls_info = obj.get("classification") or {}
        return cls(ConditionKind(tag, lam), int(obj["degrees"]["d_rho"]),
                   int(obj["degrees"]["d_s"]), float(obj.get("eps0", EPS0)),
                   {k: from_json(v) for k, v in obj["polynomials"].items()}, grams,
                   tuple(obj["constraints"]), obj.get("solver", {}), obj.get("problem", ""),
                   cls_info.get("label", UNCLASSIFIED), cls_info.get("evidence", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "Certificate":
        return cls.from_json(json.loads(Path(path).read_text()))


def certificate_from_solution(enc: Encoding, low: sos.Lowering, sol, problem_name="") -> Certificate:
    out = low.extract(sol)
    polys = {k: v for k, v in out["polys"].items() if not k.startswith("s")}
    grams = {k: (tuple(b), Q) for k, (b, Q) in out["grams"].items()}
    metrics = sol.metrics()
    return Certificate(enc.kind, enc.d_rho, enc.d_s, enc.eps0, polys, grams,
                       enc.constraint_names, metrics, problem_name)


def solve_condition(problem: ProblemSpec, kind: ConditionKind, d_rho: int, d_s: int,
                    opts: SolverOptions | None = None, eps0: float = EPS0):
    """Encode, lower and solve one candidate; returns ``(certificate, solution)``."""
    enc = encode(problem, kind, d_rho, d_s, eps0)
    low = sos.lower_to_sdp(enc.program)
    sol = solve(low.sdp, opts)
    return certificate_from_solution(enc, low, sol, problem.name), sol


# ---------------------------------------------------------------------------
# degree search
# ---------------------------------------------------------------------------

@dataclass
class Attempt:
    d_rho: int
    d_s: int
    status: str
    message: str = ""
    check: str | None = None
    seconds: float = 0.0

    def row(self) -> str:
        chk = "-" if self.check is None else self.check
        return (f"d_rho={self.d_rho:<3d} d_s={self.d_s:<3d} status={self.status:<16s} "
                f"check={chk:<5s} {self.seconds:7.2f}s  {self.message}")


class SearchExhausted(RuntimeError):
    def __init__(self, attempts: list[Attempt]):
        self.attempts = attempts
        table = "\n".join(a.row() for a in attempts)
        super().__init__(f"degree search exhausted after {len(attempts)} attempts:\n{table}")


@dataclass
class SearchResult:
    certificate: Certificate
    attempts: list[Attempt]
    check: object


def default_candidates(d_rho_range: Iterable[int] = range(6, 13)) -> list[tuple[int, int]]:
    """Loop order: ``d_rho`` ascending, then ``d_s = 2*ceil(d_rho/2), ..., 2*d_rho`` step 2."""
    out = []
    for dr in d_rho_range:
        for ds in range(2 * math.ceil(dr / 2), 2 * dr + 1, 2):
            out.append((dr, ds))
    return out


def _run_candidate(args):
    problem, kind, dr, ds, opts, eps0, check_res = args
    from .dynamics import check_certificate

    t0 = time.perf_counter()
    enc = encode(problem, kind, dr, ds, eps0)
    low = sos.lower_to_sdp(enc.program)
    if low.sdp.psd_dim > opts.max_psd_dim:
        return Attempt(dr, ds, "skipped", f"PSD dimension {low.sdp.psd_dim} above cap"), None, None
    try:
        sol = solve(low.sdp, opts)
    except SdpError as exc:  # pragma: no cover - cap checked above
        return Attempt(dr, ds, "skipped", str(exc)), None, None
    att = Attempt(dr, ds, sol.status, sol.message)
    cert = rep = None
    if sol.status == FEASIBLE:
        cert = certificate_from_solution(enc, low, sol, problem.name)
        rep = check_certificate(problem, cert, check_res)
        att.check = "pass" if rep.passed else "fail"
    att.seconds = time.perf_counter() - t0
    return att, cert, rep


def degree_search(problem: ProblemSpec, kind: ConditionKind,
                  candidates: Sequence[tuple[int, int]] | None = None,
                  opts: SolverOptions | None = None, eps0: float = EPS0,
                  callback: Callable[[Attempt], None] | None = None,
                  jobs: int = 1, check_resolution: int = 200) -> SearchResult:
    """First candidate, in loop order, whose solve is feasible and whose check passes.

    With ``jobs > 1`` candidates are solved speculatively in worker
    processes, but results are committed strictly in loop order.
    """
    opts = opts or SolverOptions()
    candidates = list(candidates) if candidates is not None else default_candidates()
    if not candidates:
        raise ConditionError("empty degree range")
    args = [(problem, kind, dr, ds, opts, eps0, check_resolution) for dr, ds in candidates]
    attempts: list[Attempt] = []

    def commit(result):
        att, cert, rep = result
        attempts.append(att)
        logger.info("attempt %s", att.row())
        if callback:
            callback(att)
        if cert is not None and rep.passed:
            classify_certificate(problem, cert)
            return SearchResult(cert, attempts, rep)
        return None

    if jobs <= 1:
        for a in args:
            found = commit(_run_candidate(a))
            if found:
                return found
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_candidate, a) for a in args]
            for fut in futures:
                found = commit(fut.result())
                if found:
                    for other in futures:
                        other.cancel()
                    return found
    raise SearchExhausted(attempts)


# ---------------------------------------------------------------------------
# divergence bounds and classification
# ---------------------------------------------------------------------------

@dataclass
class DivergenceBound:
    lambda0: float
    argmax: list[float]
    method: str
    resolution: int
    domain: str
    samples: int

    def to_json(self) -> dict:
        return dict(self.__dict__)


def domain_points(problem: ProblemSpec, resolution: int = 100, seed: int = 0,
                  mc_samples: int = 100_000) -> tuple[np.ndarray, str]:
    """Sample points of ``closure(X \\ Xr)``: a grid for ``n <= 3``, Monte Carlo above."""
    box = problem.box
    if problem.n <= 3:
        axes = [np.linspace(lo, hi, resolution) for lo, hi in box]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, problem.n)
        method = "grid"
    else:
        pts = sample_box(box, mc_samples, np.random.default_rng(seed))
        method = "monte-carlo"
    keep = (problem.h(pts) <= 0) & (problem.g_target(pts) >= 0)
    # the maximum often sits on a boundary, which a grid only approaches
    edge = [sample_zero_set(q, box, 20 * resolution, seed) for q in (problem.h, problem.g_target)]
    edge = np.concatenate(edge)
    ekeep = (problem.h(edge) <= 1e-9) & (problem.g_target(edge) >= -1e-9)
    return np.concatenate([pts[keep], edge[ekeep]]), method + "+boundary"


def _refine(fun: Callable[[np.ndarray], np.ndarray], inside: Callable[[np.ndarray], np.ndarray],
            x: np.ndarray, step: np.ndarray, iters: int = 20):
    """Coordinate ascent from ``x`` with step halving, staying inside the domain."""
    best = float(fun(x[None])[0])
    for _ in range(iters):
        improved = False
        for i in range(len(x)):
            for sgn in (1.0, -1.0):
                cand = x.copy()
                cand[i] += sgn * step[i]
                if not inside(cand[None])[0]:
                    continue
                val = float(fun(cand[None])[0])
                if np.isfinite(val) and val > best:
                    x, best, improved = cand, val, True
        if not improved:
            step = step / 2
    return x, best


def estimate_lambda0(problem: ProblemSpec, controller=None, resolution: int = 100,
                     seed: int = 0) -> DivergenceBound:
    """Sampled estimate of the maximum divergence over ``closure(X \\ Xr)``.

    With a controller the closed-loop divergence is estimated over
    ``R \\ Xr`` with ``R = {x in X : rho(x) > rho_floor}``, by forward finite
    differences of the closed-loop field. The value is an estimate, not a
    certified bound.
    """
    if resolution < 50:
        raise ValueError("resolution must be at least 50 per axis")
    pts, method = domain_points(problem, resolution, seed)
    if controller is None:
        divf = divergence(problem.f)
        fun = divf
        domain = "safe_minus_target"

        def inside(x):
            return (problem.h(x) <= 0) & (problem.g_target(x) >= 0)
    else:
        from .controller import closed_loop_field

        field_ = closed_loop_field(problem, controller)
        fun = field_.divergence
        domain = "R_minus_target"

        def inside(x):
            return ((problem.h(x) <= 0) & (problem.g_target(x) >= 0)
                    & (controller.rho(x) > controller.rho_floor))
        pts = pts[controller.rho(pts) > controller.rho_floor]
    if len(pts) == 0:
        raise ValueError("empty domain sample for the divergence estimate")
    vals = np.asarray(fun(pts), dtype=float) * np.ones(len(pts))
    vals = np.where(np.isfinite(vals), vals, -np.inf)
    k = int(np.argmax(vals))
    step = (problem.box[:, 1] - problem.box[:, 0]) / (resolution - 1)
    x, best = _refine(lambda z: np.asarray(fun(z), dtype=float) * np.ones(len(z)), inside,
                      pts[k].astype(float), step)
    best = max(best, float(vals[k]))
    return DivergenceBound(best, x.tolist(), method + "+refine", resolution, domain, len(pts))


def classify(cert: Certificate, problem: ProblemSpec, bound: DivergenceBound | None = None,
             margin: float = CLASSIFY_MARGIN, resolution: int = 100) -> tuple[str, dict]:
    """Strong/weak label with the sampled evidence that supports it."""
    tag = cert.kind.tag
    evidence: dict = {"basis": "sampled evidence", "margin": margin}
    if tag in (Condition.STRONG_EXP, Condition.STRONG_ASYM):
        evidence["rule"] = "strong condition"
        return STRONG, evidence
    if tag is Condition.PRAJNA:
        evidence["rule"] = "density condition (weak property)"
        return WEAK, evidence

    if tag is Condition.SYNTHESIS:
        from .controller import RationalController

        ctrl = RationalController.from_certificate(cert)
        if bound is None:
            bound = estimate_lambda0(problem, ctrl, max(resolution, 50))
        lam = cert.kind.lam_constant
        evidence.update(lambda0=bound.lambda0, domain=bound.domain, resolution=bound.resolution,
                        lam=lam)
        if lam is None:
            evidence["rule"] = "non-constant lambda: no rule"
            return UNCLASSIFIED, evidence
        if bound.lambda0 + margin < lam:
            evidence["rule"] = "lambda0 < lambda"
            return STRONG, evidence
        if bound.lambda0 > 0 and 0 < lam <= bound.lambda0:
            evidence["rule"] = "0 < lambda <= lambda0"
            return WEAK, evidence
        evidence["rule"] = "no case applies"
        return UNCLASSIFIED, evidence

    pts, method = domain_points(problem, max(resolution, 50))
    divf = divergence(problem.f)(pts)
    lam = cert.kind.lam(pts) * np.ones(len(pts))
    gap = float(np.min(lam - divf))
    lam_min = float(np.min(lam))
    evidence.update(min_lambda_minus_div=gap, min_lambda=lam_min, samples=len(pts),
                    grid=method, resolution=max(resolution, 50))
    if bound is not None:
        evidence["lambda0"] = bound.lambda0
    if tag is Condition.WEAK_EXP:
        if gap > margin:
            evidence["rule"] = "lambda > div f on all samples"
            return STRONG, evidence
        if lam_min > 0:
            evidence["rule"] = "lambda > 0 (weak property)"
            return WEAK, evidence
        evidence["rule"] = "lambda <= 0 somewhere and the strong test failed"
        return UNCLASSIFIED, evidence
    # weak-asym
    rho2 = cert.polys["rho2"](pts)
    worst = float(np.max(rho2 * divf))
    evidence["max_rho2_div"] = worst
    if worst <= margin and gap >= -margin:
        evidence["rule"] = "rho2 div f <= 0 and lambda >= div f on all samples"
        return STRONG, evidence
    if lam_min >= 0:
        evidence["rule"] = "lambda >= 0 (weak property)"
        return WEAK, evidence
    evidence["rule"] = "lambda < 0 somewhere and the strong test failed"
    return UNCLASSIFIED, evidence


def classify_certificate(problem: ProblemSpec, cert: Certificate, **kw) -> Certificate:
    cert.classification, cert.evidence = classify(cert, problem, **kw)
    return cert


def recover_controller(cert: Certificate, rho_floor: float = RHO_FLOOR, box=None):
    """``u = psi / rho`` from a synthesis certificate."""
    from .controller import RationalController

    if cert.kind.tag is not Condition.SYNTHESIS:
        raise ConditionError("controller recovery needs a synthesis certificate")
    return RationalController(cert.psi, cert.polys["rho"], rho_floor, box)
