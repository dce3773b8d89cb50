"""Trajectory simulation, Monte Carlo validation and independent certificate checks.

The certificate checker deliberately rebuilds every constraint polynomial
from the problem data with the :mod:`densityreach.poly` routines rather than
reusing the SOS encoder, so that an encoding slip cannot certify itself.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .conditions import Certificate, Condition
from .controller import ClosedLoopField, RationalController
from .poly import (Polynomial, PolyVector, density_divergence, divergence, lie_derivative)
from .problem import (ProblemSpec, STRICT_NEG, project_to_zero_set, sample_set,
                      sample_zero_set)
from .sdp import min_eigenvalue

logger = logging.getLogger(__name__)

REACHED = "reached_target"
LEFT_SAFE = "left_safe"
TIMED_OUT = "timed_out"

FLAG_DOMAIN = "left_controller_domain"
FLAG_BLOWUP = "non_finite_state"

RESIDUAL_TOL = 1e-6
EIG_TOL = 1e-9
MARGIN_TOL = 1e-6
BOUNDARY_BAND = 1e-3


@dataclass
class SimOptions:
    dt: float = 0.01
    t_max: float = 100.0
    event_tol: float = 1e-9
    stride: int = 10

    def __post_init__(self):
        if not (self.dt > 0 and self.t_max > 0):
            raise ValueError("dt and t_max must be positive")


@dataclass
class TrajectoryResult:
    outcome: str
    t_event: float
    times: np.ndarray
    path: np.ndarray
    controller_used: bool = False
    flags: tuple[str, ...] = ()

    @property
    def t_hit(self) -> float | None:
        return self.t_event if self.outcome == REACHED else None

    @property
    def t_exit(self) -> float | None:
        return self.t_event if self.outcome == LEFT_SAFE else None


def rk4_step(field: Callable, x: np.ndarray, dt) -> tuple[np.ndarray, np.ndarray]:
    """One classical RK4 step for a batch; ``dt`` may be a per-row array.

    ``field`` returns ``(values, ok)``; the returned mask is false where any
    stage left the field's domain.
    """
    dt = np.asarray(dt, dtype=float).reshape(-1, 1) if np.ndim(dt) else dt
    k1, o1 = field(x)
    k2, o2 = field(x + 0.5 * dt * k1)
    k3, o3 = field(x + 0.5 * dt * k2)
    k4, o4 = field(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), o1 & o2 & o3 & o4


def rk4_integrate(f: Callable[[np.ndarray], np.ndarray], x0, t_end: float, dt: float) -> np.ndarray:
    """Fixed-step RK4 of ``x' = f(x)`` to ``t_end`` (last step shortened)."""
    x = np.atleast_2d(np.asarray(x0, dtype=float))
    fld = lambda z: (f(z), np.ones(len(z), dtype=bool))
    steps = int(math.floor(t_end / dt + 1e-12))
    for _ in range(steps):
        x, _ = rk4_step(fld, x, dt)
    rest = t_end - steps * dt
    if rest > 1e-15:
        x, _ = rk4_step(fld, x, rest)
    return x


def _bisect_crossing(field, x_old, dt, crossed: Callable[[np.ndarray], np.ndarray], tol):
    """Smallest sub-step (to ``tol``) at which ``crossed`` becomes true, per row."""
    lo = np.zeros(len(x_old))
    hi = np.full(len(x_old), dt)
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        xm, _ = rk4_step(field, x_old, mid)
        c = crossed(xm)
        hi = np.where(c, mid, hi)
        lo = np.where(c, lo, mid)
    xh, _ = rk4_step(field, x_old, hi)
    return hi, xh


def simulate_batch(problem: ProblemSpec, X0, controller: RationalController | None = None,
                   opts: SimOptions | None = None, keep_paths: bool = False):
    """Integrate many initial states at once.

    Returns ``(outcomes, times, flags, paths)`` where ``paths`` is a list of
    ``(times, states)`` per trajectory when ``keep_paths`` is set.
    """
    opts = opts or SimOptions()
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    B = len(X0)
    if not np.all(np.isfinite(X0)):
        raise ValueError("initial states must be finite")
    if np.any(problem.h(X0) >= 0):
        raise ValueError("initial state outside the safe set")
    fld = ClosedLoopField(problem, controller).evaluate
    g, h = problem.g_target, problem.h

    outcome = np.full(B, TIMED_OUT, dtype=object)
    t_ev = np.full(B, opts.t_max)
    flags: list[list[str]] = [[] for _ in range(B)]
    active = np.ones(B, dtype=bool)
    at_target = g(X0) <= 0
    outcome[at_target] = REACHED
    t_ev[at_target] = 0.0
    active &= ~at_target

    x = X0.copy()
    paths = [([0.0], [X0[i].copy()]) for i in range(B)] if keep_paths else None
    n_steps = int(math.ceil(opts.t_max / opts.dt - 1e-9))
    for k in range(n_steps):
        if not active.any():
            break
        t0 = k * opts.dt
        dt = min(opts.dt, opts.t_max - t0)
        idx = np.flatnonzero(active)
        xo = x[idx]
        with np.errstate(all="ignore"):
            xn, ok = rk4_step(fld, xo, dt)
        finite = np.all(np.isfinite(xn), axis=1)
        bad_dom = ~ok
        blow = ok & ~finite
        for j in np.flatnonzero(bad_dom | blow):
            i = idx[j]
            outcome[i] = LEFT_SAFE
            t_ev[i] = t0
            flags[i].append(FLAG_DOMAIN if bad_dom[j] else FLAG_BLOWUP)
            active[i] = False
        good = ok & finite
        gi, xo_g, xn_g = idx[good], xo[good], xn[good]
        hit = g(xn_g) <= 0
        out = h(xn_g) >= 0
        tg = np.full(len(gi), np.inf)
        th = np.full(len(gi), np.inf)
        xg = xn_g.copy()
        xh = xn_g.copy()
        if hit.any():
            tg[hit], xg[hit] = _bisect_crossing(fld, xo_g[hit], dt, lambda z: g(z) <= 0,
                                                opts.event_tol)
        if out.any():
            th[out], xh[out] = _bisect_crossing(fld, xo_g[out], dt, lambda z: h(z) >= 0,
                                                opts.event_tol)
        reached = hit & (tg <= th)   # target is checked first
        exited = out & ~reached
        outcome[gi[reached]] = REACHED
        t_ev[gi[reached]] = t0 + tg[reached]
        outcome[gi[exited]] = LEFT_SAFE
        t_ev[gi[exited]] = t0 + th[exited]
        active[gi[reached | exited]] = False
        x[gi] = xn_g
        x[gi[reached]] = xg[reached]
        x[gi[exited]] = xh[exited]
        if keep_paths:
            for j, i in enumerate(gi):
                if reached[j] or exited[j] or (k + 1) % opts.stride == 0:
                    paths[i][0].append(t_ev[i] if (reached[j] or exited[j]) else t0 + dt)
                    paths[i][1].append(x[i].copy())
    return outcome, t_ev, [tuple(f) for f in flags], paths


def simulate(problem: ProblemSpec, x0, controller: RationalController | None = None,
             opts: SimOptions | None = None) -> TrajectoryResult:
    """RK4 with event detection: target ``g <= 0`` before exit ``h >= 0``."""
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    if x0.shape[1] != problem.n:
        raise ValueError("initial state has the wrong dimension")
    if problem.h(x0)[0] >= 0:
        raise ValueError("initial state outside the safe set")
    outcome, t_ev, flags, paths = simulate_batch(problem, x0, controller, opts, keep_paths=True)
    times, states = paths[0]
    return TrajectoryResult(outcome[0], float(t_ev[0]), np.array(times), np.array(states),
                            controller is not None, flags[0])


@dataclass
class ValidationReport:
    samples: int
    reached: int
    left_safe: int
    timed_out: int
    reach_fraction: float
    witnesses: list = field(default_factory=list)
    domain_faults: int = 0
    seed: int = 0
    note: str = ("Monte Carlo estimate over sampled initial states; it bounds the failure "
                 "fraction but cannot certify that failures have measure zero.")

    def to_json(self) -> dict:
        return asdict(self)


def validate_reach_avoid(problem: ProblemSpec, controller: RationalController | None = None,
                         samples: int = 1000, seed: int = 0, opts: SimOptions | None = None,
                         batch: int = 2000) -> ValidationReport:
    if samples < 1:
        raise ValueError("samples must be positive")
    pts = sample_set(problem.l, STRICT_NEG, problem.box, samples, seed)
    outcomes, flags = [], []
    for start in range(0, samples, batch):
        o, _, fl, _ = simulate_batch(problem, pts[start:start + batch], controller, opts)
        outcomes.append(o)
        flags.extend(fl)
    outcome = np.concatenate(outcomes)
    reached = int(np.sum(outcome == REACHED))
    left = int(np.sum(outcome == LEFT_SAFE))
    timed = int(np.sum(outcome == TIMED_OUT))
    fails = np.flatnonzero(outcome != REACHED)[:10]
    witnesses = [{"x0": pts[i].tolist(), "outcome": str(outcome[i]), "flags": list(flags[i])}
                 for i in fails]
    faults = sum(FLAG_DOMAIN in f for f in flags)
    return ValidationReport(samples, reached, left, timed, reached / samples, witnesses, faults,
                            seed)


# ---------------------------------------------------------------------------
# certificate checking
# ---------------------------------------------------------------------------

@dataclass
class ConstraintCheck:
    name: str
    residual: float
    min_eig: float
    margin: float
    domain: str
    samples: int
    witness: list | None = None


@dataclass
class CheckReport:
    constraints: list[ConstraintCheck]
    multiplier_eigs: dict[str, float]
    passed: bool
    resolution: int
    tolerances: dict = field(default_factory=lambda: dict(residual=RESIDUAL_TOL, eig=EIG_TOL,
                                                          margin=MARGIN_TOL))

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def to_json(self) -> dict:
        d = asdict(self)
        d["verdict"] = self.verdict
        return d

    def failures(self) -> list[str]:
        out = []
        for c in self.constraints:
            if not c.residual <= RESIDUAL_TOL:
                out.append(f"{c.name}: residual {c.residual:.3e}")
            if not c.min_eig >= -EIG_TOL:
                out.append(f"{c.name}: Gram eigenvalue {c.min_eig:.3e}")
            if not c.margin >= -MARGIN_TOL:
                out.append(f"{c.name}: sampled margin {c.margin:.3e} at {c.witness}")
        for k, e in self.multiplier_eigs.items():
            if not e >= -EIG_TOL:
                out.append(f"{k}: Gram eigenvalue {e:.3e}")
        return out


def certificate_constraints(problem: ProblemSpec, cert: Certificate) -> dict:
    """Per constraint: ``(identity polynomial, literal left-hand side, domain tag)``.

    The identity polynomial includes the multiplier terms and must equal the
    constraint's slack Gram form; the literal side is what the underlying
    inequality requires to be nonnegative on the domain.
    """
    f, h, l, g = problem.f, problem.h, problem.l, problem.g_target
    P = cert.polys
    s = {k: cert.multiplier(k) for k in cert.grams if k.startswith("s") and k[1:].isdigit()}
    p = P["p"]
    eps0 = cert.eps0
    lam = cert.kind.lam
    tag = cert.kind.tag
    out = {}

    def rel(j0, j1, lhs, name, domain="safe_minus_target"):
        out[name] = (lhs + s[j0] * h - s[j1] * g, lhs, domain)

    if tag in (Condition.WEAK_EXP, Condition.PRAJNA, Condition.SYNTHESIS):
        rho = P["rho"]
        flow = density_divergence(rho, f)
        if tag is Condition.SYNTHESIS:
            for j, psi_j in enumerate(cert.psi):
                flow = flow + density_divergence(psi_j, problem.control.column(j))
        flow = flow - eps0 if tag is Condition.PRAJNA else flow - lam * rho
        rel("s0", "s1", flow, "flow")
        main = rho
        init_mult = "s2"
    elif tag is Condition.WEAK_ASYM:
        r1, r2 = P["rho1"], P["rho2"]
        rel("s0", "s1", density_divergence(r1, f) - lam * r1, "flow")
        rel("s2", "s3", density_divergence(r2, f) - r1, "flow2")
        main = r1
        init_mult = "s4"
    elif tag is Condition.STRONG_ASYM:
        v, w = P["v"], P["w"]
        rel("s0", "s1", lie_derivative(v, f), "flow")
        rel("s2", "s3", lie_derivative(w, f) - v, "flow2")
        main = v
        init_mult = "s4"
    else:
        v = P["v"]
        rel("s0", "s1", lie_derivative(v, f) - lam * v, "flow")
        main = v
        init_mult = "s2"
    out["init"] = (main - eps0 + s[init_mult] * l, main - eps0, "initial")
    out["boundary"] = (-main + p * h, -main, "boundary")
    return out


def _grid(box, resolution):
    axes = [np.linspace(lo, hi, resolution) for lo, hi in box]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(box))


def check_domains(problem: ProblemSpec, resolution: int = 200, band: float = BOUNDARY_BAND,
                  seed: int = 0) -> dict[str, np.ndarray]:
    """Grid points for the closure of X minus Xr, for X0, and for the boundary of X.

    Boundary points are grid points within ``band`` of the zero level of
    ``h``, Newton-projected onto it, plus projected samples of the level set
    so that the boundary is covered even on coarse grids.
    """
    if problem.n <= 3:
        pts = _grid(problem.box, resolution)
    else:
        from .problem import sample_box
        pts = sample_box(problem.box, resolution ** 2, np.random.default_rng(seed))
    hv = problem.h(pts)
    gv = problem.g_target(pts)
    flow = pts[(hv <= 0) & (gv >= 0)]
    init = pts[problem.l(pts) < 0]
    near = pts[np.abs(hv) <= band]
    proj, ok = project_to_zero_set(problem.h, near)
    extra = sample_zero_set(problem.h, problem.box, 4 * resolution, seed)
    bnd = np.concatenate([proj[ok], extra]) if len(extra) else proj[ok]
    return {"safe_minus_target": flow, "initial": init, "boundary": bnd}


def check_certificate(problem: ProblemSpec, cert: Certificate, resolution: int = 200,
                      band: float = BOUNDARY_BAND) -> CheckReport:
    """Algebraic, spectral and sampled checks of a certificate; never raises."""
    domains = check_domains(problem, resolution, band)
    checks = []
    try:
        cons = certificate_constraints(problem, cert)
    except (KeyError, TypeError, ValueError) as exc:
        logger.error("certificate is incomplete: %s", exc)
        return CheckReport([ConstraintCheck("structure", math.inf, -math.inf, -math.inf, "", 0,
                                            None)], {}, False, resolution)
    for name in cert.constraint_names:
        ident, lhs, dom = cons[name]
        if name in cert.grams:
            basis, Q = cert.grams[name]
            residual = (ident - Polynomial.from_gram(basis, Q)).max_abs_coeff()
            eig = min_eigenvalue((Q + Q.T) / 2)
        else:
            residual, eig = math.inf, -math.inf
        pts = domains[dom]
        if len(pts):
            vals = np.asarray(lhs(pts), dtype=float) * np.ones(len(pts))
            k = int(np.argmin(vals))
            margin, witness = float(vals[k]), pts[k].tolist()
        else:
            margin, witness = math.inf, None
        checks.append(ConstraintCheck(name, float(residual), float(eig), margin, dom, len(pts),
                                      witness))
    mult = {k: float(min_eigenvalue((Q + Q.T) / 2)) for k, (b, Q) in cert.grams.items()
            if k not in cert.constraint_names}
    passed = (all(c.residual <= RESIDUAL_TOL and c.min_eig >= -EIG_TOL
                  and c.margin >= -MARGIN_TOL for c in checks)
              and all(e >= -EIG_TOL for e in mult.values()))
    return CheckReport(checks, mult, passed, resolution)


# ---------------------------------------------------------------------------
# Liouville identity
# ---------------------------------------------------------------------------

@dataclass
class LiouvilleResult:
    lhs: float
    rhs: float
    rel_error: float
    samples: int
    t: float


def liouville_check(f: PolyVector, rho: Polynomial, box, t: float, mc_samples: int = 100_000,
                    seed: int = 0, intervals: int = 64, max_dt: float = 0.01,
                    jacobian: str = "abel") -> LiouvilleResult:
    """Monte Carlo test of the transport identity for ``rho`` under ``x' = f(x)``.

    Left side ``int_{phi_t(Z)} rho - int_Z rho`` via the change of variables
    ``x -> phi_t(x)`` with weight ``det J``; right side the time integral
    (composite Simpson) of ``int_{phi_tau(Z)} div(rho f)`` on the same samples.
    ``det J`` follows from ``d log det J / dt = div f`` along the flow
    (``jacobian="abel"``) or from the full variational equation ``J' = Df J``
    (``jacobian="variational"``).
    """
    if intervals % 2:
        raise ValueError("Simpson's rule needs an even number of intervals")
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    n = len(box)
    rng = np.random.default_rng(seed)
    x = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((mc_samples, n))
    vol = float(np.prod(box[:, 1] - box[:, 0]))
    divf = divergence(f)
    drf = density_divergence(rho, f)
    jac = [[pp for pp in row] for row in f.jacobian()]

    if jacobian == "abel":
        def rhs_fn(state):
            z = state[:, :n]
            return np.concatenate([f(z).reshape(-1, n), divf(z).reshape(-1, 1) * np.ones((len(z), 1))],
                                  axis=1), np.ones(len(z), dtype=bool)

        state = np.concatenate([x, np.zeros((mc_samples, 1))], axis=1)
        det = lambda s: np.exp(s[:, n])
    elif jacobian == "variational":
        def rhs_fn(state):
            z = state[:, :n]
            J = state[:, n:].reshape(-1, n, n)
            D = np.stack([np.stack([np.asarray(pp(z)) * np.ones(len(z)) for pp in row], -1)
                          for row in jac], -2)
            return np.concatenate([f(z).reshape(-1, n), (D @ J).reshape(len(z), -1)], axis=1), \
                np.ones(len(z), dtype=bool)

        state = np.concatenate([x, np.tile(np.eye(n).ravel(), (mc_samples, 1))], axis=1)
        det = lambda s: np.linalg.det(s[:, n:].reshape(-1, n, n))
    else:
        raise ValueError(f"unknown jacobian mode {jacobian!r}")

    h_int = t / intervals
    sub = max(1, int(math.ceil(h_int / max_dt - 1e-12)))
    dt = h_int / sub
    weights = np.ones(intervals + 1)
    weights[1:-1:2] = 4
    weights[2:-1:2] = 2
    node_vals = np.empty(intervals + 1)
    base = vol * float(np.mean(rho(x)))
    node_vals[0] = vol * float(np.mean(drf(x)))
    for k in range(1, intervals + 1):
        for _ in range(sub):
            state, _ = rk4_step(rhs_fn, state, dt)
        if not np.all(np.isfinite(state)):
            raise FloatingPointError("flow blew up before the final time")
        z = state[:, :n]
        node_vals[k] = vol * float(np.mean(drf(z) * det(state)))
    z = state[:, :n]
    lhs = vol * float(np.mean(rho(z) * det(state))) - base
    rhs = h_int / 3.0 * float(weights @ node_vals)
    err = abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-12)
    return LiouvilleResult(lhs, rhs, err, mc_samples, t)


# ---------------------------------------------------------------------------
# level sets and file output
# ---------------------------------------------------------------------------

def level_set_2d(p: Polynomial, box, resolution: int = 400) -> list[np.ndarray]:
    """Polylines of ``{p = 0}`` by marching squares on a ``resolution``-square grid."""
    from skimage.measure import find_contours

    if p.num_vars != 2:
        raise ValueError("level sets are only extracted for two-dimensional polynomials")
    box = np.asarray(box, dtype=float).reshape(2, 2)
    xs = np.linspace(box[0, 0], box[0, 1], resolution)
    ys = np.linspace(box[1, 0], box[1, 1], resolution)
    XX, YY = np.meshgrid(xs, ys, indexing="ij")
    V = p(np.stack([XX, YY], axis=-1))
    if np.all(V > 0) or np.all(V < 0):
        return []
    curves = []
    for c in find_contours(V, 0.0):
        cx = np.interp(c[:, 0], np.arange(resolution), xs)
        cy = np.interp(c[:, 1], np.arange(resolution), ys)
        curves.append(np.column_stack([cx, cy]))
    return curves


def is_closed(curve: np.ndarray, tol: float = 1e-9) -> bool:
    return len(curve) > 2 and float(np.linalg.norm(curve[0] - curve[-1])) <= tol


def write_levelset_csv(path, curves) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["curve_id", "x", "y"])
        for i, c in enumerate(curves):
            for x, y in c:
                w.writerow([i, repr(float(x)), repr(float(y))])


def write_trajectory_csv(path, result: TrajectoryResult) -> None:
    n = result.path.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i + 1}" for i in range(n)] + ["outcome"])
        last = len(result.times) - 1
        for k, (t, x) in enumerate(zip(result.times, result.path)):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in x]
                       + [result.outcome if k == last else ""])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, default=_json_default))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)
