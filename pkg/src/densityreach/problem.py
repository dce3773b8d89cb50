"""Reach-avoid problem definitions, sampling and JSON ingestion.

Sign conventions: safe set ``X = {h < 0}`` with boundary ``{h = 0}``,
initial set ``X0 = {l < 0}``, target set ``Xr = {g <= 0}``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .poly import Polynomial, PolyVector, from_json, gradient, parse, to_json

logger = logging.getLogger(__name__)

STRICT_NEG = "strict_neg"
NONPOS = "nonpos"


class ProblemError(ValueError):
    pass


class ContainmentError(ProblemError):
    def __init__(self, message, witness):
        super().__init__(f"{message}; witness {np.round(witness, 6).tolist()}")
        self.witness = np.asarray(witness)


class EmptySetError(ProblemError):
    pass


@dataclass(frozen=True)
class ControlStructure:
    G: tuple[tuple[Polynomial, ...], ...]  # n rows, m columns

    @property
    def m(self) -> int:
        return len(self.G[0])

    def column(self, j: int) -> PolyVector:
        return PolyVector([row[j] for row in self.G])

    def __call__(self, x) -> np.ndarray:
        """Evaluate ``G(x)``; shape ``(..., n, m)``."""
        x = np.asarray(x, dtype=float)
        return np.stack([np.stack([np.asarray(p(x)) for p in row], axis=-1) for row in self.G],
                        axis=-2)


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    n: int
    f: PolyVector
    h: Polynomial
    l: Polynomial
    g_target: Polynomial
    box: np.ndarray = field(compare=False)
    control: ControlStructure | None = None

    def __post_init__(self):
        object.__setattr__(self, "box", np.asarray(self.box, dtype=float).reshape(-1, 2))
        validate_dimensions(self)

    def __eq__(self, other):
        return (isinstance(other, ProblemSpec) and self.name == other.name and self.n == other.n
                and self.f == other.f and self.h == other.h and self.l == other.l
                and self.g_target == other.g_target and self.control == other.control
                and np.array_equal(self.box, other.box))

    __hash__ = None

    def in_safe(self, x):
        return np.asarray(self.h(x)) < 0

    def in_initial(self, x):
        return np.asarray(self.l(x)) < 0

    def in_target(self, x):
        return np.asarray(self.g_target(x)) <= 0


def validate_dimensions(spec: ProblemSpec) -> None:
    n = spec.n
    if n < 1:
        raise ProblemError("state dimension must be positive")
    if len(spec.f) != n:
        raise ProblemError(f"f has {len(spec.f)} components but n = {n}")
    for name in ("h", "l", "g_target"):
        if getattr(spec, name).num_vars != n:
            raise ProblemError(f"{name} has {getattr(spec, name).num_vars} variables, expected {n}")
    if spec.f.num_vars != n:
        raise ProblemError("f variables do not match n")
    if spec.box.shape != (n, 2) or not np.all(np.isfinite(spec.box)) \
            or np.any(spec.box[:, 0] >= spec.box[:, 1]):
        raise ProblemError("box must be n finite [lo, hi] intervals with lo < hi")
    if spec.control is not None:
        G = spec.control.G
        if len(G) != n or not G[0] or any(len(row) != len(G[0]) for row in G):
            raise ProblemError("control matrix must have n rows and m >= 1 columns")
        if any(p.num_vars != n for row in G for p in row):
            raise ProblemError("control matrix entries must have n variables")


# -- sampling ---------------------------------------------------------------

def sample_box(box, count: int, rng: np.random.Generator) -> np.ndarray:
    box = np.asarray(box, dtype=float)
    return box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((count, len(box)))


def sample_set(p: Polynomial, sign: str, box, count: int, seed: int = 0,
               max_proposals: int = 1_000_000) -> np.ndarray:
    """Uniform rejection sampling of ``{p < 0}`` or ``{p <= 0}`` inside ``box``.

    Raises :class:`EmptySetError` when fewer than one proposal in 10^4 is
    accepted after ``max_proposals`` draws.
    """
    if count < 1:
        raise ValueError("count must be positive")
    if sign not in (STRICT_NEG, NONPOS):
        raise ValueError(f"unknown sign {sign!r}")
    box = np.asarray(box, dtype=float)
    if not np.all(np.isfinite(box)):
        raise ValueError("box must be finite")
    rng = np.random.default_rng(seed)
    accepted = []
    n_acc = 0
    proposed = 0
    batch = max(4 * count, 10_000)
    while n_acc < count:
        cand = sample_box(box, batch, rng)
        vals = p(cand)
        ok = vals < 0 if sign == STRICT_NEG else vals <= 0
        accepted.append(cand[ok])
        n_acc += int(ok.sum())
        proposed += batch
        if proposed >= max_proposals and n_acc / proposed < 1e-4:
            raise EmptySetError(
                f"set appears empty in box ({n_acc} of {proposed} proposals accepted)")
    return np.concatenate(accepted)[:count]


def project_to_zero_set(p: Polynomial, pts: np.ndarray, iters: int = 30,
                        tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Newton projection of points onto ``{p = 0}`` along the gradient.

    Returns the projected points and a mask of those that converged.
    """
    grad = gradient(p)
    x = np.array(pts, dtype=float)
    for _ in range(iters):
        v = p(x)
        gv = grad(x)
        nrm2 = np.sum(gv * gv, axis=-1)
        safe = nrm2 > 1e-300
        step = np.where(safe, v / np.where(safe, nrm2, 1.0), 0.0)
        x = x - step[:, None] * gv
    ok = np.abs(p(x)) <= tol * max(1.0, p.max_abs_coeff())
    return x, ok


def sample_zero_set(p: Polynomial, box, count: int, seed: int = 0, band: float = 0.05) -> np.ndarray:
    """Points on ``{p = 0}`` inside ``box``: near-level candidates, Newton-projected."""
    box = np.asarray(box, dtype=float)
    rng = np.random.default_rng(seed)
    out = []
    total = 0
    for _ in range(50):
        cand = sample_box(box, max(20 * count, 20_000), rng)
        vals = np.abs(p(cand))
        scale = np.quantile(vals, 0.5) + 1e-300
        near = cand[vals <= band * scale]
        if len(near) == 0:
            continue
        proj, ok = project_to_zero_set(p, near)
        inside = np.all((proj >= box[:, 0]) & (proj <= box[:, 1]), axis=1)
        keep = proj[ok & inside]
        out.append(keep)
        total += len(keep)
        if total >= count:
            break
    if total == 0:
        return np.zeros((0, len(box)))
    return np.concatenate(out)[:count]


# -- validation ---------------------------------------------------------------

def check_containment(spec: ProblemSpec, samples: int = 10_000, seed: int = 0) -> list[str]:
    """Sampled check of ``closure(X0) in X`` and ``Xr in X``.

    Sound for rejection only: a witness proves a violation, a clean run proves
    nothing. Raises :class:`ContainmentError` on the first witness and returns
    advisory warnings (boundedness of X) otherwise.
    """
    warnings: list[str] = []
    for label, poly, sign in (("initial set", spec.l, STRICT_NEG), ("target set", spec.g_target, NONPOS)):
        pts = sample_set(poly, sign, spec.box, samples, seed)
        hv = spec.h(pts)
        bad = np.flatnonzero(hv >= 0)
        if len(bad):
            raise ContainmentError(f"{label} is not contained in the safe set", pts[bad[0]])
        edge = sample_zero_set(poly, spec.box, max(samples // 10, 100), seed + 1)
        if len(edge):
            hv = spec.h(edge)
            bad = np.flatnonzero(hv >= 0)
            if len(bad):
                raise ContainmentError(f"boundary of the {label} touches or leaves the safe set",
                                       edge[bad[0]])
    warnings.extend(check_bounded(spec, seed=seed))
    return warnings


def check_bounded(spec: ProblemSpec, seed: int = 0, shell: int = 2000) -> list[str]:
    """Advisory: ``h >= 0`` on the box corners and a sample of its faces."""
    box = spec.box
    n = spec.n
    rng = np.random.default_rng(seed)
    corners = np.array(np.meshgrid(*box, indexing="ij")).reshape(n, -1).T
    pts = [corners]
    for i in range(n):
        for side in (0, 1):
            face = sample_box(box, shell // (2 * n) + 1, rng)
            face[:, i] = box[i, side]
            pts.append(face)
    pts = np.concatenate(pts)
    bad = pts[spec.h(pts) < 0]
    if len(bad):
        return [f"safe set may not lie inside the box: h < 0 at {np.round(bad[0], 6).tolist()}"]
    return []


# -- JSON -----------------------------------------------------------------------

def problem_to_json(spec: ProblemSpec) -> dict:
    return {
        "name": spec.name,
        "n": spec.n,
        "f": [to_json(p) for p in spec.f],
        "h": to_json(spec.h),
        "l": to_json(spec.l),
        "g_target": to_json(spec.g_target),
        "box": spec.box.tolist(),
        "control": None if spec.control is None else {
            "m": spec.control.m,
            "G": [[to_json(p) for p in row] for row in spec.control.G],
        },
    }


def problem_from_json(obj: dict) -> ProblemSpec:
    try:
        control = None
        if obj.get("control"):
            G = tuple(tuple(from_json(p) for p in row) for row in obj["control"]["G"])
            control = ControlStructure(G)
            if control.m != int(obj["control"]["m"]):
                raise ProblemError("control.m does not match the columns of G")
        n = int(obj["n"])
        f = PolyVector([from_json(p) for p in obj["f"]])
        return ProblemSpec(
            name=str(obj.get("name", "problem")),
            n=n,
            f=f,
            h=from_json(obj["h"]),
            l=from_json(obj["l"]),
            g_target=from_json(obj["g_target"]),
            box=np.array(obj["box"], dtype=float),
            control=control,
        )
    except (KeyError, TypeError) as exc:
        raise ProblemError(f"malformed problem file: missing or invalid {exc}") from exc


def save_problem(spec: ProblemSpec, path) -> None:
    Path(path).write_text(json.dumps(problem_to_json(spec), indent=1))


def load_problem(path, validate: bool = True, samples: int = 10_000, seed: int = 0):
    """Read and validate a problem file; returns ``(spec, warnings)``."""
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ProblemError(f"cannot parse {path}: {exc}") from exc
    spec = problem_from_json(obj)
    warnings = check_containment(spec, samples, seed) if validate else []
    for w in warnings:
        logger.warning(w)
    return spec, warnings


# -- built-in problems ----------------------------------------------------------

def example1() -> ProblemSpec:
    """The two-dimensional academic benchmark with a unit-disk safe set."""
    P = lambda s: parse(s, 2)
    return ProblemSpec(
        name="example1",
        n=2,
        f=PolyVector([P("-0.5*x - 0.5*y + 0.5*x*y"), P("-0.5*y + 0.5")]),
        h=P("x^2 + y^2 - 1"),
        l=P("(x - 0.3)^2 + (y + 0.6)^2 - 0.01"),
        g_target=P("(x + 0.2)^2 + (y - 0.7)^2 - 0.02"),
        box=np.array([[-1.1, 1.1], [-1.1, 1.1]]),
    )


def double_integrator() -> ProblemSpec:
    """``x' = y, y' = u`` on the unit disk, steering from near (0, 0.1) up into a disk around (0.1, 0.6)."""
    P = lambda s: parse(s, 2)
    return ProblemSpec(
        name="double_integrator",
        n=2,
        f=PolyVector([P("y"), P("0")]),
        h=P("x^2 + y^2 - 1"),
        l=P("x^2 + (y - 0.1)^2 - 0.0025"),
        g_target=P("(x - 0.1)^2 + (y - 0.6)^2 - 0.0625"),
        box=np.array([[-1.1, 1.1], [-1.1, 1.1]]),
        control=ControlStructure(((P("0"),), (P("1"),))),
    )


def scalar_linear(rate: float) -> ProblemSpec:
    """``x' = rate * x`` with ``X = {x^2 < 1}``, ``Xr = {x^2 <= 0.01}``, ``X0`` around 0.5."""
    P = lambda s: parse(s, 1, ["x"])
    return ProblemSpec(
        name=f"scalar_linear({rate:g})",
        n=1,
        f=PolyVector([P(f"{rate!r}*x")]),
        h=P("x^2 - 1"),
        l=P("(x - 0.5)^2 - 0.0025"),
        g_target=P("x^2 - 0.01"),
        box=np.array([[-1.1, 1.1]]),
    )


BUILTIN = {"example1": example1, "double_integrator": double_integrator,
           "decay": lambda: scalar_linear(-1.0), "growth": lambda: scalar_linear(1.0)}
