"""Sum-of-squares programs and their lowering to block SDPs.

Unknown polynomials are declared as :class:`PolyVar` objects and combined
with known polynomials into :class:`LinPoly` expressions, which are affine in
the unknown scalars. Each ``expr in SOS`` constraint is lowered by Gram
matrix coefficient matching: one PSD slack block per constraint and one
linear equality per monomial up to the slack degree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .poly import Monomial, Polynomial, PolyVector, monomial_basis
from .sdp import Block, BlockData, Sdp, SdpSolution

# Key of a scalar unknown: (var id, coefficient index) for free variables,
# (var id, (a, b)) with a <= b for Gram entries of SOS variables.
Key = tuple


class SosError(ValueError):
    pass


@dataclass(frozen=True)
class PolyVar:
    id: str
    num_vars: int
    degree: int
    kind: str  # "free" or "sos"
    basis: tuple[Monomial, ...]

    @property
    def size(self) -> int:
        """Coefficient count (free) or Gram dimension (sos)."""
        return len(self.basis)

    def expr(self) -> "LinPoly":
        terms: dict[Monomial, dict[Key, float]] = {}
        if self.kind == "free":
            for j, m in enumerate(self.basis):
                terms[m] = {(self.id, j): 1.0}
        else:
            for a, ma in enumerate(self.basis):
                for b in range(a, len(self.basis)):
                    m = tuple(x + y for x, y in zip(ma, self.basis[b]))
                    terms.setdefault(m, {})[(self.id, (a, b))] = 1.0 if a == b else 2.0
        return LinPoly(self.num_vars, terms)


class LinPoly:
    """Polynomial whose coefficients are affine functions of decision scalars.

    ``terms[m][key]`` is the coefficient of scalar ``key`` in the coefficient
    of monomial ``m``; ``key is None`` holds the constant part.
    """

    __slots__ = ("num_vars", "terms")

    def __init__(self, num_vars: int, terms: Mapping[Monomial, Mapping] | None = None):
        self.num_vars = num_vars
        self.terms: dict[Monomial, dict] = {}
        for m, d in (terms or {}).items():
            d = {k: float(v) for k, v in d.items() if v != 0}
            if d:
                self.terms[tuple(m)] = d

    @classmethod
    def lift(cls, p) -> "LinPoly":
        if isinstance(p, LinPoly):
            return p
        if isinstance(p, PolyVar):
            return p.expr()
        if isinstance(p, Polynomial):
            return cls(p.num_vars, {m: {None: c} for m, c in p.items()})
        raise TypeError(f"cannot lift {type(p).__name__} to LinPoly")

    def _other(self, other) -> "LinPoly":
        if isinstance(other, (int, float)):
            return LinPoly(self.num_vars, {(0,) * self.num_vars: {None: float(other)}})
        other = LinPoly.lift(other)
        if other.num_vars != self.num_vars:
            raise SosError("dimension mismatch in SOS expression")
        return other

    def __add__(self, other):
        other = self._other(other)
        terms = {m: dict(d) for m, d in self.terms.items()}
        for m, d in other.terms.items():
            acc = terms.setdefault(m, {})
            for k, v in d.items():
                acc[k] = acc.get(k, 0.0) + v
        return LinPoly(self.num_vars, terms)

    __radd__ = __add__

    def __neg__(self):
        return self.scale(-1.0)

    def __sub__(self, other):
        return self + (-self._other(other))

    def __rsub__(self, other):
        return self._other(other) - self

    def scale(self, s: float) -> "LinPoly":
        return LinPoly(self.num_vars, {m: {k: s * v for k, v in d.items()}
                                       for m, d in self.terms.items()})

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.scale(float(other))
        if isinstance(other, Polynomial):
            return self.mul_poly(other)
        return NotImplemented

    __rmul__ = __mul__

    def mul_poly(self, p: Polynomial) -> "LinPoly":
        if p.num_vars != self.num_vars:
            raise SosError("dimension mismatch in SOS expression")
        terms: dict[Monomial, dict] = {}
        for mp, cp in p.items():
            for m, d in self.terms.items():
                mm = tuple(x + y for x, y in zip(m, mp))
                acc = terms.setdefault(mm, {})
                for k, v in d.items():
                    acc[k] = acc.get(k, 0.0) + cp * v
        return LinPoly(self.num_vars, terms)

    def partial(self, i: int) -> "LinPoly":
        terms: dict[Monomial, dict] = {}
        for m, d in self.terms.items():
            if m[i] == 0:
                continue
            e = list(m)
            e[i] -= 1
            acc = terms.setdefault(tuple(e), {})
            for k, v in d.items():
                acc[k] = acc.get(k, 0.0) + m[i] * v
        return LinPoly(self.num_vars, terms)

    def degree(self) -> int:
        return max((sum(m) for m in self.terms), default=0)

    def min_degree(self) -> int:
        return min((sum(m) for m in self.terms), default=0)

    def keys(self) -> set:
        return {k for d in self.terms.values() for k in d}

    def constant_part(self) -> Polynomial:
        return Polynomial(self.num_vars, {m: d.get(None, 0.0) for m, d in self.terms.items()})

    def substitute(self, values: Mapping[Key, float]) -> Polynomial:
        """Evaluate at an assignment of the decision scalars (missing -> 0)."""
        out: dict[Monomial, float] = {}
        for m, d in self.terms.items():
            out[m] = sum(v * (1.0 if k is None else values.get(k, 0.0)) for k, v in d.items())
        return Polynomial(self.num_vars, out)

    def rename(self, mapping: Mapping[str, str]) -> "LinPoly":
        def rk(k):
            return k if k is None else (mapping.get(k[0], k[0]), k[1])
        return LinPoly(self.num_vars, {m: {rk(k): v for k, v in d.items()}
                                       for m, d in self.terms.items()})

    def __eq__(self, other):
        return (isinstance(other, LinPoly) and self.num_vars == other.num_vars
                and self.terms == other.terms)

    def max_abs_diff(self, other: "LinPoly") -> float:
        diff = self - other
        return max((abs(v) for d in diff.terms.values() for v in d.values()), default=0.0)


def density_divergence(rho, f: PolyVector) -> LinPoly:
    """``div(rho f)`` for an unknown ``rho``."""
    rho = LinPoly.lift(rho)
    out = LinPoly(rho.num_vars)
    for i, fi in enumerate(f):
        out = out + rho.mul_poly(fi).partial(i)
    return out


def lie_derivative(v, f: PolyVector) -> LinPoly:
    """``grad(v) . f`` for an unknown ``v``."""
    v = LinPoly.lift(v)
    out = LinPoly(v.num_vars)
    for i, fi in enumerate(f):
        out = out + v.partial(i).mul_poly(fi)
    return out


@dataclass
class SosConstraint:
    expr: LinPoly
    name: str
    slack_degree: int
    basis: tuple[Monomial, ...]


@dataclass
class SosProgram:
    num_vars: int
    vars: list[PolyVar] = field(default_factory=list)
    constraints: list[SosConstraint] = field(default_factory=list)

    def _register(self, var: PolyVar) -> PolyVar:
        if any(v.id == var.id for v in self.vars):
            raise SosError(f"duplicate variable id {var.id!r}")
        if var.num_vars != self.num_vars:
            raise SosError("variable dimension does not match program")
        self.vars.append(var)
        return var

    def declare_free(self, id: str, degree: int, num_vars: int | None = None) -> PolyVar:
        if degree < 0:
            raise SosError("degree must be nonnegative")
        n = self.num_vars if num_vars is None else num_vars
        return self._register(PolyVar(id, n, degree, "free", tuple(monomial_basis(n, degree))))

    def declare_sos(self, id: str, degree: int, num_vars: int | None = None) -> PolyVar:
        if degree < 0 or degree % 2:
            raise SosError(f"SOS variable {id!r} needs an even nonnegative degree, got {degree}")
        n = self.num_vars if num_vars is None else num_vars
        return self._register(PolyVar(id, n, degree, "sos", tuple(monomial_basis(n, degree // 2))))

    def var(self, id: str) -> PolyVar:
        for v in self.vars:
            if v.id == id:
                return v
        raise KeyError(id)

    def add_sos_constraint(self, expr, name: str | None = None,
                           slack_degree: int | None = None) -> SosConstraint:
        """Require ``expr`` to be a sum of squares.

        The slack degree defaults to the smallest even integer covering the
        expression's degree. The Gram basis starts at half the expression's
        lowest structural degree, since no square can produce lower terms.
        """
        expr = LinPoly.lift(expr)
        if expr.num_vars != self.num_vars:
            raise SosError("constraint dimension does not match program")
        declared = {v.id for v in self.vars}
        for k in expr.keys():
            if k is not None and k[0] not in declared:
                raise SosError(f"undeclared variable {k[0]!r} in constraint")
        deg = expr.degree()
        if slack_degree is None:
            slack_degree = deg + (deg % 2)
        if slack_degree % 2:
            raise SosError("slack degree must be even")
        if deg > slack_degree:
            raise SosError(f"expression degree {deg} exceeds slack degree {slack_degree}")
        lo = math.ceil(expr.min_degree() / 2) if expr.terms else 0
        basis = tuple(monomial_basis(self.num_vars, slack_degree // 2, min_degree=lo))
        c = SosConstraint(expr, name or f"c{len(self.constraints)}", slack_degree, basis)
        self.constraints.append(c)
        return c


@dataclass
class Lowering:
    """Bookkeeping that maps SDP variables back to polynomials."""

    program: SosProgram
    sdp: Sdp
    free_offset: dict[str, int]
    var_block: dict[str, int]
    slack_block: list[int]
    rows: list[list[Monomial]]
    row_offset: list[int]

    def values(self, X: Sequence[np.ndarray], z: np.ndarray) -> dict[Key, float]:
        vals: dict[Key, float] = {}
        for v in self.program.vars:
            if v.kind == "free":
                off = self.free_offset[v.id]
                for j in range(v.size):
                    vals[(v.id, j)] = float(z[off + j])
            else:
                Q = X[self.var_block[v.id]]
                for a in range(v.size):
                    for b in range(a, v.size):
                        vals[(v.id, (a, b))] = float((Q[a, b] + Q[b, a]) / 2)
        return vals

    def polynomial(self, var: PolyVar | str, X, z) -> Polynomial:
        var = self.program.var(var) if isinstance(var, str) else var
        if var.kind == "free":
            off = self.free_offset[var.id]
            return Polynomial.from_coefficients(var.basis, z[off:off + var.size])
        return Polynomial.from_gram(var.basis, _sym(X[self.var_block[var.id]]))

    def gram(self, var: PolyVar | str, X) -> np.ndarray:
        var = self.program.var(var) if isinstance(var, str) else var
        return _sym(X[self.var_block[var.id]])

    def slack_gram(self, idx: int, X) -> np.ndarray:
        return _sym(X[self.slack_block[idx]])

    def extract(self, sol: SdpSolution) -> dict:
        polys = {v.id: self.polynomial(v, sol.X, sol.free) for v in self.program.vars}
        grams = {v.id: (v.basis, self.gram(v, sol.X)) for v in self.program.vars if v.kind == "sos"}
        for i, c in enumerate(self.program.constraints):
            grams[c.name] = (c.basis, self.slack_gram(i, sol.X))
        return {"polys": polys, "grams": grams}

    def constraint_residual(self, idx: int, X, z) -> Polynomial:
        """expr(values) - z^T Q z for constraint ``idx``."""
        c = self.program.constraints[idx]
        vals = self.values(X, z)
        lhs = c.expr.substitute(vals)
        return lhs - Polynomial.from_gram(c.basis, _sym(X[self.slack_block[idx]]))


def _sym(Q):
    Q = np.asarray(Q, dtype=float)
    return (Q + Q.T) / 2


def lower_to_sdp(prog: SosProgram) -> Lowering:
    """Gram-matrix lowering of ``prog`` to a feasibility SDP (zero objective)."""
    n = prog.num_vars
    blocks: list[Block] = []
    var_block: dict[str, int] = {}
    free_offset: dict[str, int] = {}
    n_free = 0
    for v in prog.vars:
        if v.kind == "sos":
            var_block[v.id] = len(blocks)
            blocks.append(Block(v.size))
        else:
            free_offset[v.id] = n_free
            n_free += v.size
    slack_block = []
    for c in prog.constraints:
        slack_block.append(len(blocks))
        blocks.append(Block(len(c.basis)))

    entries: list[list] = [[] for _ in blocks]
    B_rows, B_cols, B_vals = [], [], []
    b: list[float] = []
    rows: list[list[Monomial]] = []
    row_offset: list[int] = []
    for ci, c in enumerate(prog.constraints):
        if c.expr.degree() > c.slack_degree:
            raise SosError(f"constraint {c.name}: degree overflow")
        monos = monomial_basis(n, c.slack_degree)
        index = {m: len(b) + i for i, m in enumerate(monos)}
        row_offset.append(len(b))
        rows.append(monos)
        b.extend([0.0] * len(monos))
        for m, d in c.expr.terms.items():
            r = index[m]
            for k, v in d.items():
                if k is None:
                    b[r] -= v
                    continue
                vid, idx = k
                if vid in free_offset:
                    B_rows.append(r)
                    B_cols.append(free_offset[vid] + idx)
                    B_vals.append(v)
                else:
                    a, bb = idx
                    entries[var_block[vid]].append((r, a, bb, v if a == bb else v / 2))
        sb = slack_block[ci]
        for a, ma in enumerate(c.basis):
            for bb in range(a, len(c.basis)):
                m = tuple(x + y for x, y in zip(ma, c.basis[bb]))
                entries[sb].append((index[m], a, bb, -1.0))
    m = len(b)
    B = np.zeros((m, n_free))
    np.add.at(B, (np.array(B_rows, dtype=int), np.array(B_cols, dtype=int)), np.array(B_vals))
    sdp = Sdp(blocks, [BlockData.from_entries(e) for e in entries], np.array(b), None, B, None)
    return Lowering(prog, sdp, free_offset, var_block, slack_block, rows, row_offset)


def equality_residuals(low: Lowering, X, z) -> np.ndarray:
    """``A(X) + B z - b`` of the lowered SDP."""
    sdp = low.sdp
    return sdp.apply_A(list(X)) + sdp.B @ np.asarray(z) - sdp.b
