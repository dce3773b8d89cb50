"""Sparse multivariate polynomials with real coefficients.

Polynomials are immutable maps from exponent tuples to floats. Terms are kept
in graded lexicographic order (total degree first, then ``x1 > x2 > ...``),
which fixes the ordering of every basis and every coefficient-matching row
built on top of this module.
"""

from __future__ import annotations

import math
from itertools import combinations_with_replacement
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

Monomial = tuple[int, ...]


def grlex_key(m: Monomial) -> tuple:
    return (sum(m), tuple(-e for e in m))


def monomial_basis(num_vars: int, max_degree: int, min_degree: int = 0) -> list[Monomial]:
    """All monomials with ``min_degree <= deg <= max_degree`` in graded lex order.

    >>> monomial_basis(2, 1)
    [(0, 0), (1, 0), (0, 1)]
    """
    if num_vars < 1:
        raise ValueError("num_vars must be positive")
    if max_degree < 0:
        raise ValueError("max_degree must be nonnegative")
    out = []
    for d in range(max(min_degree, 0), max_degree + 1):
        layer = []
        for combo in combinations_with_replacement(range(num_vars), d):
            e = [0] * num_vars
            for i in combo:
                e[i] += 1
            layer.append(tuple(e))
        layer.sort(key=grlex_key)
        out.extend(layer)
    return out


def basis_size(num_vars: int, max_degree: int) -> int:
    return math.comb(num_vars + max_degree, num_vars)


class Polynomial:
    """Immutable sparse polynomial in ``num_vars`` variables.

    Exact zeros are dropped on construction; nothing else is pruned (see
    :func:`truncate` for explicit cleanup of solver noise).
    """

    __slots__ = ("num_vars", "_terms", "_compiled")

    def __init__(self, num_vars: int, terms: Mapping[Monomial, float] | None = None):
        if num_vars < 1:
            raise ValueError("num_vars must be positive")
        self.num_vars = int(num_vars)
        items = []
        for m, c in (terms or {}).items():
            m = tuple(int(e) for e in m)
            if len(m) != self.num_vars:
                raise ValueError(f"monomial {m} does not have {self.num_vars} exponents")
            if any(e < 0 for e in m):
                raise ValueError(f"negative exponent in {m}")
            c = float(c)
            if c != 0.0:
                items.append((m, c))
        items.sort(key=lambda mc: grlex_key(mc[0]))
        self._terms: dict[Monomial, float] = dict(items)
        self._compiled = None

    # -- constructors -------------------------------------------------------
    @classmethod
    def constant(cls, num_vars: int, value: float) -> "Polynomial":
        return cls(num_vars, {(0,) * num_vars: value})

    @classmethod
    def zero(cls, num_vars: int) -> "Polynomial":
        return cls(num_vars)

    @classmethod
    def variable(cls, num_vars: int, i: int) -> "Polynomial":
        if not 0 <= i < num_vars:
            raise IndexError(f"variable index {i} out of range")
        e = [0] * num_vars
        e[i] = 1
        return cls(num_vars, {tuple(e): 1.0})

    @classmethod
    def from_coefficients(cls, basis: Sequence[Monomial], coeffs: Iterable[float]) -> "Polynomial":
        coeffs = list(coeffs)
        if len(basis) != len(coeffs):
            raise ValueError("basis and coefficient lengths differ")
        terms: dict[Monomial, float] = {}
        for m, c in zip(basis, coeffs):
            terms[m] = terms.get(m, 0.0) + float(c)
        return cls(len(basis[0]), terms)

    @classmethod
    def from_gram(cls, basis: Sequence[Monomial], Q) -> "Polynomial":
        """The polynomial ``z^T Q z`` for the monomial vector ``z = basis``."""
        Q = np.asarray(Q, dtype=float)
        k = len(basis)
        if Q.shape != (k, k):
            raise ValueError("Gram matrix does not match basis size")
        terms: dict[Monomial, float] = {}
        for a in range(k):
            for b in range(k):
                m = tuple(x + y for x, y in zip(basis[a], basis[b]))
                terms[m] = terms.get(m, 0.0) + Q[a, b]
        return cls(len(basis[0]), terms)

    # -- accessors ----------------------------------------------------------
    @property
    def terms(self) -> dict[Monomial, float]:
        return dict(self._terms)

    def items(self) -> Iterator[tuple[Monomial, float]]:
        return iter(self._terms.items())

    def coeff(self, m: Monomial) -> float:
        return self._terms.get(tuple(m), 0.0)

    def __len__(self) -> int:
        return len(self._terms)

    def is_zero(self) -> bool:
        return not self._terms

    def degree(self) -> int:
        return max((sum(m) for m in self._terms), default=0)

    def min_degree(self) -> int:
        return min((sum(m) for m in self._terms), default=0)

    def max_abs_coeff(self) -> float:
        return max((abs(c) for c in self._terms.values()), default=0.0)

    def constant_value(self) -> float | None:
        """The value if the polynomial is constant, else ``None``."""
        if all(sum(m) == 0 for m in self._terms):
            return self._terms.get((0,) * self.num_vars, 0.0)
        return None

    # -- arithmetic ---------------------------------------------------------
    def _check(self, other: "Polynomial") -> None:
        if self.num_vars != other.num_vars:
            raise ValueError(
                f"dimension mismatch: {self.num_vars} vs {other.num_vars} variables")

    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            self._check(other)
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial.constant(self.num_vars, float(other))
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.num_vars, {m: -c for m, c in self._terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return add(self, -other)

    def __rsub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return add(other, -self)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            s = float(other)
            return Polynomial(self.num_vars, {m: s * c for m, c in self._terms.items()})
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return mul(self, other)

    __rmul__ = __mul__

    def __pow__(self, k: int):
        if k < 0:
            raise ValueError("negative power")
        out = Polynomial.constant(self.num_vars, 1.0)
        for _ in range(k):
            out = mul(out, self)
        return out

    def __eq__(self, other):
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.num_vars == other.num_vars and self._terms == other._terms

    def __hash__(self):
        return hash((self.num_vars, tuple(self._terms.items())))

    def __repr__(self):
        return f"Polynomial({self.num_vars}, {self._terms!r})"

    def __str__(self):
        return to_string(self)

    # -- evaluation ---------------------------------------------------------
    def _compile(self):
        if self._compiled is None:
            if self._terms:
                E = np.array(list(self._terms.keys()), dtype=np.int64)
                c = np.array(list(self._terms.values()), dtype=float)
            else:
                E = np.zeros((0, self.num_vars), dtype=np.int64)
                c = np.zeros(0)
            self._compiled = (E, c)
        return self._compiled

    def __call__(self, x) -> np.ndarray | float:
        """Vectorized evaluation; ``x`` has shape ``(..., num_vars)``."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.num_vars:
            raise ValueError(f"expected trailing dimension {self.num_vars}, got {x.shape}")
        E, c = self._compile()
        lead = x.shape[:-1]
        pts = x.reshape(-1, self.num_vars)
        if len(c) == 0:
            out = np.zeros(len(pts))
        else:
            dmax = int(E.max()) if E.size else 0
            # powers[k, i, d] = x_i ** d, memoized once per call
            powers = np.ones((len(pts), self.num_vars, dmax + 1))
            for d in range(1, dmax + 1):
                powers[:, :, d] = powers[:, :, d - 1] * pts
            mono = np.ones((len(pts), len(c)))
            for i in range(self.num_vars):
                mono *= powers[:, i, E[:, i]]
            out = mono @ c
        if lead == ():
            return float(out[0])
        return out.reshape(lead)


def add(a: Polynomial, b: Polynomial) -> Polynomial:
    a._check(b)
    terms = dict(a._terms)
    for m, c in b._terms.items():
        terms[m] = terms.get(m, 0.0) + c
    return Polynomial(a.num_vars, terms)


def mul(a: Polynomial, b: Polynomial) -> Polynomial:
    a._check(b)
    terms: dict[Monomial, float] = {}
    for ma, ca in a._terms.items():
        for mb, cb in b._terms.items():
            m = tuple(x + y for x, y in zip(ma, mb))
            terms[m] = terms.get(m, 0.0) + ca * cb
    return Polynomial(a.num_vars, terms)


def partial(p: Polynomial, i: int) -> Polynomial:
    """Formal partial derivative with respect to variable ``i``."""
    if not 0 <= i < p.num_vars:
        raise IndexError(f"variable index {i} out of range for {p.num_vars} variables")
    terms: dict[Monomial, float] = {}
    for m, c in p._terms.items():
        if m[i] == 0:
            continue
        e = list(m)
        e[i] -= 1
        e = tuple(e)
        terms[e] = terms.get(e, 0.0) + c * m[i]
    return Polynomial(p.num_vars, terms)


def antiderivative(p: Polynomial, i: int) -> Polynomial:
    """Formal antiderivative in variable ``i`` with zero integration constant."""
    if not 0 <= i < p.num_vars:
        raise IndexError(f"variable index {i} out of range for {p.num_vars} variables")
    terms = {}
    for m, c in p._terms.items():
        e = list(m)
        e[i] += 1
        terms[tuple(e)] = c / e[i]
    return Polynomial(p.num_vars, terms)


def gradient(p: Polynomial) -> "PolyVector":
    return PolyVector([partial(p, i) for i in range(p.num_vars)])


def evaluate(p: Polynomial, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or len(x) != p.num_vars:
        raise ValueError(f"point must have length {p.num_vars}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite evaluation point")
    return p(x)


def truncate(p: Polynomial, tol: float = 1e-12) -> Polynomial:
    """Drop coefficients with magnitude below ``tol``."""
    return Polynomial(p.num_vars, {m: c for m, c in p._terms.items() if abs(c) >= tol})


def max_coeff_diff(a: Polynomial, b: Polynomial) -> float:
    a._check(b)
    keys = set(a._terms) | set(b._terms)
    return max((abs(a.coeff(m) - b.coeff(m)) for m in keys), default=0.0)


class PolyVector:
    """A nonempty tuple of polynomials over a common set of variables."""

    __slots__ = ("entries",)

    def __init__(self, entries: Sequence[Polynomial]):
        entries = tuple(entries)
        if not entries:
            raise ValueError("PolyVector must be nonempty")
        n = entries[0].num_vars
        if any(e.num_vars != n for e in entries):
            raise ValueError("PolyVector entries disagree on num_vars")
        self.entries = entries

    @property
    def num_vars(self) -> int:
        return self.entries[0].num_vars

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def __eq__(self, other):
        return isinstance(other, PolyVector) and self.entries == other.entries

    def __hash__(self):
        return hash(self.entries)

    def __repr__(self):
        return f"PolyVector({list(self.entries)!r})"

    def degree(self) -> int:
        return max(e.degree() for e in self.entries)

    def __call__(self, x) -> np.ndarray:
        """Evaluate all entries; returns shape ``(..., len(self))``."""
        return np.stack([np.asarray(e(x)) for e in self.entries], axis=-1)

    def jacobian(self) -> list[list[Polynomial]]:
        return [[partial(e, j) for j in range(self.num_vars)] for e in self.entries]


def dot(a: PolyVector, b: PolyVector) -> Polynomial:
    if len(a) != len(b):
        raise ValueError("length mismatch in dot product")
    out = Polynomial.zero(a.num_vars)
    for p, q in zip(a, b):
        out = add(out, mul(p, q))
    return out


def divergence(f: PolyVector) -> Polynomial:
    """Sum of ``d f_i / d x_i``; requires a square field."""
    if len(f) != f.num_vars:
        raise ValueError(f"divergence needs a square field, got {len(f)} entries "
                         f"in {f.num_vars} variables")
    out = Polynomial.zero(f.num_vars)
    for i, fi in enumerate(f):
        out = add(out, partial(fi, i))
    return out


def lie_derivative(v: Polynomial, f: PolyVector) -> Polynomial:
    """``grad(v) . f``."""
    if v.num_vars != f.num_vars or len(f) != v.num_vars:
        raise ValueError("dimension mismatch between function and vector field")
    return dot(gradient(v), f)


def density_divergence(rho: Polynomial, f: PolyVector) -> Polynomial:
    """``div(rho * f) = grad(rho) . f + rho * div(f)``, computed term-wise."""
    if rho.num_vars != f.num_vars or len(f) != rho.num_vars:
        raise ValueError("dimension mismatch between density and vector field")
    out = Polynomial.zero(rho.num_vars)
    for i, fi in enumerate(f):
        out = add(out, partial(mul(rho, fi), i))
    return out


# -- text and JSON ----------------------------------------------------------

def _var_names(n: int) -> list[str]:
    if n <= 3:
        return ["x", "y", "z"][:n]
    return [f"x{i + 1}" for i in range(n)]


def to_string(p: Polynomial, names: Sequence[str] | None = None) -> str:
    names = list(names) if names else _var_names(p.num_vars)
    if p.is_zero():
        return "0"
    parts = []
    for m, c in sorted(p.items(), key=lambda mc: grlex_key(mc[0]), reverse=True):
        mono = "*".join(
            (names[i] if e == 1 else f"{names[i]}^{e}") for i, e in enumerate(m) if e)
        if not mono:
            parts.append(f"{c:+.6g}")
        elif c == 1:
            parts.append(f"+{mono}")
        elif c == -1:
            parts.append(f"-{mono}")
        else:
            parts.append(f"{c:+.6g}*{mono}")
    s = " ".join(parts)
    return s[1:] if s.startswith("+") else s


def to_json(p: Polynomial) -> dict:
    return {"vars": p.num_vars,
            "terms": [{"e": list(m), "c": c} for m, c in p.items()]}


def from_json(obj: Mapping) -> Polynomial:
    try:
        n = int(obj["vars"])
        terms: dict[Monomial, float] = {}
        for t in obj["terms"]:
            m = tuple(int(e) for e in t["e"])
            terms[m] = terms.get(m, 0.0) + float(t["c"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed polynomial JSON: {exc}") from exc
    return Polynomial(n, terms)


def parse(text: str, num_vars: int, names: Sequence[str] | None = None) -> Polynomial:
    """Parse a polynomial from an arithmetic expression such as ``"x^2 + 2*x*y"``.

    Only ``+ - * ^ **``, parentheses, numbers and the variable names are
    accepted. Used for hand-written fixtures and demos.
    """
    import ast

    names = list(names) if names else _var_names(num_vars)
    env = {name: Polynomial.variable(num_vars, i) for i, name in enumerate(names)}
    tree = ast.parse(text.replace("^", "**"), mode="eval")

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return Polynomial.constant(num_vars, node.value)
        if isinstance(node, ast.Name):
            if node.id not in env:
                raise ValueError(f"unknown variable {node.id!r}")
            return env[node.id]
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = ev(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.BinOp):
            left = ev(node.left)
            if isinstance(node.op, ast.Pow):
                k = node.right
                if not (isinstance(k, ast.Constant) and isinstance(k.value, int)):
                    raise ValueError("exponents must be integer literals")
                return left ** k.value
            right = ev(node.right)
            if isinstance(node.op, ast.Add):
                return left + right
            if isinstance(node.op, ast.Sub):
                return left - right
            if isinstance(node.op, ast.Mult):
                return left * right
            if isinstance(node.op, ast.Div):
                c = right.constant_value()
                if c is None or c == 0:
                    raise ValueError("division only by nonzero constants")
                return left * (1.0 / c)
        raise ValueError(f"unsupported syntax in polynomial: {ast.dump(node)}")

    return ev(tree)
