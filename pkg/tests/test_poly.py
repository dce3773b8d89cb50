import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from densityreach.poly import (Polynomial, PolyVector, add, antiderivative, basis_size, density_divergence,
                               divergence, dot, evaluate, from_json, gradient, monomial_basis, mul,
                               parse, partial, to_json, truncate)

P2 = lambda s: parse(s, 2)


# -- hand examples -------------------------------------------------------------

def test_add_examples():
    assert add(P2("x + y"), P2("x - y")) == P2("2*x")
    p = P2("3*x*y - 1")
    assert add(p, Polynomial.zero(2)) == p
    assert add(P2("x^2 + 1"), P2("2*x^2 + 3*x")) == P2("3*x^2 + 3*x + 1")


def test_mul_examples():
    assert mul(P2("x + y"), P2("x - y")) == P2("x^2 - y^2")
    p = P2("x^3 - 2*y")
    assert mul(p, Polynomial.constant(2, 1.0)) == p
    assert mul(P2("x + 1"), P2("x + 1")) == P2("x^2 + 2*x + 1")


def test_partial_examples():
    assert partial(P2("x^2*y"), 0) == P2("2*x*y")
    assert partial(P2("x^2"), 1).is_zero()
    assert partial(P2("x^3 + 2*x"), 0) == P2("3*x^2 + 2")
    with pytest.raises(IndexError):
        partial(P2("x"), 2)


def test_divergence_examples():
    assert divergence(PolyVector([P2("x"), P2("y")])) == Polynomial.constant(2, 2.0)
    f = PolyVector([P2("-0.5*x - 0.5*y + 0.5*x*y"), P2("-0.5*y + 0.5")])
    assert divergence(f) == P2("0.5*y - 1")
    assert divergence(PolyVector([P2("y"), P2("-x")])).is_zero()
    with pytest.raises(ValueError):
        divergence(PolyVector([P2("x")]))


def test_density_divergence_examples():
    f = PolyVector([P2("x"), P2("y")])
    assert density_divergence(P2("x"), f) == P2("3*x")
    g = PolyVector([P2("x^2*y - 1"), P2("y^3 + x")])
    assert density_divergence(Polynomial.constant(2, 1.0), g) == divergence(g)
    zero = PolyVector([Polynomial.zero(2)] * 2)
    assert density_divergence(P2("x^4 + y"), zero).is_zero()


def test_evaluate_examples():
    h = P2("x^2 + y^2 - 1")
    assert evaluate(h, [1.0, 0.0]) == 0.0
    assert evaluate(P2("x + y"), [2.0, 3.0]) == 5.0
    assert evaluate(h, [0.3, -0.6]) == pytest.approx(-0.55, abs=1e-15)
    with pytest.raises(ValueError):
        evaluate(h, [1.0])
    with pytest.raises(ValueError):
        evaluate(h, [np.nan, 0.0])


def test_monomial_basis_examples():
    assert monomial_basis(2, 1) == [(0, 0), (1, 0), (0, 1)]
    assert len(monomial_basis(2, 3)) == 10
    assert monomial_basis(1, 4) == [(0,), (1,), (2,), (3,), (4,)]


def test_zero_polynomial_degree_and_pruning():
    z = add(P2("x"), P2("-x"))
    assert z.is_zero() and z.degree() == 0
    assert Polynomial(2, {(1, 0): 0.0}).terms == {}


def test_truncate_is_explicit():
    p = Polynomial(2, {(1, 0): 1.0, (0, 1): 1e-14})
    assert len((p + 0).terms) == 2
    assert truncate(p) == P2("x")


def test_json_roundtrip_and_order():
    p = P2("3*x^2*y - 0.25*y + 7")
    obj = to_json(p)
    assert from_json(obj) == p
    degs = [sum(t["e"]) for t in obj["terms"]]
    assert degs == sorted(degs)


# -- property suite (100 randomized cases each, exact coefficient equality) ---------

def _poly_strategy(n, max_deg=4, max_terms=6):
    mono = st.tuples(*[st.integers(0, max_deg)] * n).filter(lambda m: sum(m) <= max_deg)
    # small integer coefficients keep every product and sum exact in double precision
    coef = st.integers(-9, 9).map(float)
    return st.dictionaries(mono, coef, max_size=max_terms).map(lambda d: Polynomial(n, d))


nvars = st.sampled_from([2, 3])


@st.composite
def poly_triple(draw):
    n = draw(nvars)
    s = _poly_strategy(n)
    return draw(s), draw(s), draw(s)


@st.composite
def density_and_field(draw):
    n = draw(nvars)
    s = _poly_strategy(n)
    return draw(s), PolyVector([draw(s) for _ in range(n)])


@settings(max_examples=100, deadline=None)
@given(poly_triple())
def test_ring_axioms(abc):
    a, b, c = abc
    assert add(a, b) == add(b, a)
    assert mul(a, b) == mul(b, a)
    assert add(add(a, b), c) == add(a, add(b, c))
    assert mul(mul(a, b), c) == mul(a, mul(b, c))
    assert mul(a, add(b, c)) == add(mul(a, b), mul(a, c))
    assert add(a, Polynomial.zero(a.num_vars)) == a
    assert mul(a, Polynomial.constant(a.num_vars, 1.0)) == a


@settings(max_examples=100, deadline=None)
@given(density_and_field())
def test_product_rule(rf):
    rho, f = rf
    assert density_divergence(rho, f) == add(dot(gradient(rho), f), mul(rho, divergence(f)))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10))
def test_basis_counts(n, d):
    basis = monomial_basis(n, d)
    assert len(basis) == math.comb(n + d, n) == basis_size(n, d)
    assert len(set(basis)) == len(basis)


@settings(max_examples=100, deadline=None)
@given(poly_triple(), st.integers(0, 2))
def test_partial_then_antiderivative(abc, i):
    p = abc[0]
    i = i % p.num_vars
    # terms without x_i are exactly what differentiation forgets
    free_part = Polynomial(p.num_vars, {m: c for m, c in p.terms.items() if m[i] == 0})
    assert antiderivative(partial(p, i), i) == p - free_part


@settings(max_examples=100, deadline=None)
@given(poly_triple(), st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3))
def test_evaluate_is_homomorphism(abc, x):
    a, b, _ = abc
    # coefficients up to 10^3
    a, b = a * 100.0, b * 100.0
    pt = np.array(x[: a.num_vars])
    lhs = evaluate(mul(a, b), pt)
    rhs = evaluate(a, pt) * evaluate(b, pt)
    scale = max(1.0, abs(lhs), abs(rhs))
    assert abs(lhs - rhs) <= 1e-10 * scale
    assert evaluate(add(a, b), pt) == pytest.approx(evaluate(a, pt) + evaluate(b, pt), rel=1e-10,
                                                    abs=1e-10)


def test_vectorized_evaluation_matches_pointwise():
    p = P2("x^3*y - 2*x*y^2 + 0.5")
    pts = np.random.default_rng(1).uniform(-1, 1, (50, 2))
    assert np.allclose(p(pts), [evaluate(p, x) for x in pts], rtol=0, atol=1e-14)


def test_dimension_mismatch_errors():
    a = P2("x")
    b = parse("x", 3)
    with pytest.raises(ValueError):
        add(a, b)
    with pytest.raises(ValueError):
        mul(a, b)
