import numpy as np
import pytest

from densityreach import conditions as C, sos
from densityreach.poly import (Polynomial, PolyVector, density_divergence, divergence, lie_derivative,
                               parse)
from densityreach.problem import BUILTIN, ProblemSpec, example1

P2 = lambda s: parse(s, 2)
P1 = lambda s: parse(s, 1, ["x"])


def _planar(f, name="planar"):
    base = example1()
    return ProblemSpec(name, 2, PolyVector([P2(s) for s in f]), base.h, base.l, base.g_target, base.box)


def _bad_toy():
    # target outside the safe set: no reach-avoid certificate can exist
    return ProblemSpec("bad", 1, PolyVector([P1("-x")]), P1("x^2 - 1"), P1("(x - 0.5)^2 - 0.0025"),
                       P1("(x - 3)^2 - 0.01"), np.array([[-1.1, 1.1]]))


# -- encoder structure ---------------------------------------------------------------

def test_weak_exp_structure_example1():
    enc = C.encode(example1(), C.ConditionKind.make("weak-exp", -0.499, 2), 6, 6)
    prog = enc.program
    free = [v for v in prog.vars if v.kind == "free"]
    sosv = [v for v in prog.vars if v.kind == "sos"]
    assert [(v.id, v.size) for v in free] == [("rho", 28), ("p", 28)]
    assert len(sosv) == 3
    assert len(prog.constraints) == 3


def test_prajna_has_no_lambda():
    kind = C.ConditionKind.make("prajna", 5.0, 2)
    assert kind.lam is None
    enc = C.encode(example1(), kind, 4, 4)
    assert enc.constraint_names == ("flow", "init", "boundary")


def test_strong_asym_structure():
    enc = C.encode(example1(), C.ConditionKind.make("strong-asym", None, 2), 4, 4)
    assert len(enc.program.constraints) == 4
    assert {v.id for v in enc.program.vars if v.kind == "free"} == {"v", "w", "p"}


def test_encoder_errors():
    with pytest.raises(C.ConditionError, match="control"):
        C.encode(example1(), C.ConditionKind.make("synthesis", 0.1, 2), 4, 4)
    with pytest.raises(C.ConditionError, match="positive constant"):
        C.ConditionKind.make("strong-exp", -1.0, 2)
    with pytest.raises(C.ConditionError, match="positive constant"):
        C.ConditionKind.make("strong-exp", P2("x + 1"))
    with pytest.raises(C.ConditionError, match="even"):
        C.encode(example1(), C.ConditionKind.make("prajna", None, 2), 4, 3)


def test_polynomial_lambda_accepted():
    kind = C.ConditionKind.make("weak-exp", P2("0.1 + x^2"))
    enc = C.encode(example1(), kind, 4, 4)
    assert enc.program.constraints[0].slack_degree >= 6


# -- encoder identities (coefficient-exact on a degree-2 instance) ----------------------

def test_strong_exp_is_weak_exp_with_shifted_lambda():
    prob = example1()
    lam_c = 0.25
    weak = C.encode(prob, C.ConditionKind(C.Condition.WEAK_EXP, divergence(prob.f) + lam_c), 2, 2)
    strong = C.encode(prob, C.ConditionKind.make("strong-exp", lam_c, 2), 2, 2)
    a = weak.program.constraints[0].expr.rename({"rho": "v"})
    b = strong.program.constraints[0].expr
    assert a == b
    assert a.max_abs_diff(b) == 0.0


def test_weak_asym_without_second_constraint_is_weak_exp():
    prob = example1()
    asym = C.encode(prob, C.ConditionKind.make("weak-asym", 0.3, 2), 2, 2)
    exp = C.encode(prob, C.ConditionKind.make("weak-exp", 0.3, 2), 2, 2)
    kept = [c for c in asym.program.constraints if c.name != "flow2"]
    mapping = {"rho1": "rho", "s4": "s2"}
    assert [c.name for c in kept] == list(exp.constraint_names)
    for c_asym, c_exp in zip(kept, exp.program.constraints):
        assert c_asym.expr.rename(mapping) == c_exp.expr


def _random_assignment(prog, rng):
    vals, polys = {}, {}
    for v in prog.vars:
        if v.kind == "free":
            c = rng.integers(-4, 5, size=v.size).astype(float)
            vals.update({(v.id, j): float(cj) for j, cj in enumerate(c)})
            polys[v.id] = Polynomial.from_coefficients(v.basis, c)
        else:
            M = rng.integers(-2, 3, size=(v.size, v.size)).astype(float)
            Q = M @ M.T
            for a in range(v.size):
                for b in range(a, v.size):
                    vals[(v.id, (a, b))] = float(Q[a, b])
            polys[v.id] = Polynomial.from_gram(v.basis, Q)
    return vals, polys


@pytest.mark.parametrize("tag", ["weak-exp", "weak-asym", "prajna", "strong-exp", "strong-asym",
                                 "synthesis"])
def test_encoder_matches_hand_written_constraints(tag):
    prob = BUILTIN["double_integrator"]() if tag == "synthesis" else example1()
    kind = C.ConditionKind.make(tag, 0.5, 2)
    enc = C.encode(prob, kind, 2, 2, eps0=1e-6)
    vals, q = _random_assignment(enc.program, np.random.default_rng(len(tag)))
    f, h, l, g, e0 = prob.f, prob.h, prob.l, prob.g_target, 1e-6
    lam = kind.lam
    if tag in ("weak-exp", "prajna", "synthesis"):
        flow = density_divergence(q["rho"], f)
        if tag == "synthesis":
            flow = flow + density_divergence(q["psi1"], prob.control.column(0))
        flow = flow - e0 if tag == "prajna" else flow - lam * q["rho"]
        expected = [flow + q["s0"] * h - q["s1"] * g, q["rho"] - e0 + q["s2"] * l,
                    -q["rho"] + q["p"] * h]
    elif tag == "weak-asym":
        expected = [density_divergence(q["rho1"], f) - lam * q["rho1"] + q["s0"] * h - q["s1"] * g,
                    density_divergence(q["rho2"], f) - q["rho1"] + q["s2"] * h - q["s3"] * g,
                    q["rho1"] - e0 + q["s4"] * l, -q["rho1"] + q["p"] * h]
    elif tag == "strong-asym":
        expected = [lie_derivative(q["v"], f) + q["s0"] * h - q["s1"] * g,
                    lie_derivative(q["w"], f) - q["v"] + q["s2"] * h - q["s3"] * g,
                    q["v"] - e0 + q["s4"] * l, -q["v"] + q["p"] * h]
    else:
        expected = [lie_derivative(q["v"], f) - lam * q["v"] + q["s0"] * h - q["s1"] * g,
                    q["v"] - e0 + q["s2"] * l, -q["v"] + q["p"] * h]
    assert len(expected) == len(enc.program.constraints)
    for c, want in zip(enc.program.constraints, expected):
        got = c.expr.substitute(vals)
        keys = set(got.terms) | set(want.terms)
        assert max(abs(got.coeff(m) - want.coeff(m)) for m in keys) <= 1e-12


def test_synthesis_encoder_is_linear():
    enc = C.encode(BUILTIN["double_integrator"](), C.ConditionKind.make("synthesis", 0.001, 2), 4, 4)
    for c in enc.program.constraints:
        for d in c.expr.terms.values():
            for k in d:
                # every key names exactly one scalar unknown, never a product
                assert k is None or (isinstance(k, tuple) and isinstance(k[0], str))


# -- certificates and degree search -----------------------------------------------------------

def test_candidate_loop_order():
    cands = C.default_candidates()
    assert cands[:5] == [(6, 6), (6, 8), (6, 10), (6, 12), (7, 8)]
    assert cands[-1] == (12, 24)
    assert len(cands) == 37


def test_degree_search_returns_checked_certificate_and_roundtrips(tmp_path):
    seen = []
    res = C.degree_search(BUILTIN["decay"](), C.ConditionKind.make("weak-exp", 0.001, 1),
                          candidates=[(2, 2), (4, 4), (6, 6)], callback=seen.append)
    assert res.check.passed
    assert [(a.d_rho, a.d_s) for a in seen] == [(a.d_rho, a.d_s) for a in res.attempts]
    assert res.attempts[-1].status == "feasible" and res.attempts[-1].check == "pass"
    cert = res.certificate
    path = tmp_path / "cert.json"
    cert.save(path)
    back = C.Certificate.load(path)
    assert back.to_json() == cert.to_json()
    for k, (basis, Q) in cert.grams.items():
        assert np.array_equal(back.grams[k][1], (Q + Q.T) / 2) or np.array_equal(back.grams[k][1], Q)


def test_parallel_search_commits_in_loop_order():
    kind = C.ConditionKind.make("prajna", None, 1)
    cands = [(2, 2), (4, 4), (6, 6), (6, 8)]
    serial = C.degree_search(BUILTIN["decay"](), kind, candidates=cands)
    parallel = C.degree_search(BUILTIN["decay"](), kind, candidates=cands, jobs=2)
    assert [a.status for a in serial.attempts] == [a.status for a in parallel.attempts]
    assert serial.certificate.to_json()["polynomials"] == parallel.certificate.to_json()["polynomials"]


def test_infeasible_toy_exhausts():
    with pytest.raises(C.SearchExhausted) as err:
        C.degree_search(_bad_toy(), C.ConditionKind.make("weak-exp", 0.001, 1),
                        candidates=[(2, 2), (4, 4), (6, 6)])
    assert len(err.value.attempts) == 3
    assert all(a.check is None for a in err.value.attempts)
    assert "d_rho=6" in str(err.value)


def test_over_cap_candidates_are_skipped():
    with pytest.raises(C.SearchExhausted) as err:
        C.degree_search(example1(), C.ConditionKind.make("weak-exp", 0.001, 2), candidates=[(12, 24)])
    assert err.value.attempts[0].status == "skipped"


# -- lambda0 and classification ----------------------------------------------------------------

def test_lambda0_example1():
    b = C.estimate_lambda0(example1())
    assert -1.0 <= b.lambda0 <= -0.5 + 1e-3
    assert b.lambda0 == pytest.approx(-0.5, abs=1e-4)
    assert b.domain == "safe_minus_target"


def test_lambda0_constant_divergence():
    assert C.estimate_lambda0(_planar(["x", "y"])).lambda0 == 2.0
    assert C.estimate_lambda0(_planar(["y", "-x"])).lambda0 == 0.0


def test_lambda0_resolution_guard():
    with pytest.raises(ValueError):
        C.estimate_lambda0(example1(), resolution=20)


def _cert(tag, lam, polys=None, n=2):
    kind = C.ConditionKind.make(tag, lam, n)
    return C.Certificate(kind, 2, 2, C.EPS0, polys or {}, {}, ())


def test_classify_weak_exp():
    assert C.classify(_cert("weak-exp", -0.499), example1())[0] == C.STRONG
    assert C.classify(_cert("weak-exp", 0.001), example1())[0] == C.STRONG
    label, ev = C.classify(_cert("weak-exp", 0.5), _planar(["x", "y"]))
    assert label == C.WEAK and ev["basis"] == "sampled evidence"
    assert C.classify(_cert("weak-exp", -3.0), _planar(["x", "y"]))[0] == C.UNCLASSIFIED


def test_classify_weak_asym():
    rho2 = P2("1 + 0*x")
    assert C.classify(_cert("weak-asym", 0.0, {"rho2": rho2}), example1())[0] == C.STRONG
    assert C.classify(_cert("weak-asym", 0.0, {"rho2": rho2}), _planar(["x", "y"]))[0] == C.WEAK


def test_classify_synthesis_cases():
    prob = BUILTIN["double_integrator"]()
    cert = _cert("synthesis", 0.5, {"rho": P2("1 + 0*x"), "psi1": P2("-x")})
    bound = lambda v: C.DivergenceBound(v, [0, 0], "grid+refine", 100, "R_minus_target", 1)
    assert C.classify(cert, prob, bound(0.2))[0] == C.STRONG
    assert C.classify(cert, prob, bound(1.0))[0] == C.WEAK
    assert C.classify(cert, prob, bound(0.5))[0] == C.WEAK
    # inside the margin band neither rule applies
    assert C.classify(cert, prob, bound(0.5 - 1e-7))[0] == C.UNCLASSIFIED
    neg = _cert("synthesis", -0.5, {"rho": P2("1 + 0*x"), "psi1": P2("-x")})
    assert C.classify(neg, prob, bound(0.2))[0] == C.UNCLASSIFIED


def test_recover_controller():
    from densityreach.controller import DomainFault, eval_u

    rho0 = 3.0
    cert = _cert("synthesis", 0.1, {"rho": P2(f"{rho0} + 0*x"), "psi1": P2(f"-{rho0}*x")})
    ctrl = C.recover_controller(cert)
    assert eval_u(ctrl, [0.4, -0.2])[0] == pytest.approx(-0.4, abs=1e-15)
    low = _cert("synthesis", 0.1, {"rho": P2(f"{C.RHO_FLOOR / 2} + 0*x"), "psi1": P2("x")})
    with pytest.raises(DomainFault):
        eval_u(C.recover_controller(low), [0.1, 0.1])
    with pytest.raises(C.ConditionError):
        C.recover_controller(_cert("weak-exp", 0.1))
