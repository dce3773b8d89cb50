"""Certify the strong reach-avoid property of the planar benchmark.

Runs the weak exponential condition with lambda = -0.499 over the default
degree ladder, checks the certificate independently, classifies it, and
confirms the property by simulation. Takes a few minutes on one core.

    python3 demos/verify_example1.py [outdir]
"""

import sys
from pathlib import Path

import numpy as np

from densityreach import conditions as C, dynamics as D
from densityreach.problem import example1


def main(out="demo-example1"):
    out = Path(out)
    out.mkdir(exist_ok=True)
    prob = example1()

    bound = C.estimate_lambda0(prob)
    print(f"sampled max div f over closure(X \\ Xr): {bound.lambda0:.6f} at {np.round(bound.argmax, 3)}")

    kind = C.ConditionKind.make("weak-exp", -0.499, 2)
    res = C.degree_search(prob, kind, callback=lambda a: print("  ", a.row()))
    cert = res.certificate
    print(f"certificate at d_rho={cert.d_rho}, d_s={cert.d_s}; check {res.check.verdict}")
    print(f"classified {cert.classification}: {cert.evidence.get('rule')}")
    cert.save(out / "certificate.json")

    curves = D.level_set_2d(cert.polys["rho"], prob.box, 400)
    D.write_levelset_csv(out / "levelset.csv", curves)
    print(f"rho = 0: {len(curves)} curve(s) written to {out / 'levelset.csv'}")

    rep = D.validate_reach_avoid(prob, samples=1000, seed=0)
    print(f"simulation: {rep.reached}/{rep.samples} initial states reach the target")


if __name__ == "__main__":
    main(*sys.argv[1:])
