"""Synthesize u = psi / rho for a double integrator and test the closed loop."""

import sys
from pathlib import Path

from densityreach import conditions as C, dynamics as D
from densityreach.poly import to_string
from densityreach.problem import BUILTIN


def main(out="demo-synthesis"):
    out = Path(out)
    out.mkdir(exist_ok=True)
    prob = BUILTIN["double_integrator"]()
    kind = C.ConditionKind.make("synthesis", 0.001, 2)
    res = C.degree_search(prob, kind, candidates=[(6, 6)])
    cert = res.certificate
    ctrl = C.recover_controller(cert, box=prob.box)
    print("psi =", to_string(ctrl.psi[0], ["x", "y"])[:80], "...")
    print("check:", res.check.verdict)

    rep = D.validate_reach_avoid(prob, ctrl, samples=500, seed=0)
    print(f"closed loop reaches the target from {rep.reach_fraction:.1%} of 500 sampled initial states")

    run = D.simulate(prob, [0.0, 0.1], ctrl)
    D.write_trajectory_csv(out / "trajectory.csv", run)
    print(f"trajectory from (0, 0.1): {run.outcome} at t = {run.t_event:.3f}")


if __name__ == "__main__":
    main(*sys.argv[1:])
