"""Monte Carlo check of the transport identity behind the density conditions.

For rho and x' = f(x) the mass of rho carried from Z to phi_t(Z) changes by
the time integral of div(rho f) over the moving set. Two closed-form fields
and Example 1's drift with a trial density are checked.
"""

from densityreach.dynamics import liouville_check
from densityreach.poly import PolyVector, parse
from densityreach.problem import example1

P = lambda s: parse(s, 2)

cases = [
    ("rotation", PolyVector([P("y"), P("-x")]), P("1 + 0*x"), [[-1, 1], [-1, 1]]),
    ("radial", PolyVector([P("x"), P("y")]), P("1 + 0*x"), [[0, 1], [0, 1]]),
    ("example1", example1().f, P("1 - x^2 - y^2"), [[-0.5, 0.5], [-0.5, 0.5]]),
]

for name, f, rho, box in cases:
    for mode in ("abel", "variational"):
        r = liouville_check(f, rho, box, 1.0, mc_samples=20_000, jacobian=mode)
        print(f"{name:9s} {mode:12s} lhs {r.lhs:+.6e}  rhs {r.rhs:+.6e}  rel error {r.rel_error:.1e}")
