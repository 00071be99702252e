"""One Nash spiral and one corrugation round on the flat 3-torus.

Both add a prescribed rank-one metric increment. On a flat base with
constant amplitudes the spiral is exact to rounding, and the corrugation is
exact up to the tabulated profile.

Run with ``python3 demos/spiral_and_corrugation.py``.
"""
import numpy as np

from cforge.fieldlab import GridDomain, ImmersionField, pullback_metric
from cforge.stage import corrugation_round, spiral_step
from cforge.symcore import build_basis

basis = build_basis(3)
dom = GridDomain(3, 2 * np.pi, 32)
u = ImmersionField.inclusion(dom)
delta = 0.1

res = spiral_step(u, 0.5, 1, 2.0, delta, basis=basis)
want = delta * 0.25 * np.outer(basis.xi[0], basis.xi[0])
print("spiral increment error:", np.abs(res.increment - want).max())

u2, _ = corrugation_round(u, {4: 0.3, 5: 0.3, 6: 0.3}, 2 * np.sqrt(2), delta, basis=basis)
inc = pullback_metric(u2).values - pullback_metric(u).values
want = delta * 0.09 * sum(np.outer(basis.xi[k], basis.xi[k]) for k in (3, 4, 5))
print("corrugation increment error:", np.abs(inc - want).max())
print("C0 change:", np.abs(u2.values - u.values).max())
