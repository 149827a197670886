"""
Transfer operator of an inelastic Maxwell collision
===================================================

For the three-dimensional collision model the operator commutes with
rotations, so its eigenfunction is constant and its eigenmeasure uniform.
The eigenvalue has the closed form ``E[(U|Y_1|)^s + |e_1 - U Y_1 Y|^s] / 2``.
"""

import numpy as np

from smoothtails import spectral
from smoothtails.models import ModelSpec, SamplePool

spec = ModelSpec.maxwell(d=3)
grid = spectral.SphereGrid(3, 400)
table = spectral.TransferTable(grid, SamplePool.generate(spec, 0, 20_000))

# %%
# One table of (target node, log length) serves every exponent.
print("  s   2 kappa_hat   closed form   spread of e")
for s in (1.0, 2.0, 3.0):
    sol = spectral.power_iterate(table.operator(s))
    exact, se = spectral.maxwell_closed_form(spec, s, 500_000, 1)
    print(f"{s:4.1f}  {2 * sol.kappa:10.4f}  {exact:8.4f} +- {se:.4f}  {np.ptp(sol.e) / sol.e.mean():.2%}")

# %%
# m(2) = 1 for any law of U with E[U(1 - U)] = 0: energy is conserved on
# average, which puts the lower exponent at 2.
