"""
Tails of the fixed point
========================

Population dynamics for the lognormal similarity model, then the tail
index and the two expressions for the radial tail constant.
"""

import numpy as np

from smoothtails import spectral, tails, wbp
from smoothtails.models import SamplePool, lognormal_reference

spec = lognormal_reference(beta=3.0, alpha=1.0)

# %%
# 200k particles, 30 sweeps: enough for the index, noisy for constants.
pop, diag = wbp.run_population(spec, 200_000, 30, seed=5)
R = pop.samples
radius = np.linalg.norm(R, axis=1)
print("mean drift after 30 sweeps:", diag[-1]["drift"], "+-", diag[-1]["drift_se"])

est, se = tails.hill_estimate(radius)
print(f"Hill index: {est:.3f} +- {se:.3f}")

t, v, vse, level, level_se = tails.plateau(radius, 3.0)
print(f"t^3 P(|R| > t) over the top decade: {level:.2f} +- {level_se:.2f}")

# %%
# The renewal constant needs the eigen-elements at beta and the drift l_beta.
pool = SamplePool.generate(spec, 6, 200_000)
table = spectral.TransferTable(spectral.SphereGrid(2, 64), SamplePool.generate(spec, 7, 50_000))
sol = spectral.power_iterate(table.operator(3.0))
l3 = spectral.compute_l_beta(spec, 3.0, sol, table.pool, table)
K = tails.constant_K(spec, 3.0, sol, l3, R, pool, ["radial"])[0]
S = tails.sigma_S(spec, 3.0, spectral.compute_m_beta_similarity(spec, 3.0, pool), R, pool)
print(f"3 K_radial = {3 * K.value:.2f} +- {3 * K.se:.2f}")
print(f"sigma(S)   = {S.value:.2f} +- {S.se:.2f}")

# %%
# Moments of order beta and beyond diverge; the probe sees it in how block
# means keep growing as blocks get larger.
for p in tails.moment_divergence_probe(radius, [2.0, 4.0]):
    print(f"s = {p.s:g}: {p.verdict} (increment ratio {p.ratio:.2f})")
