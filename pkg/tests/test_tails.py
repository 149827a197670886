import warnings

import numpy as np
import pytest

from smoothtails import spectral as sp
from smoothtails import tails, wbp
from smoothtails.errors import ConfigError, EstimationError, UsageError
from smoothtails.models import ModelSpec, SamplePool, lognormal_reference


def pareto(alpha, n, seed):
    return np.random.default_rng(seed).pareto(alpha, n) + 1.0


# ---- tail index


def test_hill_pareto():
    est, se = tails.hill_estimate(pareto(3, 1_000_000, 0), 10_000)
    assert abs(est - 3) <= 3 * se


def test_rank_regression_pareto():
    est, se = tails.rank_regression(pareto(3, 1_000_000, 1), 10_000)
    assert abs(est - 3) <= 3 * se


def test_hill_degenerate_inputs():
    with pytest.raises(EstimationError):
        tails.hill_estimate(np.full(1000, 2.0), 100)
    with pytest.raises(EstimationError):
        tails.hill_estimate(pareto(3, 1000, 0), 5)
    with pytest.raises(ConfigError):
        tails.hill_estimate(np.array([1.0, -1.0] * 100), 20)
    assert tails.default_k(10 ** 6) == 10 ** 4 and tails.default_k(500) == 100


def test_survival_curve_is_right_continuous_step():
    x = np.array([1.0, 2.0, 2.0, 5.0])
    p, _ = tails.survival_curve(x, [0.5, 1.0, 1.5, 2.0, 4.999, 5.0, 6.0])
    assert np.allclose(p, [1, 0.75, 0.75, 0.25, 0.25, 0, 0])


def test_tail_report(lognormal):
    R = np.column_stack([pareto(3, 100_000, 2), -pareto(3, 100_000, 3)])
    rep = tails.tail_report(R, [1.0, 0.0], beta=3.0)
    assert rep.hill[0] > 0 and np.all(np.diff(rep.survival[:, 1]) <= 0)
    assert rep.plateau is not None and rep.plateau_level[0] == pytest.approx(1.0, rel=0.2)
    assert tails.tail_report(R, "radial").plateau is None


def test_median_of_means():
    v = np.random.default_rng(0).standard_normal(32_000) + 5
    est, se = tails.median_of_means(v)
    assert abs(est - 5) <= 4 * se and se == pytest.approx(np.sqrt(np.pi / 2) / np.sqrt(32_000), rel=0.3)
    with pytest.raises(EstimationError):
        tails.median_of_means(np.r_[np.inf, np.ones(100)])


# ---- divergence probe


def test_divergence_probe_pareto():
    x = pareto(3, 1_000_000, 4)
    p2, p4 = tails.moment_divergence_probe(x, [2.0, 4.0])
    assert p2.verdict == "convergent" and p4.verdict == "divergence-consistent"
    assert p4.label == "heuristic"


def test_positivity_gate():
    K = tails.ConstantEstimate(1.0, 0.1, "implicit-renewal-K")
    conv = tails.DivergenceProbe(3.0, None, None, 0.5, "convergent")
    div = tails.DivergenceProbe(3.0, None, None, 1.1, "divergence-consistent")
    assert tails.positivity_gate(K, conv) and not tails.positivity_gate(K, div)


# ---- constants


@pytest.fixture(scope="module")
def beta2_run():
    spec = lognormal_reference(beta=2.0)
    pop, _ = wbp.run_population(spec, 300_000, 50, 41)
    pool = SamplePool.generate(spec, 42, 300_000)
    table = sp.TransferTable(sp.SphereGrid(2, 64), SamplePool.generate(spec, 43, 100_000))
    sol = sp.power_iterate(table.operator(2.0))
    l2 = sp.compute_l_beta(spec, 2.0, sol, table.pool, table)
    return spec, pop.samples, pool, sol, l2


def test_homogeneous_zero_constant():
    spec = lognormal_reference(**{"q.dist": "zero"})
    pool = SamplePool.generate(spec, 0, 1000)
    table = sp.TransferTable(sp.SphereGrid(2, 16), pool)
    sol = sp.power_iterate(table.operator(3.0))
    out = tails.constant_K(spec, 3.0, sol, (0.2, 0.01), np.zeros((100, 2)), pool, ["radial", [1, 0]])
    assert all(k.value == 0 and k.degenerate for k in out)


def test_beta2_matches_constant_K(beta2_run):
    spec, R, pool, sol, l2 = beta2_run
    dirs = [[1.0, 0.0], [0.0, 1.0], [-0.6, 0.8]]
    b2 = tails.beta2_constant(spec, sol, l2, pool, dirs)
    K = tails.constant_K(spec, 2.0, sol, l2, R, pool, dirs, seed=1)
    for a, b in zip(b2, K):
        assert a.value > 0
        assert abs(a.value - b.value) <= 3 * np.hypot(a.se, b.se)


def test_beta2_isotropic_limit(beta2_run):
    # similarity + isotropic Q: e = 1, nu uniform, E(yQ)^2 = 1, so the value is 1/(4 N l_2)
    spec, R, pool, sol, l2 = beta2_run
    b = tails.beta2_constant(spec, sol, l2, pool, [[1.0, 0.0]])[0]
    assert b.value == pytest.approx(1 / (4 * 2 * l2[0]), rel=0.02)


def test_beta2_guards(beta2_run):
    spec, R, pool, sol, l2 = beta2_run
    with pytest.raises(UsageError):
        tails.beta2_constant(spec, sol, l2, pool, [[1.0, 0.0]], beta=2.2)
    zq = lognormal_reference(beta=2.0, **{"q.dist": "zero"})
    out = tails.beta2_constant(zq, sol, l2, SamplePool.generate(zq, 0, 100), [[1.0, 0.0]])
    assert out[0].value == 0 and out[0].degenerate


@pytest.fixture(scope="module")
def lognormal_run(lognormal):
    pop, _ = wbp.run_population(lognormal, 400_000, 50, 51)
    pool = SamplePool.generate(lognormal, 52, 400_000)
    table = sp.TransferTable(sp.SphereGrid(2, 64), SamplePool.generate(lognormal, 53, 100_000))
    sol = sp.power_iterate(table.operator(3.0))
    return pop.samples, pool, sol, sp.compute_l_beta(lognormal, 3.0, sol, table.pool, table)


def test_radial_K_matches_sigma_S(lognormal, lognormal_run):
    R, pool, sol, l = lognormal_run
    K = tails.constant_K(lognormal, 3.0, sol, l, R, pool, ["radial"], seed=2)[0]
    S = tails.sigma_S(lognormal, 3.0, sp.compute_m_beta_similarity(lognormal, 3.0, pool), R, pool, seed=2)
    assert S.value > 3 * S.se
    assert abs(3 * K.value - S.value) <= 3 * np.hypot(3 * K.se, S.se)


def test_sigma_S_needs_similarity(maxwell):
    with pytest.raises(UsageError):
        tails.sigma_S(maxwell, 2.0, (1.0, 0.1), np.zeros((10, 3)), SamplePool.generate(maxwell, 0, 10))


def test_sigma_S_degenerate_solution():
    # Q = r - sum C_i r pins R = r exactly, so the bracket has mean 1 - m(beta) = 0
    spec = lognormal_reference(**{"q.dist": "compensate", "q.r": "1,0"})
    pop, _ = wbp.run_population(spec, 1000, 3, 0, init="mean", r=np.array([1.0, 0.0]))
    assert np.allclose(pop.samples, [1, 0], atol=1e-12)
    pool = SamplePool.generate(spec, 1, 400_000)
    S = tails.sigma_S(spec, 3.0, sp.compute_m_beta_similarity(spec, 3.0, pool), pop.samples, pool)
    assert abs(S.value) <= 3 * S.se


def test_sigma_S_positive_for_fixed_rotation():
    spec = lognormal_reference(**{"k.dist": "angle", "k.angle": 0.9})
    pop, _ = wbp.run_population(spec, 200_000, 50, 3)
    pool = SamplePool.generate(spec, 4, 200_000)
    S = tails.sigma_S(spec, 3.0, sp.compute_m_beta_similarity(spec, 3.0, pool), pop.samples, pool)
    assert S.value > 3 * S.se


def test_sigma_S_homogeneous_plateau():
    # alpha = 1 < 2: a homogeneous solution with E R = (1, 0) exists
    spec = lognormal_reference(**{"k.dist": "identity", "q.dist": "zero"})
    pop, _ = wbp.run_population(spec, 1_000_000, 50, 31, init="mean", r=np.array([1.0, 0.0]))
    pool = SamplePool.generate(spec, 32, 1_000_000)
    S = tails.sigma_S(spec, 3.0, sp.compute_m_beta_similarity(spec, 3.0, pool), pop.samples, pool)
    level = tails.plateau(np.linalg.norm(pop.samples, axis=1), 3.0)[3]
    assert level == pytest.approx(S.value / 3, rel=0.25)


# ---- moment identity


def test_goldie_trivial():
    spec = lognormal_reference(**{"q.dist": "zero"})
    pool = SamplePool.generate(spec, 0, 1000)
    R = np.zeros((1000, 2))
    with pytest.raises(Exception):
        # zero samples have no support to put a grid on
        tails.goldie_identity_residual(spec, 2.0, R, pool, 1.0, 3.0)
    V, U = tails.paired_terms(pool, R, 0)
    assert not np.any(tails.bracket(V, U, 2.0, np.array([1.0, 0.0])))


def test_goldie_skips_outside_window(lognormal):
    pool = SamplePool.generate(lognormal, 0, 100)
    with pytest.warns(UserWarning, match="skipped"):
        assert tails.goldie_identity_residual(lognormal, 0.5, np.ones((100, 2)), pool, 1.0, 3.0) is None


def test_goldie_grid_must_cover_support(lognormal, lognormal_run):
    R, pool, _, _ = lognormal_run
    with pytest.raises(EstimationError):
        tails.goldie_identity_residual(lognormal, 2.0, R, pool, 1.0, 3.0, t_grid=np.geomspace(1, 2, 10))


@pytest.mark.parametrize("s", [1.5, 2.0, 2.5])
def test_goldie_identity(lognormal, lognormal_run, s):
    R, pool, _, _ = lognormal_run
    g = tails.goldie_identity_residual(lognormal, s, R, pool, 1.0, 3.0, seed=5)
    assert abs(g.residual) <= 3 * g.combined_se
