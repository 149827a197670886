import numpy as np
import pytest
from scipy import sparse

from smoothtails import spectral as sp
from smoothtails.errors import ConsistencyError, EstimationError, UsageError
from smoothtails.models import ModelSpec, SamplePool
from smoothtails.wbp import path_log_norms

from conftest import lognormal_m


@pytest.fixture(scope="module")
def maxwell_setup(maxwell):
    pool = SamplePool.generate(maxwell, 11, 20_000)
    grid = sp.SphereGrid(3, 300)
    return pool, grid, sp.TransferTable(grid, pool)


# ---- grids


@pytest.mark.parametrize("d,G", [(1, 2), (2, 64), (3, 400), (4, 200)])
def test_grid_invariants(d, G):
    g = sp.SphereGrid(d, G, seed=3)
    assert np.abs(np.linalg.norm(g.nodes, axis=1) - 1).max() <= 1e-12
    assert abs(g.weights.sum() - 1) <= 1e-12 and np.all(g.weights > 0)
    idx = np.arange(g.G)
    assert np.allclose(g.nodes[g.antipode(idx)], -g.nodes, atol=1e-15)
    assert np.array_equal(g.nearest(g.nodes), idx)
    assert np.array_equal(g.nearest(-3.0 * g.nodes), g.antipode(idx))


def test_grid_equiangular():
    g = sp.SphereGrid(2, 12)
    ang = np.angle(g.nodes[:, 0] + 1j * g.nodes[:, 1])
    assert np.allclose(np.diff(np.unwrap(ang)), 2 * np.pi / 12)


# ---- direct estimator


@pytest.mark.parametrize("n,B", [(1, 100), (30, 100), (30, 5000)])
def test_direct_diagonal_exact(diagonal, n, B):
    ln = path_log_norms(diagonal, n, B, 0)
    for s in (0.5, 1, 3, 4.5):
        m, se = sp.estimate_m_direct(ln, s, 2, n)
        assert m == pytest.approx(2 ** (1 - s / 3), rel=1e-12)
        assert se == pytest.approx(0, abs=1e-12)


def test_direct_identity_weights():
    spec = ModelSpec("similarity", 2, 3, {"t.dist": "const", "t.value": 1.0})
    ln = path_log_norms(spec, 10, 200, 0)
    assert sp.estimate_m_direct(ln, 2.0, 3, 10)[0] == pytest.approx(3, rel=1e-12)


@pytest.mark.parametrize("n,s", [(1, 1.0), (1, 2.0), (4, 0.5)])
def test_direct_lognormal_moment(lognormal, n, s):
    mu, sig = lognormal.params["t.mu"], lognormal.params["t.sigma"]
    m, se = sp.estimate_m_direct(path_log_norms(lognormal, n, 100_000, 1), s, 2, n)
    assert abs(m - lognormal_m(s, mu, sig)) <= 3 * se


def test_direct_all_zero_products():
    with pytest.raises(EstimationError):
        sp.estimate_m_direct(np.full(100, -np.inf), 1.0, 2, 5)


def test_fixed_pool_log_convexity(gaussian2):
    ln = path_log_norms(gaussian2, 30, 20_000, 4)
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = np.sort(rng.uniform(0, 6, 2))
        f = sp.log_moment_curve(ln, [a, (a + b) / 2, b])
        assert f[1] <= (f[0] + f[2]) / 2 + 1e-12 * abs(f[1])


# ---- operators


def test_T0_is_markov(gaussian2):
    pool = SamplePool.generate(gaussian2, 0, 5000)
    op = sp.build_operator(gaussian2, 0.0, sp.SphereGrid(2, 100), pool)
    assert np.abs(op.row_sums() - 1).max() <= 1e-14
    assert np.all(op.matrix >= 0)


def test_deterministic_similarity_operator():
    t, s = 0.8, 2.5
    spec = ModelSpec("similarity", 2, 2, {"t.dist": "const", "t.value": t, "k.dist": "angle",
                                          "k.angle": 2 * np.pi / 8})
    grid = sp.SphereGrid(2, 64)
    op = sp.build_operator(spec, s, grid, SamplePool.generate(spec, 0, 10))
    f = np.random.default_rng(0).random(64)
    # x k (row vector) turns x by -1/8 turn: node g goes to node g - 8
    assert np.allclose(op.apply(f), t ** s * f[(np.arange(64) - 8) % 64], rtol=1e-13, atol=0)
    assert np.allclose(op.apply(np.ones(64)), t ** s, rtol=1e-13)
    sol = sp.power_iterate(op)
    assert abs(sol.kappa - t ** s) <= 1e-10


def test_maxwell_T1_is_node_independent(maxwell, maxwell_setup):
    pool, grid, table = maxwell_setup
    s = 2.0
    v = table.operator(s).apply(np.ones(grid.G))
    # per-node SE of the pool mean
    ll = table.log_len
    per_se = np.exp(s * ll).std(axis=1) / np.sqrt(ll.shape[1])
    exact, exact_se = sp.maxwell_closed_form(maxwell, s, 1_000_000, 2)
    assert np.all(np.abs(2 * v - exact) <= 3 * np.hypot(2 * per_se, exact_se) + 1e-12)


def test_sparse_operator_matches_dense():
    spec = ModelSpec("general", 2, 2, {"c.scale": 0.4})
    pool = SamplePool.generate(spec, 1, 500)
    big = sp.TransferTable(sp.SphereGrid(2, 3200), pool).operator(1.0)
    assert sparse.issparse(big.matrix)
    sol = sp.power_iterate(big)
    assert sol.e.min() > 0 and abs(sol.e @ sol.nu - 1) <= 1e-8


# ---- power iteration


def test_power_iteration_invariants(gaussian2):
    pool = SamplePool.generate(gaussian2, 3, 20_000)
    grid = sp.SphereGrid(2, 128)
    table = sp.TransferTable(grid, pool)
    for s in (0.5, 1.0, 2.0, 3.0):
        op = table.operator(s)
        sol = sp.power_iterate(op, tol=1e-10)
        assert sol.kappa > 0 and sol.e.min() > 0 and sol.nu.min() >= 0
        assert abs(sol.nu.sum() - 1) <= 1e-12
        assert abs(sol.e @ sol.nu - 1) <= 1e-8
        assert np.max(np.abs(op.apply(sol.e) - sol.kappa * sol.e)) / sol.e.max() <= 1e-10
        anti = grid.antipode(np.arange(grid.G))
        assert np.max(np.abs(sol.e - sol.e[anti])) <= 5 * 1e-10 * sol.e.max() / min(sol.kappa, 1)


def test_power_iteration_reports_non_convergence(gaussian2):
    op = sp.build_operator(gaussian2, 1.0, sp.SphereGrid(2, 64), SamplePool.generate(gaussian2, 0, 500))
    with pytest.raises(Exception) as info:
        sp.power_iterate(op, tol=1e-30, max_iter=5)
    assert info.value.iterations == 5 and info.value.residual > 0


def test_maxwell_eigen_elements(maxwell_setup):
    pool, grid, table = maxwell_setup
    for s in (1.0, 2.0):
        sol = sp.power_iterate(table.operator(s))
        assert np.ptp(sol.e) / sol.e.mean() < 0.05
        # nu is the uniform measure up to multinomial noise of ~130 branches per node
        assert np.mean(np.abs(sol.nu / grid.weights - 1)) < 0.1
        exact = sp.maxwell_closed_form(pool.spec, s, 1_000_000, 3)[0]
        assert 2 * sol.kappa == pytest.approx(exact, rel=0.01)


def test_operator_vs_direct_ratio_oracle(gaussian2):
    # length-ratio of path moments cancels the prefactor c(s) in E||Pi_n||^s ~ c kappa^n
    table = sp.TransferTable(sp.SphereGrid(2, 256), SamplePool.generate(gaussian2, 3, 40_000))
    l30 = path_log_norms(gaussian2, 30, 100_000, 5)
    l60 = path_log_norms(gaussian2, 60, 100_000, 6)
    s = 0.5
    ratio = 2 * np.exp((sp.log_moment_curve(l60, s)[0] - sp.log_moment_curve(l30, s)[0]) / 30)
    assert sp.power_iterate(table.operator(s)).m == pytest.approx(ratio, rel=0.005)


@pytest.mark.xfail(strict=True, reason="direct estimator at n=30 carries an O(1/n) bias its SE does not cover")
def test_operator_vs_direct_n30_within_3se(gaussian2):
    curve = sp.MCurve(gaussian2, SamplePool.generate(gaussian2, 3, 20_000), grid=sp.SphereGrid(2, 256))
    ln = path_log_norms(gaussian2, 30, 100_000, 5)
    for s in (0.5, 1.0, 2.0):
        row = curve(s)
        m, se = sp.estimate_m_direct(ln, s, 2, 30)
        assert abs(row["m_hat"] - m) <= 3 * np.hypot(row["se"], se)


# ---- exponents


def test_exponents_diagonal(diagonal):
    rep = sp.find_exponents(diagonal, 0.05, 6.0, 0.25, method="direct", n=30, B=200)
    assert abs(rep.alpha - 3) <= 1e-3 and rep.beta is None


def test_exponents_scalar_contraction():
    c, N = 0.6, 3
    spec = ModelSpec("similarity", 2, N, {"t.dist": "const", "t.value": c})
    rep = sp.find_exponents(spec, 0.05, 6.0, 0.25, B=100)
    assert abs(rep.alpha - np.log(N) / np.log(1 / c)) <= 1e-3 and rep.beta is None


def test_exponents_lognormal(lognormal):
    rep = sp.find_exponents(lognormal, 0.05, 5.0, 0.25, B=20_000, seed=2)
    assert rep.alpha == pytest.approx(1, rel=0.03) and rep.beta == pytest.approx(3, rel=0.03)
    assert rep.alpha <= rep.beta and rep.m_prime_beta > 0
    mu, sig = lognormal.params["t.mu"], lognormal.params["t.sigma"]
    # m'(3) = m(3) (mu + 3 sigma^2) = mu + 3 sigma^2
    assert rep.m_prime_beta == pytest.approx(mu + 3 * sig ** 2, rel=0.15)
    for row in rep.m_curve:
        assert abs(row["m_hat"] - lognormal_m(row["s"], mu, sig)) <= 5 * row["se"] + 1e-12


def test_exponents_none_in_range():
    spec = ModelSpec("similarity", 2, 2, {"t.dist": "const", "t.value": 1.2})
    rep = sp.find_exponents(spec, 0.05, 3.0, 0.25, B=100)
    assert rep.alpha is None and rep.beta is None and "no exponents" in rep.message


def test_exponent_scan_respects_moment_hint():
    spec = ModelSpec("similarity", 2, 2, {"t.dist": "const", "t.value": 0.5}, s_max=4)
    with pytest.raises(ValueError):
        sp.find_exponents(spec, 0.05, 5.0, 0.25, B=100)


# ---- normalizers


def test_l_beta_similarity_collapses(lognormal):
    pool = SamplePool.generate(lognormal, 4, 50_000)
    table = sp.TransferTable(sp.SphereGrid(2, 64), pool)
    sol = sp.power_iterate(table.operator(3.0))
    l, se = sp.compute_l_beta(lognormal, 3.0, sol, pool, table)
    t = np.linalg.norm(pool.branches(), ord=2, axis=(1, 2))
    f = t ** 3 * np.log(t)
    assert abs(l - f.mean()) <= 3 * np.hypot(se, f.std() / np.sqrt(f.size)) + 1e-12


def test_l_beta_maxwell_closed_form(maxwell, maxwell_setup):
    # m(2) = 1 is the lower root here; the upper root lies near s = 6.8
    pool, grid, table = maxwell_setup
    s = 7.0
    sol = sp.power_iterate(table.operator(s))
    l, se = sp.compute_l_beta(maxwell, s, sol, pool, table)
    exact, ese = sp.maxwell_closed_form(maxwell, s, 1_000_000, 4, log_weight=True)
    assert abs(l - exact / 2) <= 3 * np.hypot(se, ese / 2)


def test_l_beta_wrong_beta_fails():
    spec = ModelSpec("similarity", 2, 2, {"t.dist": "const", "t.value": 0.7})
    pool = SamplePool.generate(spec, 0, 100)
    table = sp.TransferTable(sp.SphereGrid(2, 16), pool)
    sol = sp.power_iterate(table.operator(2.0))
    with pytest.raises(ConsistencyError):
        sp.compute_l_beta(spec, 2.0, sol, pool, table)


def test_m_beta_lognormal(lognormal):
    mu, sig = lognormal.params["t.mu"], lognormal.params["t.sigma"]
    m, se = sp.compute_m_beta_similarity(lognormal, 3.0, SamplePool.generate(lognormal, 5, 400_000))
    exact = 2 * np.exp(3 * mu + 4.5 * sig ** 2) * (mu + 3 * sig ** 2)
    assert exact > 0 and abs(m - exact) <= 3 * se
    ma, sea = sp.compute_m_beta_similarity(lognormal, 1.0, SamplePool.generate(lognormal, 5, 400_000), check=False)
    assert ma <= 3 * sea  # m'(alpha) <= 0


def test_m_beta_two_point():
    a, b, p = 0.4, 1.6, 0.7
    spec = ModelSpec("similarity", 3, 2, {"t.dist": "twopoint", "t.a": a, "t.b": b, "t.p": p})
    m, se = sp.compute_m_beta_similarity(spec, 2.0, SamplePool.generate(spec, 6, 200_000))
    exact = 2 * (p * a ** 2 * np.log(a) + (1 - p) * b ** 2 * np.log(b))
    assert abs(m - exact) <= 3 * se


def test_m_beta_requires_similarity(maxwell):
    with pytest.raises(UsageError):
        sp.compute_m_beta_similarity(maxwell, 2.0, SamplePool.generate(maxwell, 0, 10))


def test_solution_json_round_trip(lognormal, tmp_path):
    from smoothtails import io

    pool = SamplePool.generate(lognormal, 0, 1000)
    sol = sp.spectral_solution(lognormal, 2.0, sp.SphereGrid(2, 32), pool)
    io.write_json(str(tmp_path / "s.json"), sol.to_dict())
    back = sp.SpectralSolution.from_dict(io.read_json(str(tmp_path / "s.json")))
    assert np.array_equal(back.e, sol.e) and back.kappa == sol.kappa and back.spec_hash == lognormal.digest()
