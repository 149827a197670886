"""Weighted branching process: approximate samples of the fixed point ``R``.

Two samplers are provided.  Population dynamics iterates the smoothing
transform on an empirical particle approximation: every sweep replaces
each particle by ``sum_i C_i X_{j_i} + Q`` with fresh weights and parents
``j_i`` drawn uniformly with replacement.  The truncated recursion
evaluates the weighted branching process exactly to a finite depth with
the leaves pinned at the mean solution ``r``.

Random numbers come from per-block substreams keyed by
``(seed, generation, block)``, so results do not depend on the thread
count.
"""
from dataclasses import dataclass, field
import os

import numpy as np
from scipy import stats

from . import _rng
from . import io as _io
from .errors import ConfigError, EstimationError
from .models import SamplePool, draw, solve_eigenvector

HUGE = 1e100
DEFAULT_BUDGET = 1 << 20
BURN_IN = 50


@dataclass(frozen=True)
class Population:
    """``M`` particles approximating the law of ``R`` after ``generation`` sweeps."""

    samples: np.ndarray
    generation: int
    spec: object
    seed: int
    huge: int = 0

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=float)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ConfigError("population needs at least one d-vector")
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.shape[0]

    def mean(self):
        """Population mean accumulated in extended precision."""
        return (self.samples.astype(np.longdouble).sum(axis=0) / len(self)).astype(float)

    def covariance(self):
        x = self.samples.astype(np.longdouble)
        m = x.sum(axis=0) / len(self)
        c = (x - m).T @ (x - m) / max(len(self) - 1, 1)
        return c.astype(float)


@dataclass(frozen=True)
class PathProduct:
    n: int
    matrix: np.ndarray
    log_norm: float


def _sweep_block(spec, X, seed, generation, part, permute):
    j, a, b = part
    rng = _rng.stream(seed, _rng.POPULATION, generation, j)
    C, Q, _ = draw(spec, rng, b - a)
    parents = rng.integers(0, X.shape[0], size=(b - a, spec.N))
    if permute:
        prng = _rng.stream(seed, _rng.PERMUTATION, generation, j)
        order = np.argsort(prng.random((b - a, spec.N)), axis=1)
        C = np.take_along_axis(C, order[:, :, None, None], axis=1)
    out = Q.copy()
    for i in range(spec.N):
        out += np.einsum("bij,bj->bi", C[:, i], X[parents[:, i]])
    return out


def population_iterate(pop, seed=None, threads=None, permute=False):
    """One sweep of the smoothing transform applied to the empirical law of ``pop``.

    ``permute=True`` applies an independent uniformly random permutation to
    the branch order of every weight vector (all other random numbers are
    unchanged).  Non-finite particles abort with EstimationError; finite
    particles larger than ``1e100`` are kept and counted in ``huge``.
    """
    seed = pop.seed if seed is None else seed
    X = pop.samples
    parts = _rng.blocks(len(X))
    out = _rng.run_blocks(
        lambda p: _sweep_block(pop.spec, X, seed, pop.generation, p, permute), parts, threads)
    new = np.concatenate(out)
    if not np.all(np.isfinite(new)):
        bad = int((~np.isfinite(new)).any(axis=1).sum())
        raise EstimationError(f"{bad} non-finite particles at generation {pop.generation + 1}")
    huge = int((np.abs(new) > HUGE).any(axis=1).sum())
    return Population(new, pop.generation + 1, pop.spec, seed, huge)


def initial_population(spec, M, seed, init="gaussian", r=None):
    """Generation-0 population.

    ``init`` is ``"gaussian"`` (``r`` plus standard normal noise), ``"mean"``
    (every particle equal to ``r``) or an explicit ``(M, d)`` array.  ``r``
    defaults to the mean solution from a 10^5 pool (zero if none exists).
    """
    if not isinstance(init, str):
        return Population(np.array(init, dtype=float).reshape(M, spec.d), 0, spec, seed)
    if r is None:
        r = default_mean(spec, seed)
    r = np.asarray(r, dtype=float)
    if init == "mean":
        x = np.broadcast_to(r, (M, spec.d)).copy()
    elif init == "gaussian":
        x = r + _rng.stream(seed, _rng.INIT).standard_normal((M, spec.d))
    else:
        raise ConfigError(f"unknown init {init!r}")
    return Population(x, 0, spec, seed)


def default_mean(spec, seed, size=100_000):
    sol = solve_eigenvector(spec, SamplePool.generate(spec, seed, size))
    if sol.r is None or not sol.unique:
        return np.zeros(spec.d)
    return sol.r


def moment_diagnostics(pop, Sigma=None):
    """Mean and (optionally) covariance-residual diagnostics for one generation.

    The returned single-generation standard errors treat particles as
    independent; :func:`run_population` accumulates them over sweeps.
    """
    x = pop.samples
    M = len(pop)
    out = {"generation": pop.generation, "mean": pop.mean(),
           "mean_se": x.std(axis=0, ddof=1) / np.sqrt(M) if M > 1 else np.zeros(x.shape[1]),
           "huge": pop.huge}
    if Sigma is not None:
        Sigma = np.asarray(Sigma, dtype=float)
        c = x - pop.mean()
        prod = c[:, :, None] * c[:, None, :]
        out["cov_residual"] = float(np.linalg.norm(pop.covariance() - Sigma))
        out["cov_se"] = float(np.linalg.norm(prod.std(axis=0, ddof=1) / np.sqrt(M)))
    return out


def run_population(spec, M, sweeps=BURN_IN, seed=0, init="gaussian", r=None,
                   Sigma=None, threads=None, permute=False, callback=None):
    """Population dynamics from ``init`` for ``sweeps`` sweeps.

    Returns ``(population, diagnostics)``.  ``diagnostics[k]`` holds the
    mean, its drift from generation 0 and the drift standard error
    ``sqrt(sum of per-sweep squared SEs)``: resampling noise accumulates
    like a random walk in directions the transform does not contract.  With
    ``Sigma`` the covariance residual ``||Cov - Sigma||_F`` is tracked the
    same way.
    """
    pop = initial_population(spec, M, seed, init, r)
    diag = []
    first = moment_diagnostics(pop, Sigma)
    mean0 = first["mean"]
    acc_mean = np.zeros(spec.d)
    acc_cov = 0.0
    for _ in range(sweeps):
        prev = moment_diagnostics(pop, Sigma)
        acc_mean += prev["mean_se"] ** 2
        if Sigma is not None:
            acc_cov += prev["cov_se"] ** 2
        pop = population_iterate(pop, seed, threads, permute)
        cur = moment_diagnostics(pop, Sigma)
        cur["drift"] = cur["mean"] - mean0
        cur["drift_se"] = np.sqrt(acc_mean + cur["mean_se"] ** 2)
        if Sigma is not None:
            cur["cov_residual_se"] = float(np.sqrt(acc_cov + cur["cov_se"] ** 2 + first["cov_se"] ** 2))
        diag.append(cur)
        if callback is not None:
            callback(pop, cur)
    return pop, diag


# ----------------------------------------------------------------------


def tree_nodes(N, depth):
    return (N ** (depth + 1) - 1) // (N - 1)


def sample_R_recursive(spec, depth, count, seed, r=None, budget=DEFAULT_BUDGET, threads=None):
    """Exact depth-``depth`` weighted branching process evaluations.

    Each sample is ``sum_{|v|<n} L(v) Q(v) + sum_{|v|=n} L(v) r`` on an
    independent tree; ``r`` defaults to the mean solution.  The error with
    respect to ``R`` decays like ``m(s)^(n/s)`` in the ``s``-th moment for
    any ``s`` with ``m(s) < 1``.
    """
    if depth < 0:
        raise ConfigError("depth must be >= 0")
    nodes = tree_nodes(spec.N, depth)
    if nodes > budget:
        raise ConfigError(f"tree with {nodes} nodes per sample exceeds the budget of {budget}")
    if r is None:
        r = default_mean(spec, seed)
    r = np.asarray(r, dtype=float)
    leaves = spec.N ** depth
    batch = max(1, (1 << 18) // leaves)
    parts = _rng.blocks(count, batch)

    def work(part):
        j, a, b = part
        rng = _rng.stream(seed, _rng.RECURSION, j)
        n = b - a
        V = np.broadcast_to(r, (n * leaves, spec.d)).copy()
        for level in range(depth - 1, -1, -1):
            width = n * spec.N ** level
            C, Q, _ = draw(spec, rng, width)
            kids = V.reshape(width, spec.N, spec.d)
            V = Q + np.einsum("bnij,bnj->bi", C, kids)
        return V

    return np.concatenate(_rng.run_blocks(work, parts, threads))


def _renormalized_products(spec, rng, n, size):
    d = spec.d
    P = np.broadcast_to(np.eye(d), (size, d, d)).copy()
    log_scale = np.zeros(size)
    rows = np.arange(size)
    for _ in range(n):
        C, _, _ = draw(spec, rng, size)
        pick = rng.integers(0, spec.N, size)
        P = P @ C[rows, pick]
        s = np.abs(P).max(axis=(1, 2))
        ok = s > 0
        P[ok] /= s[ok, None, None]
        with np.errstate(divide="ignore"):
            log_scale += np.log(s)
    return P, log_scale


def sample_path_product(spec, n, stream):
    """``Pi_n = C^(1) ... C^(n)`` with ``C^(k)`` i.i.d. copies of ``C_I``."""
    if n < 0:
        raise ConfigError("n must be >= 0")
    P, log_scale = _renormalized_products(spec, stream, n, 1)
    with np.errstate(divide="ignore", over="ignore"):
        log_norm = float(log_scale[0] + np.log(np.linalg.norm(P[0], 2)))
        matrix = P[0] * np.exp(log_scale[0]) if np.isfinite(log_scale[0]) else np.zeros_like(P[0])
    return PathProduct(n, matrix, log_norm)


def path_log_norms(spec, n, size, seed, threads=None):
    """``log ||Pi_n||`` for ``size`` independent path products (``-inf`` for zero products)."""

    def work(part):
        j, a, b = part
        P, log_scale = _renormalized_products(spec, _rng.stream(seed, _rng.PATHS, n, j), n, b - a)
        with np.errstate(divide="ignore"):
            return log_scale + np.log(np.linalg.norm(P, ord=2, axis=(1, 2)))

    return np.concatenate(_rng.run_blocks(work, _rng.blocks(size), threads))


# ----------------------------------------------------------------------


@dataclass(frozen=True)
class PermutationReport:
    distance: float
    threshold: float
    passed: bool
    M: int
    level: float = 0.01
    null: np.ndarray = field(default=None, repr=False)


def ks_permutation_threshold(a, b, level=0.01, n_boot=200, rng=None):
    """Upper ``level`` quantile of the two-sample KS statistic under relabelling."""
    rng = rng if rng is not None else np.random.default_rng(0)
    pooled = np.concatenate([a, b])
    null = np.empty(n_boot)
    for i in range(n_boot):
        perm = rng.permutation(pooled)
        null[i] = stats.ks_2samp(perm[: len(a)], perm[len(a):]).statistic
    return float(np.quantile(null, 1 - level)), null


def permutation_check(spec, M, seed, sweeps=BURN_IN, direction=None, level=0.01,
                      n_boot=200, threads=None):
    """Compare population dynamics with original and randomly permuted branch order.

    Both runs share every random number except the permutations.  The
    Kolmogorov distance between the two empirical laws of ``x R`` is
    compared with the ``1 - level`` quantile of its relabelling null.
    """
    if M < 1000:
        raise ConfigError("permutation_check needs M >= 1000")
    x = np.zeros(spec.d)
    x[0] = 1.0
    if direction is not None:
        x = np.asarray(direction, dtype=float)
        x = x / np.linalg.norm(x)
    a, _ = run_population(spec, M, sweeps, seed, threads=threads)
    b, _ = run_population(spec, M, sweeps, seed, threads=threads, permute=True)
    pa, pb = a.samples @ x, b.samples @ x
    dist = float(stats.ks_2samp(pa, pb).statistic)
    thr, null = ks_permutation_threshold(pa, pb, level, n_boot,
                                         _rng.stream(seed, _rng.PERMUTATION, 1 << 30))
    return PermutationReport(dist, thr, dist <= thr, M, level, null)


# ----------------------------------------------------------------------


def dump_samples(path, pop, manifest_hash=None, spec_hash=None):
    """Write particles as CSV (``.csv``) or ``.npy`` plus a ``.meta.json`` sidecar."""
    meta = {"schema": "smoothtails.samples/1",
            "spec_hash": spec_hash or pop.spec.digest(),
            "seed": pop.seed, "generation": pop.generation,
            "M": len(pop), "d": pop.samples.shape[1]}
    if manifest_hash is not None:
        meta["manifest"] = manifest_hash
    if path.endswith(".csv"):
        cols = [f"x{i}" for i in range(pop.samples.shape[1])]
        _io.write_csv(path, cols, pop.samples)
    else:
        import io as stdio
        buf = stdio.BytesIO()
        np.save(buf, np.ascontiguousarray(pop.samples))
        _io.atomic_write(path, buf.getvalue())
    _io.write_json(path + ".meta.json", meta)
    return meta


def load_samples(path):
    """Inverse of :func:`dump_samples`; returns ``(array, metadata)``."""
    meta_path = path + ".meta.json"
    meta = _io.read_json(meta_path) if os.path.exists(meta_path) else {}
    if path.endswith(".csv"):
        _, data = _io.read_csv(path)
    else:
        data = np.load(path)
    return data, meta
