"""Tail-index estimates and limiting constants of simulated fixed points.

The limiting constants are expectations of differences

    |y(sum_i C_i R_i + Q)|^b - sum_i |y C_i R_i|^b

over independent weights and solution samples.  The differences have finite
means but may have infinite variance for ``b`` near the tail index, so
every such expectation is reduced by median-of-means over 32 blocks.
"""
from dataclasses import dataclass, field
import hashlib
import warnings

import numpy as np

from . import _rng
from .errors import ConfigError, EstimationError, UsageError

MOM_BLOCKS = 32
MIN_EXCEEDANCES = 10
GOLDIE_POINTS = 200
PLATEAU_TOP = 100


def median_of_means(values, blocks=MOM_BLOCKS):
    """Median of contiguous block means with a normal-theory SE.

    The SE is ``sqrt(pi/2) * sd(block means) / sqrt(blocks)``, the
    asymptotic standard error of a median of Gaussian block means.
    """
    v = np.asarray(values, dtype=float)
    if v.shape[0] < blocks:
        raise EstimationError(f"median-of-means needs at least {blocks} values, got {v.shape[0]}")
    means = np.array([b.mean(axis=0) for b in np.array_split(v, blocks)])
    if not np.all(np.isfinite(means)):
        raise EstimationError(f"non-finite block means: {means}")
    est = np.median(means, axis=0)
    se = np.sqrt(np.pi / 2) * means.std(axis=0, ddof=1) / np.sqrt(blocks)
    return est, se


# ----------------------------------------------------------------------
# tail index


def _top(samples, k):
    x = np.asarray(samples, dtype=float).ravel()
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise ConfigError("tail estimators need finite positive samples")
    if k < MIN_EXCEEDANCES:
        raise EstimationError(f"only {k} exceedances; need at least {MIN_EXCEEDANCES}")
    if k >= x.size:
        raise ConfigError(f"k={k} must be smaller than the sample size {x.size}")
    part = np.partition(x, x.size - k - 1)[x.size - k - 1:]
    return np.sort(part)[::-1]  # k+1 largest, descending


def default_k(n):
    return max(100, n // 100)


def hill_estimate(samples, k=None):
    """Hill estimator ``1 / mean(log X_(i) - log X_(k+1))`` over the ``k`` largest; SE ``est/sqrt(k)``."""
    x = np.asarray(samples, dtype=float).ravel()
    k = default_k(x.size) if k is None else int(k)
    top = _top(x, k)
    h = np.mean(np.log(top[:k]) - np.log(top[k]))
    if h <= 0:
        raise EstimationError("zero log-excesses: the top order statistics are all equal")
    est = 1.0 / h
    return est, est / np.sqrt(k)


def rank_regression(samples, k=None):
    """Log-rank regression ``log(i - 1/2) = a - b log X_(i)`` on the ``k`` largest.

    The ``-1/2`` shift removes the leading small-sample bias; the SE is
    ``b sqrt(2/k)``.
    """
    x = np.asarray(samples, dtype=float).ravel()
    k = default_k(x.size) if k is None else int(k)
    top = _top(x, k)[:k]
    lx = np.log(top)
    if np.ptp(lx) == 0:
        raise EstimationError("all top order statistics are equal")
    slope = np.polyfit(lx, np.log(np.arange(1, k + 1) - 0.5), 1)[0]
    b = -slope
    return b, b * np.sqrt(2.0 / k)


def survival_curve(samples, t):
    """Empirical ``P(X > t)`` with binomial SE; a right-continuous nonincreasing step function."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    t = np.asarray(t, dtype=float)
    p = 1.0 - np.searchsorted(x, t, side="right") / x.size
    return p, np.sqrt(p * (1 - p) / x.size)


def tail_grid(samples, points=50, top=PLATEAU_TOP, decades=None):
    """Geometric grid from the median to the order statistic with ``top`` exceedances."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    hi = x[-top - 1] if x.size > top else x[-1]
    lo = hi / 10 ** decades if decades else max(np.median(x), hi * 1e-6)
    lo = max(lo, np.finfo(float).tiny)
    return np.geomspace(lo, hi, points)


def plateau(samples, beta, n_total=None, top=PLATEAU_TOP, points=20):
    """``t^beta P(X > t)`` over the top decade ending at the ``top``-th exceedance.

    ``samples`` may be the positive part of a projection; ``n_total`` is the
    full sample size used as denominator (default ``len(samples)``).
    Returns ``(t, value, se, level, level_se)`` where ``level`` averages the
    curve and ``level_se`` is the binomial SE at the decade's centre.
    """
    x = np.asarray(samples, dtype=float).ravel()
    n = n_total or x.size
    t = tail_grid(x, points, top, decades=1)
    p, _ = survival_curve(x, t)
    p = p * x.size / n
    se = np.sqrt(p * (1 - p) / n)
    v = t ** beta * p
    vse = t ** beta * se
    return t, v, vse, float(v.mean()), float(vse[points // 2])


@dataclass
class TailReport:
    direction: object
    n: int
    hill: tuple
    rank: tuple
    survival: np.ndarray = field(repr=False)
    plateau: np.ndarray = field(default=None, repr=False)
    plateau_level: tuple = None
    beta: float = None

    def to_dict(self):
        d = {"direction": self.direction if isinstance(self.direction, str) else [float(v) for v in self.direction],
             "n": self.n, "hill": {"estimate": self.hill[0], "se": self.hill[1], "k": self.hill[2]},
             "rank_regression": {"estimate": self.rank[0], "se": self.rank[1]}, "beta": self.beta}
        if self.plateau_level is not None:
            d["plateau"] = {"level": self.plateau_level[0], "se": self.plateau_level[1]}
        return d


def tail_report(R, direction="radial", beta=None, k=None, points=50):
    """Tail report for ``|R|`` (``"radial"``) or for the positive part of ``xR``."""
    R = np.asarray(R, dtype=float)
    if R.ndim == 1:
        R = R[:, None]
    n = R.shape[0]
    if isinstance(direction, str):
        if direction != "radial":
            raise ConfigError(f"unknown direction {direction!r}")
        x = np.linalg.norm(R, axis=1)
        x = x[x > 0]
    else:
        u = np.asarray(direction, dtype=float)
        u = u / np.linalg.norm(u)
        x = R @ u
        x = x[x > 0]
    k = default_k(x.size) if k is None else k
    h = hill_estimate(x, k)
    rk = rank_regression(x, k)
    t = tail_grid(x, points)
    p, se = survival_curve(x, t)
    p, se = p * x.size / n, se * x.size / n
    surv = np.column_stack([t, p, se])
    rep = TailReport(direction, n, (h[0], h[1], k), rk, surv, beta=beta)
    if beta is not None:
        tt, v, vse, lvl, lse = plateau(x, beta, n)
        rep.plateau = np.column_stack([tt, v, vse])
        rep.plateau_level = (lvl, lse)
    return rep


# ----------------------------------------------------------------------
# limiting constants


@dataclass
class ConstantEstimate:
    value: float
    se: float
    method: str
    inputs_hash: str = ""
    direction: object = None
    degenerate: bool = False
    details: dict = field(default_factory=dict)

    def to_dict(self):
        d = {"method": self.method, "value": self.value, "se": self.se,
             "inputs_hash": self.inputs_hash, "degenerate": self.degenerate}
        if self.direction is not None:
            d["direction"] = self.direction if isinstance(self.direction, str) else [float(v) for v in self.direction]
        d.update(self.details)
        return d


def inputs_hash(*parts):
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(np.ascontiguousarray(p).tobytes())
        else:
            h.update(repr(p).encode())
    return h.hexdigest()


def paired_terms(pool, R, seed):
    """Pair every pool sample with ``N`` solution samples.

    Returns ``(V, U)`` with ``V = sum_i C_i R_i + Q`` of shape ``(B, d)``
    and the summands ``U_i = C_i R_i`` of shape ``(B, N, d)``.  Solution
    samples are drawn uniformly with replacement.
    """
    R = np.asarray(R, dtype=float)
    if R.ndim == 1:
        R = R[:, None]
    B, N = pool.C.shape[:2]
    idx = _rng.stream(seed, _rng.TAILS, 0).integers(0, R.shape[0], size=(B, N))
    U = np.einsum("bnij,bnj->bni", pool.C, R[idx])
    V = U.sum(axis=1) + pool.Q
    return V, U


def bracket(V, U, b, y=None):
    """``|yV|^b - sum_i |yU_i|^b`` per sample; ``y=None`` uses Euclidean norms.

    ``y`` may be one direction ``(d,)`` or one direction per sample ``(B, d)``.
    """
    if y is None:
        a, c = np.linalg.norm(V, axis=-1), np.linalg.norm(U, axis=-1)
    elif np.ndim(y) == 1:
        a, c = np.abs(V @ y), np.abs(U @ y)
    else:
        a = np.abs(np.einsum("bd,bd->b", V, y))
        c = np.abs(np.einsum("bnd,bd->bn", U, y))
    return a ** b - (c ** b).sum(axis=-1)


def _nu_directions(solution, size, seed):
    g = _rng.stream(seed, _rng.TAILS, 2).choice(solution.grid.G, size=size, p=solution.nu)
    return solution.grid.nodes[g]


def _ratio_se(num, num_se, den, den_se):
    v = num / den
    return v, abs(v) * np.sqrt((num_se / num) ** 2 + (den_se / den) ** 2) if num != 0 else abs(num_se / den)


def constant_K(spec, beta, solution, l_beta, R, pool, directions=("radial",), seed=0):
    """Implicit-renewal constants ``lim t^beta P(xR > t)`` for each direction ``x``.

    ``K(x) = e(x) / (2 beta N l_beta) * int E[bracket_beta(y)] nu(dy)``.
    The ``nu`` integral is Monte Carlo with one ``nu``-distributed node per
    paired sample.  ``"radial"`` (similarity models only) gives the constant
    of ``P(|R| > t)``: ``E[|V|^beta - sum |U_i|^beta] / (beta N l_beta)``.
    ``l_beta`` is ``(value, SE)``.
    """
    lv, lse = l_beta
    if lv <= 0:
        raise ConfigError("l_beta must be positive")
    V, U = paired_terms(pool, R, seed)
    N = spec.N
    h = inputs_hash(beta, solution.e, solution.nu, lv, np.asarray(R), pool.seed, len(pool), seed)
    out = []
    if not np.any(V) and not np.any(U):
        return [ConstantEstimate(0.0, 0.0, "implicit-renewal-K", h, x, True) for x in directions]
    integral = None
    for x in directions:
        if isinstance(x, str):
            if x != "radial":
                raise ConfigError(f"unknown direction {x!r}")
            if spec.family != "similarity":
                raise UsageError("the radial constant needs a similarity model")
            I, Ise = median_of_means(bracket(V, U, beta))
            val, se = _ratio_se(float(I), float(Ise), beta * N * lv, beta * N * lse)
            out.append(ConstantEstimate(val, se, "implicit-renewal-K", h, "radial", details={"integral": float(I)}))
            continue
        if integral is None:
            Y = _nu_directions(solution, V.shape[0], seed)
            I, Ise = median_of_means(bracket(V, U, beta, Y))
            integral = (float(I), float(Ise))
        xv = np.asarray(x, dtype=float)
        xv = xv / np.linalg.norm(xv)
        e = float(solution.e_at(xv)[0])
        val, se = _ratio_se(integral[0], integral[1], 2 * beta * N * lv, 2 * beta * N * lse)
        out.append(ConstantEstimate(e * val, e * se, "implicit-renewal-K", h, xv,
                                    details={"integral": integral[0], "e": e}))
    return out


def sigma_S(spec, beta, m_beta, R, pool, seed=0):
    """``sigma(S) = E[|V|^beta - sum |U_i|^beta] / m_beta`` for similarity models."""
    if spec.family != "similarity":
        raise UsageError(f"sigma(S) closed form needs a similarity model, not {spec.family!r}")
    mv, mse = m_beta
    if mv <= 0:
        raise ConfigError("m_beta must be positive")
    V, U = paired_terms(pool, R, seed)
    h = inputs_hash(beta, mv, np.asarray(R), pool.seed, len(pool), seed)
    I, Ise = median_of_means(bracket(V, U, beta))
    val, se = _ratio_se(float(I), float(Ise), mv, mse)
    return ConstantEstimate(val, se, "sigma-S", h, "radial", details={"integral": float(I)})


def beta2_constant(spec, solution, l2, pool, directions, beta=2.0, tol=0.05):
    """``lim t^2 P(xR > t) = e(x) / (4 N l_2) * int E(yQ)^2 nu(dy)`` per direction.

    ``beta`` is the estimated tail exponent; it must be within ``tol`` of 2.
    A deterministic ``Q = 0`` returns zero flagged degenerate.
    """
    if abs(beta - 2.0) > tol:
        raise UsageError(f"beta = {beta:.4g} is not within {tol} of 2")
    lv, lse = l2
    Q = pool.Q
    h = inputs_hash(2.0, solution.e, solution.nu, lv, pool.seed, len(pool))
    if not np.any(Q):
        return [ConstantEstimate(0.0, 0.0, "beta2", h, x, True) for x in directions]
    mean = Q.mean(axis=0)
    mse = Q.std(axis=0, ddof=1) / np.sqrt(len(Q))
    if np.any(np.abs(mean) > 4 * mse):
        warnings.warn(f"E Q = {mean} is not zero within SE; the beta=2 formula assumes a centred Q")
    proj = (Q @ solution.grid.nodes.T) ** 2  # (B, G)
    per = proj @ solution.nu
    I, Ise = per.mean(), per.std(ddof=1) / np.sqrt(len(per))
    base, bse = _ratio_se(float(I), float(Ise), 4 * spec.N * lv, 4 * spec.N * lse)
    out = []
    for x in directions:
        xv = np.asarray(x, dtype=float)
        xv = xv / np.linalg.norm(xv)
        e = float(solution.e_at(xv)[0])
        out.append(ConstantEstimate(e * base, e * bse, "beta2", h, xv, details={"integral": float(I), "e": e}))
    return out


# ----------------------------------------------------------------------
# moment identity


@dataclass
class GoldieResult:
    s: float
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    tail_correction: float

    @property
    def combined_se(self):
        return float(np.hypot(self.lhs_se, self.rhs_se))

    @property
    def residual(self):
        return self.lhs - self.rhs


def goldie_directions(d, count=4):
    """Documented direction set: ``count`` nodes of a half grid (equiangular in d=2)."""
    from .spectral import SphereGrid

    if d == 1:
        return np.ones((1, 1))
    return SphereGrid(d, 2 * count).nodes[:count]


def _integrated_tail(x, s, t):
    """``s int_0^inf t^(s-1) P(X > t) dt`` truncated at ``t[-1]``.

    Below ``t[0]`` the integral equals ``E[min(X, t0)^s]`` exactly; on the
    grid the survival function is integrated by the trapezoid rule in
    ``log t``.
    """
    x = np.sort(x)
    p = 1.0 - np.searchsorted(x, t, side="right") / x.size
    low = np.mean(np.minimum(x, t[0]) ** s)
    f = s * t ** s * p
    return low + np.trapezoid(f, np.log(t))


def goldie_identity_residual(spec, s, R, pool, alpha=None, beta=None, directions=None,
                             t_grid=None, seed=0):
    """Both sides of the moment identity at exponent ``s``, averaged over directions.

    lhs: ``E[|yV|^s - sum_i |yU_i|^s]`` over paired samples.
    rhs: ``s int t^(s-1) (P(|yR| > t) - N P(|yCR| > t)) dt`` with the first
    law from the solution samples themselves and the second from the paired
    summands, on a 200-point geometric grid from the 1st to the 99.99th
    percentile.  Beyond the grid both tails are extrapolated as Pareto with
    index ``beta``; the correction is added to rhs and also to its SE.

    Returns None (with a warning) unless ``alpha < s < beta``.
    """
    if alpha is None or beta is None or not alpha < s < beta:
        warnings.warn(f"moment identity skipped: s={s} outside (alpha, beta) = ({alpha}, {beta})")
        return None
    R = np.asarray(R, dtype=float)
    if R.ndim == 1:
        R = R[:, None]
    Y = goldie_directions(spec.d) if directions is None else np.atleast_2d(directions)
    V, U = paired_terms(pool, R, seed)
    N = spec.N
    B = V.shape[0]
    lhs_v = np.zeros(B)
    rhs, rhs_var, corr_tot = 0.0, 0.0, 0.0
    for y in Y:
        y = y / np.linalg.norm(y)
        lhs_v += bracket(V, U, s, y) / len(Y)
        a = np.abs(R @ y)
        c = np.abs(U @ y).ravel()
        both = np.concatenate([a, c])
        if t_grid is None:
            lo, hi = np.percentile(both, [1, 99.99])
            t = np.geomspace(max(lo, 1e-300), hi, GOLDIE_POINTS)
        else:
            t = np.asarray(t_grid, dtype=float)
            lo, hi = np.percentile(both, [1, 99.99])
            if t[0] > lo or t[-1] < hi:
                raise EstimationError("t-grid does not cover the 1st-99.99th percentile range of the samples")
        ia = _integrated_tail(a, s, t)
        ic = _integrated_tail(c, s, t)
        th = t[-1]
        pa, pc = np.mean(a > th), np.mean(c > th)
        corr = th ** s * s / (beta - s) * (pa - N * pc)
        rhs += (ia - N * ic + corr) / len(Y)
        corr_tot += corr / len(Y)
        _, sa = median_of_means(np.minimum(a, th) ** s)
        _, sc = median_of_means(np.minimum(c, th) ** s)
        rhs_var += (sa ** 2 + (N * sc) ** 2) / len(Y) ** 2
    lhs, lhs_se = median_of_means(lhs_v)
    rhs_se = float(np.sqrt(rhs_var + corr_tot ** 2))
    return GoldieResult(s, float(lhs), float(lhs_se), float(rhs), rhs_se, float(corr_tot))


# ----------------------------------------------------------------------
# moment divergence


@dataclass
class DivergenceProbe:
    s: float
    sizes: np.ndarray
    running: np.ndarray
    ratio: float
    verdict: str
    label: str = "heuristic"


def moment_divergence_probe(R, s_grid, levels=10, min_blocks=4, threshold=0.9, replicates=8, seed=0):
    """Heuristic test for ``E|R|^s = infinity`` from disjoint subsamples.

    After one random shuffle the samples are cut into ``2^j`` disjoint
    blocks for ``j = min_blocks_exp .. levels``; the median block mean of
    ``|R|^s`` is the typical sample mean at block size ``n / 2^j``.  For a
    tail index ``b`` its increments per doubling of the block size scale
    like ``2^(s/b - 1)``: shrinking when the moment is finite, level or
    growing when it is infinite.  The verdict is
    ``"divergence-consistent"`` when the fitted increment ratio is at least
    ``threshold``, else ``"convergent"``.  Median curves are averaged
    over ``replicates`` independent shuffles.
    """
    R = np.asarray(R, dtype=float)
    x = np.linalg.norm(R, axis=1) if R.ndim == 2 else np.abs(R)
    rng = _rng.stream(seed, _rng.TAILS, 3)
    orders = [rng.permutation(x.size) for _ in range(replicates)]
    n = x.size
    j0 = int(np.ceil(np.log2(min_blocks)))
    js = np.arange(levels, j0 - 1, -1)
    sizes = n // 2 ** js
    if sizes[0] < 10:
        raise ConfigError("too few samples for the requested number of levels")
    with np.errstate(divide="ignore"):
        logx = np.log(x)
    out = []
    for s in np.atleast_1d(s_grid):
        med = np.zeros(sizes.size)
        for o in orders:
            v = np.exp(s * logx[o])
            med += [np.median(v[: m * 2 ** j].reshape(2 ** j, m).mean(axis=1))
                    for j, m in zip(js, sizes)]
        med /= replicates
        inc = np.diff(med)
        if np.all(inc <= 0):
            ratio = 0.0
        else:
            keep = inc > 0
            k = np.arange(inc.size)[keep]
            ratio = float(np.exp(np.polyfit(k, np.log(inc[keep]), 1)[0])) if keep.sum() > 1 else 0.0
        verdict = "divergence-consistent" if ratio >= threshold else "convergent"
        out.append(DivergenceProbe(float(s), sizes, med, ratio, verdict))
    return out


def positivity_gate(K, probe):
    """Flag a conflict: ``K`` positive at 3 SE while the probe at ``beta`` says convergent."""
    return bool(K.value > 3 * K.se and probe.verdict == "convergent")
