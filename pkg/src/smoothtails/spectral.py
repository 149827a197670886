"""Structure function ``m(s)``, its roots and the transfer operators ``T_s``.

``m(s) = N lim_n (E ||Pi_n||^s)^(1/n)`` is estimated two ways:

* directly, from ``B`` independent path products of a fixed length ``n``;
* as ``N kappa(s)``, where ``kappa(s)`` is the dominant eigenvalue of the
  transfer operator ``T_s f(x) = E[f((xC)~) |xC|^s]`` discretized on a
  sphere grid with nearest-node interpolation.

The direct estimator is exact for deterministic weights but is dominated by
its largest terms once ``n s^2 Var log ||C||`` is more than a few units; the
operator estimator has no such problem and is the default for root finding.

Row-vector convention: ``xC`` is the vector ``x`` multiplied from the left,
i.e. ``C^T x`` in column form.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import SphericalVoronoi, cKDTree
from scipy.special import logsumexp

from . import _rng
from . import io as _io
from .errors import ConfigError, ConsistencyError, ConvergenceError, EstimationError, UsageError
from .models import SamplePool, maxwell_inelasticity, uniform_sphere

SPECTRAL_SCHEMA = "smoothtails.spectral/1"
EXPONENT_SCHEMA = "smoothtails.exponents/1"
DENSE_MAX = 3000
ROOT_TOL = 1e-3
FD_STEP = 1e-2
SE_BATCHES = 8
_GOLDEN = np.pi * (3.0 - np.sqrt(5.0))


# ----------------------------------------------------------------------
# grids


class SphereGrid:
    """Nodes on the unit sphere with quadrature weights summing to one.

    ``d = 1``: the two points ``+-1``.  ``d = 2``: ``G`` equiangular nodes.
    ``d = 3``: a Fibonacci lattice on the upper hemisphere together with its
    antipodes, weighted by spherical Voronoi cell areas.  ``d > 3``: a seeded
    normalized-Gaussian cloud plus antipodes with equal weights.  Every grid
    is centrally symmetric: node ``g + G/2`` is ``-node[g]``.
    """

    def __init__(self, d, G, seed=0):
        if d < 1:
            raise ConfigError("d must be >= 1")
        if d == 1:
            G = 2
        if G < 2 or G % 2:
            raise ConfigError("grid size must be even and >= 2")
        if d >= 3 and G < 2 * d:
            raise ConfigError(f"grid size must be >= 2d = {2 * d} to span the sphere")
        self.d, self.G, self.seed = d, G, seed
        half = G // 2
        if d == 1:
            nodes = np.array([[1.0], [-1.0]])
        elif d == 2:
            th = 2 * np.pi * np.arange(G) / G
            nodes = np.column_stack([np.cos(th), np.sin(th)])
        else:
            if d == 3:
                k = np.arange(half)
                z = (k + 0.5) / half
                rho = np.sqrt(1 - z * z)
                top = np.column_stack([rho * np.cos(_GOLDEN * k), rho * np.sin(_GOLDEN * k), z])
            else:
                top = uniform_sphere(_rng.stream(seed, _rng.GRID), half, d)
            nodes = np.vstack([top, -top])
        nodes /= np.linalg.norm(nodes, axis=1, keepdims=True)
        if d == 3:
            w = SphericalVoronoi(nodes).calculate_areas()
        else:
            w = np.ones(G)
        self.nodes = nodes
        self.weights = w / w.sum()
        self._tree = cKDTree(nodes) if d >= 3 else None
        for a in (self.nodes, self.weights):
            a.flags.writeable = False

    def antipode(self, g):
        return (np.asarray(g) + self.G // 2) % self.G

    def nearest(self, y):
        """Index of the node closest in angle to each (nonzero) row of ``y``."""
        y = np.asarray(y, dtype=float)
        if self.d == 1:
            return np.where(y[..., 0] >= 0, 0, 1)
        if self.d == 2:
            th = np.arctan2(y[..., 1], y[..., 0])
            return np.rint(th * (self.G / (2 * np.pi))).astype(np.int64) % self.G
        y = y / np.linalg.norm(y, axis=-1, keepdims=True)
        return self._tree.query(y, workers=-1)[1]


# ----------------------------------------------------------------------
# direct estimator


def estimate_m_direct(log_norms, s, N, n):
    """``m(s) = N (mean ||Pi_n||^s)^(1/n)`` from path log-norms, with delta-method SE.

    ``log_norms`` are ``log ||Pi_n||`` for ``B`` independent products
    (``-inf`` for zero products).  The mean is reduced in the log domain.
    """
    ln = np.asarray(log_norms, dtype=float)
    B = ln.size
    if B < 2:
        raise ConfigError("need at least two path products")
    if s < 0 or n < 1:
        raise ConfigError("need s >= 0 and n >= 1")
    ok = np.isfinite(ln)
    if not ok.any():
        raise EstimationError("all path products vanish")
    a = s * ln[ok]
    lse = logsumexp(a)
    log_mean = lse - np.log(B)
    m = N * np.exp(log_mean / n)
    # relative SE of the mean, computed on the rescaled terms
    w = np.zeros(B)
    w[ok] = np.exp(a - a.max())
    rel = w.std(ddof=1) / (w.mean() * np.sqrt(B))
    return float(m), float(m * rel / n)


def log_moment_curve(log_norms, s_values):
    """``s -> log mean ||Pi_n||^s`` on a fixed pool (convex in ``s``)."""
    ln = np.asarray(log_norms, dtype=float)
    ln = ln[np.isfinite(ln)]
    return np.array([logsumexp(s * ln) for s in np.atleast_1d(s_values)]) - np.log(len(log_norms))


# ----------------------------------------------------------------------
# transfer operators


class TransferTable:
    """Targets and log-lengths of ``x_g C_b`` for every node and pool branch.

    The table is independent of ``s``; operators for any ``s`` are obtained
    by a weighted histogram.  Terms with ``x_g C_b = 0`` are dropped.
    Columns are ordered by pool sample, so a column slice is a sub-pool.
    """

    def __init__(self, grid, pool, threads=None, chunk=None):
        C = pool.branches()
        self.grid, self.pool = grid, pool
        self.N = pool.spec.N
        G, BN = grid.G, C.shape[0]
        self.width = BN
        itype = np.int16 if G <= np.iinfo(np.int16).max else np.int32
        self.target = np.empty((G, BN), dtype=itype)
        self.log_len = np.empty((G, BN))
        chunk = chunk or max(1, (1 << 22) // max(BN, 1))
        parts = _rng.blocks(G, chunk)

        def work(part):
            _, a, b = part
            y = np.einsum("gi,bij->gbj", grid.nodes[a:b], C)
            r = np.linalg.norm(y, axis=2)
            zero = r == 0
            r[zero] = 1.0
            y[zero] = grid.nodes[0]
            with np.errstate(divide="ignore"):
                lr = np.where(zero, -np.inf, np.log(r))
            self.target[a:b] = grid.nearest(y)
            self.log_len[a:b] = lr

        _rng.run_blocks(work, parts, threads)
        self.target.flags.writeable = False
        self.log_len.flags.writeable = False

    def columns(self, batch, batches):
        """Column slice of sub-pool ``batch`` out of ``batches`` (whole samples)."""
        B = len(self.pool)
        edges = np.linspace(0, B, batches + 1).astype(int) * self.N
        return slice(edges[batch], edges[batch + 1])

    def operator(self, s, cols=slice(None)):
        """Discretized ``T_s`` built from the branches in ``cols``."""
        G = self.grid.G
        vals = np.zeros((G, G))
        width = self.target[:1, cols].shape[1]
        step = max(1, (1 << 21) // max(width, 1))
        for a in range(0, G, step):
            b = min(a + step, G)
            tgt = self.target[a:b, cols]
            ll = self.log_len[a:b, cols]
            live = np.isfinite(ll)
            if s == 0:
                w = live.astype(float)
                denom = np.maximum(live.sum(axis=1), 1)
            else:
                w = np.exp(s * np.where(live, ll, -np.inf))
                denom = np.full(b - a, width)
            flat = (np.arange(b - a)[:, None] * G + tgt).ravel()
            block = np.bincount(flat, weights=w.ravel(), minlength=(b - a) * G)
            vals[a:b] = block.reshape(b - a, G) / denom[:, None]
        if G > DENSE_MAX:
            vals = sparse.csr_matrix(vals)
        return TransferOperator(s, vals, self.grid, self.N)


@dataclass
class TransferOperator:
    """``G x G`` nonnegative matrix ``T[g, h]`` approximating ``T_s`` on a grid."""

    s: float
    matrix: object
    grid: SphereGrid
    N: int = 2

    def apply(self, f):
        return self.matrix @ np.asarray(f, dtype=float)

    def adjoint(self, nu):
        return self.matrix.T @ np.asarray(nu, dtype=float)

    def row_sums(self):
        return np.asarray(self.matrix.sum(axis=1)).ravel()


def build_operator(spec, s, grid, pool, threads=None):
    """Discretized transfer operator at ``s`` from a fixed pool."""
    if len(pool) == 0:
        raise ConfigError("empty pool")
    return TransferTable(grid, pool, threads).operator(s)


@dataclass
class SpectralSolution:
    """Dominant eigen-elements of a discretized transfer operator."""

    s: float
    kappa: float
    e: np.ndarray
    nu: np.ndarray
    residual: float
    iterations: int
    grid: SphereGrid = field(repr=False, default=None)
    N: int = 2
    spec_hash: str = ""

    @property
    def m(self):
        return self.N * self.kappa

    def e_at(self, x):
        """Eigenfunction at arbitrary directions (nearest node)."""
        x = np.atleast_2d(x)
        return self.e[self.grid.nearest(x)]

    def to_dict(self):
        return {"schema": SPECTRAL_SCHEMA, "spec_hash": self.spec_hash, "s": self.s,
                "kappa": self.kappa, "m": self.m, "N": self.N, "residual": self.residual,
                "iterations": self.iterations, "d": self.grid.d, "G": self.grid.G,
                "grid_seed": self.grid.seed, "e": self.e, "nu": self.nu}

    @classmethod
    def from_dict(cls, rec):
        if rec.get("schema") != SPECTRAL_SCHEMA:
            raise ConfigError(f"not a spectral record: {rec.get('schema')!r}")
        grid = SphereGrid(rec["d"], rec["G"], rec.get("grid_seed", 0))
        return cls(rec["s"], rec["kappa"], np.asarray(rec["e"]), np.asarray(rec["nu"]),
                   rec["residual"], rec["iterations"], grid, rec["N"], rec.get("spec_hash", ""))

    def eigen_csv(self):
        cols = [f"x{i}" for i in range(self.grid.d)] + ["weight", "e", "nu"]
        rows = np.column_stack([self.grid.nodes, self.grid.weights, self.e, self.nu])
        return cols, rows


def power_iterate(op, tol=1e-10, max_iter=20000, spec_hash=""):
    """Perron eigenvalue, right eigenvector ``e`` and left eigenvector ``nu`` of ``op``.

    Iterates ``T + c`` with a small positive shift ``c`` (a tenth of the
    largest row sum), which has the same eigenvectors but removes any
    periodic part of the spectrum from the unit circle.  Both iterates stay
    entrywise positive.  ``nu`` is scaled to total mass one and ``e`` so
    that ``sum e nu = 1``.
    """
    T = op.matrix
    G = T.shape[0]
    shift = 0.1 * float(np.max(op.row_sums()))
    if shift == 0:
        raise EstimationError(f"transfer operator at s={op.s} is identically zero")
    e = np.ones(G)
    nu = np.full(G, 1.0 / G)
    res = np.inf
    for it in range(1, max_iter + 1):
        Te = T @ e
        kappa = float(e @ Te / (e @ e))
        nT = T.T @ nu
        res_e = np.max(np.abs(Te - kappa * e)) / np.max(e)
        kn = float(nu @ nT / (nu @ nu))
        res_n = np.max(np.abs(nT - kn * nu)) / np.max(nu)
        res = max(res_e, res_n)
        if res <= tol:
            break
        e = Te + shift * e
        e /= np.max(e)
        nu = nT + shift * nu
        nu /= nu.sum()
    else:
        raise ConvergenceError(f"power iteration at s={op.s} did not converge", res, max_iter)
    nu = nu / nu.sum()
    e = e / float(e @ nu)
    return SpectralSolution(float(op.s), kappa, e, nu, float(res), it, op.grid, op.N, spec_hash)


def spectral_solution(spec, s, grid, pool, tol=1e-10, max_iter=20000, threads=None, table=None):
    table = table if table is not None else TransferTable(grid, pool, threads)
    return power_iterate(table.operator(s), tol, max_iter, spec.digest())


# ----------------------------------------------------------------------
# exponents


@dataclass
class ExponentReport:
    alpha: float = None
    beta: float = None
    s_inf: object = "unbounded-within-scan"
    m_curve: list = field(default_factory=list)
    m_prime_beta: float = None
    method: str = "operator"
    spec_hash: str = ""
    message: str = ""

    CSV_COLUMNS = ("s", "m_hat", "se", "kappa", "residual", "iterations")

    def curve_rows(self):
        return np.array([[r[c] for c in self.CSV_COLUMNS] for r in self.m_curve], dtype=float)

    def to_dict(self):
        return {"schema": EXPONENT_SCHEMA, "spec_hash": self.spec_hash, "method": self.method,
                "alpha": self.alpha, "beta": self.beta, "s_inf": self.s_inf,
                "m_prime_beta": self.m_prime_beta, "message": self.message,
                "m_curve": [dict(r) for r in self.m_curve]}

    @classmethod
    def from_dict(cls, rec):
        if rec.get("schema") != EXPONENT_SCHEMA:
            raise ConfigError(f"not an exponent record: {rec.get('schema')!r}")
        return cls(rec["alpha"], rec["beta"], rec["s_inf"], rec["m_curve"], rec["m_prime_beta"],
                   rec["method"], rec.get("spec_hash", ""), rec.get("message", ""))


class MCurve:
    """Evaluator of ``m(s)`` (with SE) backed by one pool, for either method."""

    def __init__(self, spec, pool=None, method="operator", grid=None, n=30, B=100_000,
                 seed=0, tol=1e-10, threads=None, batches=SE_BATCHES):
        self.spec, self.method, self.n = spec, method, n
        self.tol = tol
        self.batches = batches
        if method == "direct":
            from .wbp import path_log_norms

            self.log_norms = path_log_norms(spec, n, B, seed, threads)
        elif method == "operator":
            pool = pool if pool is not None else SamplePool.generate(spec, seed, B, threads)
            grid = grid if grid is not None else SphereGrid(spec.d, default_grid_size(spec.d), seed)
            self.table = TransferTable(grid, pool, threads)
        else:
            raise ConfigError(f"unknown method {method!r}")
        self.cache = {}

    def __call__(self, s):
        s = float(s)
        if s in self.cache:
            return self.cache[s]
        if self.method == "direct":
            m, se = estimate_m_direct(self.log_norms, s, self.spec.N, self.n)
            row = {"s": s, "m_hat": m, "se": se, "kappa": m / self.spec.N,
                   "residual": 0.0, "iterations": 0}
        else:
            sol = power_iterate(self.table.operator(s), self.tol)
            parts = []
            for j in range(self.batches):
                op = self.table.operator(s, self.table.columns(j, self.batches))
                parts.append(power_iterate(op, self.tol).kappa)
            se = self.spec.N * np.std(parts, ddof=1) / np.sqrt(self.batches)
            row = {"s": s, "m_hat": sol.m, "se": float(se), "kappa": sol.kappa,
                   "residual": sol.residual, "iterations": sol.iterations}
        self.cache[s] = row
        return row

    def m(self, s):
        return self(s)["m_hat"]


def default_grid_size(d):
    return {1: 2, 2: 64, 3: 400}.get(d, 1000)


def _bisect(f, a, b, tol):
    fa = f(a) - 1.0
    while b - a > tol:
        c = 0.5 * (a + b)
        fc = f(c) - 1.0
        if (fc > 0) == (fa > 0):
            a, fa = c, fc
        else:
            b = c
    return 0.5 * (a + b)


def find_exponents(spec, s_lo=0.05, s_hi=6.0, step=0.25, pool=None, method="operator",
                   curve=None, tol=ROOT_TOL, **kw):
    """Roots ``alpha <= beta`` of ``m(s) = 1`` on ``[s_lo, s_hi]``.

    ``m`` is scanned on a grid of spacing ``step``; each bracketed root is
    refined by bisection to ``tol``.  ``alpha`` is the crossing from above
    to below 1 left of the scanned minimum, ``beta`` the crossing back above
    1 to its right; a root without a bracket is reported as absent.
    ``m'(beta)`` is a Richardson-extrapolated central difference with step
    ``1e-2``.
    """
    hint = spec.s_max
    if hint is not None and s_hi >= hint:
        raise ConfigError(f"scan end {s_hi} must stay below the declared moment bound {hint}")
    if not s_lo < s_hi or step <= 0:
        raise ConfigError("need s_lo < s_hi and step > 0")
    mc = curve if curve is not None else MCurve(spec, pool, method, **kw)
    grid = np.arange(s_lo, s_hi + step / 2, step)
    vals = np.array([mc.m(s) for s in grid])
    if not np.all(np.isfinite(vals)):
        raise EstimationError("m(s) is not finite on the whole scan range")
    rep = ExponentReport(method=method, spec_hash=spec.digest(),
                         s_inf=float(hint) if hint is not None else "unbounded-within-scan")
    if np.all(vals > 1):
        rep.message = "no exponents in range: m(s) > 1 on the whole scan"
    k = int(np.argmin(vals))
    left = np.nonzero((vals[:k] > 1) & (vals[1:k + 1] <= 1))[0]
    if left.size:
        i = left[-1]
        rep.alpha = _bisect(mc.m, grid[i], grid[i + 1], tol)
    right = np.nonzero((vals[k:-1] <= 1) & (vals[k + 1:] > 1))[0]
    if right.size:
        i = k + right[0]
        rep.beta = _bisect(mc.m, grid[i], grid[i + 1], tol)
        h = FD_STEP
        d1 = (mc.m(rep.beta + h) - mc.m(rep.beta - h)) / (2 * h)
        d2 = (mc.m(rep.beta + h / 2) - mc.m(rep.beta - h / 2)) / h
        rep.m_prime_beta = float((4 * d2 - d1) / 3)
    rep.m_curve = [mc(s) for s in sorted(mc.cache)]
    return rep


# ----------------------------------------------------------------------
# renewal normalizers


def _l_terms(table, sol, beta, cols=slice(None)):
    ll = table.log_len[:, cols]
    live = np.isfinite(ll)
    x = np.where(live, ll, 0.0)
    term = np.where(live, sol.e[table.target[:, cols]] * np.exp(beta * x) * x, 0.0)
    return term.mean(axis=1) @ sol.nu


def compute_l_beta(spec, beta, solution, pool, table=None, tol=1e-8, batches=SE_BATCHES):
    """``l_beta = int E[e((yC)~) |yC|^beta log|yC|] nu(dy)`` with a batch SE.

    Raises ConsistencyError when the estimate is not positive at 3 SE.
    """
    if solution.residual > tol:
        raise ConfigError(f"spectral solution residual {solution.residual:.3g} exceeds {tol:g}")
    if abs(solution.s - beta) > 1e-12:
        raise ConfigError(f"spectral solution is for s={solution.s}, not {beta}")
    table = table if table is not None else TransferTable(solution.grid, pool)
    val = float(_l_terms(table, solution, beta))
    parts = [_l_terms(table, solution, beta, table.columns(j, batches)) for j in range(batches)]
    se = float(np.std(parts, ddof=1) / np.sqrt(batches))
    if val + 3 * se <= 0:
        raise ConsistencyError(f"l_beta = {val:.6g} (SE {se:.3g}) is not positive: wrong beta or spectral solution")
    return val, se


def compute_m_beta_similarity(spec, beta, pool, check=True):
    """``m_beta = N E[||C||^beta log ||C||]`` for similarity models, with SE."""
    if spec.family != "similarity":
        raise UsageError(f"m_beta closed form needs a similarity model, not {spec.family!r}")
    t = np.linalg.norm(pool.C, ord=2, axis=(2, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(t > 0, t ** beta * np.log(t), 0.0).sum(axis=1)
    val = float(f.mean())
    se = float(f.std(ddof=1) / np.sqrt(len(f)))
    if check and val + 3 * se <= 0:
        raise ConsistencyError(f"m_beta = {val:.6g} (SE {se:.3g}) is not positive")
    return val, se


def maxwell_closed_form(spec, s, size=1_000_000, seed=0, log_weight=False):
    """Monte Carlo of ``E[(U|Y_1|)^s + |e_1 - U Y_1 Y|^s]`` for the maxwell family.

    This is ``m(s) = 2 kappa(s)``: for a unit ``x``, ``xC_1 = U<x,Y>Y`` and
    ``xC_2 = x - U<x,Y>Y``, and by rotation invariance ``x = e_1``.  With
    ``log_weight`` each term is multiplied by its log, giving the integrand
    of ``2 l_s``.  Returns ``(value, SE)``.
    """
    if spec.family != "maxwell":
        raise UsageError("maxwell_closed_form needs a maxwell model")
    rng = _rng.stream(seed, _rng.TAILS, 1)
    u = maxwell_inelasticity(spec, rng, size)
    y = uniform_sphere(rng, size, spec.d)
    a = u * np.abs(y[:, 0])
    v = -(u * y[:, 0])[:, None] * y
    v[:, 0] += 1.0
    b = np.linalg.norm(v, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = a ** s + b ** s
        if log_weight:
            f = np.where(a > 0, a ** s * np.log(a), 0.0) + np.where(b > 0, b ** s * np.log(b), 0.0)
    return float(f.mean()), float(f.std(ddof=1) / np.sqrt(size))


def write_m_curve(path, report, manifest_hash=None):
    header = [f"manifest={manifest_hash}"] if manifest_hash else None
    _io.write_csv(path, list(ExponentReport.CSV_COLUMNS), report.curve_rows(), header)
