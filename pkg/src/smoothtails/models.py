"""Weight-vector model families, seeded sample pools and algebraic side conditions.

A model is the joint law of ``(C_1, ..., C_N, Q)``: ``N`` random real
``d x d`` matrices and a random ``d``-vector.  Four families are supported:

``general``
    i.i.d. Gaussian entries, per-branch mean and scale, with a condition
    number cap (draws above the cap are resampled and counted).
``similarity``
    ``C_i = t_i k_i`` with a random scale ``t_i > 0`` and an orthogonal
    ``k_i`` (Haar, identity, fixed angle in d=2, or a fixed matrix).
``maxwell``
    the inelastic Maxwell collision model ``C_1 = U Y^T Y``,
    ``C_2 = Id - U Y^T Y`` with ``Y`` uniform on the sphere.
``diagonal``
    deterministic ``C_i = diag(N^-e_1, ..., N^-e_d)``.

All families share the immigration term keys ``q.*``.
"""
from dataclasses import dataclass, field
import hashlib

import numpy as np

from . import _rng
from .errors import ConfigError

FAMILIES = ("general", "similarity", "maxwell", "diagonal")
_ALIASES = {"general-matrix": "general", "diagonal-deterministic": "diagonal"}

ORTHO_TOL = 1e-10
SINGULAR_RTOL = 1e-10


def _floats(value):
    if isinstance(value, str):
        parts = [p for p in value.replace(",", " ").split() if p]
        try:
            return tuple(float(p) for p in parts)
        except ValueError:
            raise ConfigError(f"not a list of numbers: {value!r}") from None
    return tuple(float(v) for v in np.atleast_1d(value))


def _float(value):
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"not a number: {value!r}") from None


def _str(value):
    return str(value).strip()


# key -> (families it is valid for, parser); None means every family
SCHEMA = {
    "c.mean": (("general",), _floats),
    "c.scale": (("general",), _floats),
    "c.cond_cap": (("general",), _float),
    "t.dist": (("similarity",), _str),
    "t.mu": (("similarity",), _float),
    "t.sigma": (("similarity",), _float),
    "t.a": (("similarity",), _float),
    "t.b": (("similarity",), _float),
    "t.p": (("similarity",), _float),
    "t.value": (("similarity",), _float),
    "k.dist": (("similarity",), _str),
    "k.angle": (("similarity",), _float),
    "k.matrix": (("similarity",), _floats),
    "u.dist": (("maxwell",), _str),
    "u.sigma": (("maxwell",), _float),
    "u.a": (("maxwell",), _float),
    "u.b": (("maxwell",), _float),
    "diag.exponents": (("diagonal",), _floats),
    "q.dist": (None, _str),
    "q.mean": (None, _floats),
    "q.scale": (None, _float),
    "q.value": (None, _floats),
    "q.r": (None, _floats),
}

_DEFAULTS = {
    "general": {"c.mean": (0.0,), "c.scale": (1.0,), "c.cond_cap": 1e6},
    "similarity": {"t.dist": "lognormal", "k.dist": "haar"},
    "maxwell": {"u.dist": "twopoint", "u.a": 0.5, "u.b": 1.5},
    "diagonal": {},
}


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of the law of ``(C_1, ..., C_N, Q)``.

    ``params`` holds the family keys (``t.*``, ``k.*``, ...) and the
    immigration keys (``q.*``); see :data:`SCHEMA`.  Values may be given as
    strings (as read from a config file) or as numbers.
    """

    family: str
    d: int
    N: int = 2
    params: dict = field(default_factory=dict)
    s_max: float = None

    def __post_init__(self):
        family = _ALIASES.get(self.family, self.family)
        if family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "family", family)
        try:
            d, n = int(self.d), int(self.N)
        except (TypeError, ValueError):
            raise ConfigError("d and N must be integers") from None
        if d < 1:
            raise ConfigError(f"d must be >= 1, got {d}")
        if n < 2:
            raise ConfigError(f"N must be > 1 (the smoothing transform needs at least two branches), got {n}")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "N", n)
        if self.s_max is not None:
            object.__setattr__(self, "s_max", _float(self.s_max))

        parsed = dict(_DEFAULTS[family])
        parsed.setdefault("q.dist", "zero")
        for key, value in self.params.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
            fams, parse = SCHEMA[key]
            if fams is not None and family not in fams:
                raise ConfigError(f"key {key!r} is not valid for family {family!r}")
            parsed[key] = parse(value)
        object.__setattr__(self, "params", parsed)
        self._validate()

    # ------------------------------------------------------------------
    def get(self, key, default=None):
        return self.params.get(key, default)

    def _need(self, *keys):
        missing = [k for k in keys if k not in self.params]
        if missing:
            raise ConfigError(f"{self.family} model needs keys {missing}")

    def _branch_values(self, key):
        v = self.params[key]
        if len(v) == 1:
            return np.full(self.N, v[0])
        if len(v) != self.N:
            raise ConfigError(f"{key} needs 1 or N={self.N} values, got {len(v)}")
        return np.asarray(v)

    def _vector(self, key):
        v = self.params[key]
        if len(v) == 1:
            return np.full(self.d, v[0])
        if len(v) != self.d:
            raise ConfigError(f"{key} needs 1 or d={self.d} values, got {len(v)}")
        return np.asarray(v)

    def _validate(self):
        p, fam = self.params, self.family
        if fam == "general":
            if np.any(self._branch_values("c.scale") < 0):
                raise ConfigError("c.scale must be >= 0")
            self._branch_values("c.mean")
            if p["c.cond_cap"] <= 1:
                raise ConfigError("c.cond_cap must exceed 1")
        elif fam == "similarity":
            dist = p["t.dist"]
            if dist == "lognormal":
                self._need("t.mu", "t.sigma")
                if p["t.sigma"] < 0:
                    raise ConfigError("t.sigma must be >= 0")
            elif dist == "twopoint":
                self._need("t.a", "t.b", "t.p")
                if min(p["t.a"], p["t.b"]) <= 0 or not 0 <= p["t.p"] <= 1:
                    raise ConfigError("two-point scale needs t.a, t.b > 0 and 0 <= t.p <= 1")
            elif dist == "const":
                self._need("t.value")
                if p["t.value"] <= 0:
                    raise ConfigError("t.value must be positive")
            else:
                raise ConfigError(f"unsupported t.dist {dist!r}")
            kd = p["k.dist"]
            if kd == "angle":
                self._need("k.angle")
                if self.d != 2:
                    raise ConfigError("k.dist=angle is only defined for d=2")
            elif kd == "matrix":
                self._need("k.matrix")
                k = np.asarray(p["k.matrix"])
                if k.size != self.d * self.d:
                    raise ConfigError(f"k.matrix needs d*d={self.d * self.d} entries")
                k = k.reshape(self.d, self.d)
                if np.max(np.abs(k @ k.T - np.eye(self.d))) > ORTHO_TOL:
                    raise ConfigError("k.matrix is not orthogonal (k k^T != Id within 1e-10)")
            elif kd not in ("haar", "identity"):
                raise ConfigError(f"unsupported k.dist {kd!r}")
        elif fam == "maxwell":
            if self.N != 2:
                raise ConfigError("the maxwell family has exactly N=2 branches")
            ud = p["u.dist"]
            if ud == "lognormal":
                self._need("u.sigma")
                if p["u.sigma"] <= 0:
                    raise ConfigError("u.sigma must be positive")
            elif ud == "twopoint":
                self._need("u.a", "u.b")
                maxwell_twopoint_p(p["u.a"], p["u.b"])
            else:
                raise ConfigError(f"unsupported u.dist {ud!r}")
        elif fam == "diagonal":
            if "diag.exponents" in p:
                self._vector("diag.exponents")

        qd = p["q.dist"]
        if qd == "gaussian":
            if p.get("q.scale", 1.0) < 0:
                raise ConfigError("q.scale must be >= 0")
            if "q.mean" in p:
                self._vector("q.mean")
        elif qd == "const":
            self._need("q.value")
            self._vector("q.value")
        elif qd == "compensate":
            self._need("q.r")
            self._vector("q.r")
        elif qd != "zero":
            raise ConfigError(f"unsupported q.dist {qd!r}")

    # ------------------------------------------------------------------
    def to_text(self):
        """Canonical ``key=value`` serialization (stable key order)."""
        lines = [f"family={self.family}", f"d={self.d}", f"N={self.N}"]
        if self.s_max is not None:
            lines.append(f"s_max={self.s_max!r}")
        for key in sorted(self.params):
            v = self.params[key]
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{key}={v}")
        return "\n".join(lines) + "\n"

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @property
    def homogeneous(self):
        return self.params["q.dist"] == "zero"

    # ------------------------------------------------------------------
    @classmethod
    def similarity_lognormal(cls, mu, sigma, d=2, N=2, rotation="haar", **params):
        params = {"t.dist": "lognormal", "t.mu": mu, "t.sigma": sigma,
                  "k.dist": rotation, **params}
        return cls("similarity", d, N, params)

    @classmethod
    def maxwell(cls, d=3, **params):
        return cls("maxwell", d, 2, params)

    @classmethod
    def diagonal(cls, d=2, N=2, **params):
        return cls("diagonal", d, N, params)


def lognormal_reference(beta=3.0, alpha=1.0, N=2, d=2, **params):
    """Similarity model with lognormal scales whose ``m(s) = 1`` roots are ``alpha, beta``.

    ``log m(s) = log N + mu s + sigma^2 s^2 / 2`` vanishes at ``alpha`` and
    ``beta`` iff ``sigma^2 = 2 log N / (alpha beta)`` and
    ``mu = -sigma^2 (alpha + beta) / 2``.
    """
    s2 = 2.0 * np.log(N) / (alpha * beta)
    mu = -s2 * (alpha + beta) / 2.0
    params.setdefault("q.dist", "gaussian")
    return ModelSpec.similarity_lognormal(mu, np.sqrt(s2), d=d, N=N, **params)


def maxwell_twopoint_p(a, b):
    """Probability of ``U = a`` that makes ``E[U(1-U)] = 0`` for ``U in {a, b}``."""
    fa, fb = a * (1 - a), b * (1 - b)
    if a <= 0 or b <= 0 or fa * fb >= 0:
        raise ConfigError("two-point U needs a, b > 0 on opposite sides of 1 (so E[U(1-U)] = 0 is reachable)")
    return fb / (fb - fa)


# ----------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class WeightSample:
    """One realization ``(C_1, ..., C_N, Q)``."""

    C: np.ndarray  # (N, d, d)
    Q: np.ndarray  # (d,)

    def __iter__(self):
        return iter((self.C, self.Q))


@dataclass(frozen=True)
class SimilarityElement:
    """``t * k`` with ``t > 0`` and ``k`` orthogonal; its operator norm is ``t``."""

    t: float
    k: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.k, dtype=float)
        if self.t <= 0:
            raise ConfigError("similarity scale must be positive")
        if np.max(np.abs(k @ k.T - np.eye(len(k)))) > ORTHO_TOL:
            raise ConfigError("rotation part is not orthogonal")
        object.__setattr__(self, "k", k)

    @property
    def matrix(self):
        return self.t * self.k

    @property
    def norm(self):
        return self.t


def haar_orthogonal(rng, size, d):
    """``size`` Haar-distributed elements of O(d)."""
    if d == 1:
        return rng.choice([-1.0, 1.0], size=size).reshape(size, 1, 1)
    if d == 2:
        th = rng.uniform(0.0, 2 * np.pi, size)
        c, s = np.cos(th), np.sin(th)
        k = np.empty((size, 2, 2))
        k[:, 0, 0], k[:, 0, 1], k[:, 1, 0], k[:, 1, 1] = c, -s, s, c
        flip = rng.random(size) < 0.5
        k[flip, :, 1] *= -1
        return k
    z = rng.standard_normal((size, d, d))
    q, r = np.linalg.qr(z)
    signs = np.sign(np.diagonal(r, axis1=1, axis2=2))
    signs[signs == 0] = 1.0
    return q * signs[:, None, :]


def uniform_sphere(rng, size, d):
    y = rng.standard_normal((size, d))
    norm = np.linalg.norm(y, axis=1, keepdims=True)
    bad = norm[:, 0] == 0
    while np.any(bad):
        y[bad] = rng.standard_normal((bad.sum(), d))
        norm = np.linalg.norm(y, axis=1, keepdims=True)
        bad = norm[:, 0] == 0
    return y / norm


def maxwell_weights(u, y):
    """Collision matrices ``(U Y^T Y, Id - U Y^T Y)`` for given draws.

    ``u`` has shape ``(B,)`` and ``y`` (unit rows) shape ``(B, d)``; returns
    an array of shape ``(B, 2, d, d)``.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    d = y.shape[1]
    c1 = u[:, None, None] * y[:, :, None] * y[:, None, :]
    c2 = np.eye(d) - c1
    return np.stack([c1, c2], axis=1)


def maxwell_inelasticity(spec, rng, size):
    """Draw the inelasticity ``U`` of the maxwell family."""
    p = spec.params
    if p["u.dist"] == "lognormal":
        sig = p["u.sigma"]
        # mu = -3 sigma^2 / 2 makes E[U] = E[U^2], i.e. E[U(1-U)] = 0
        return np.exp(rng.normal(-1.5 * sig * sig, sig, size))
    a, b = p["u.a"], p["u.b"]
    return np.where(rng.random(size) < maxwell_twopoint_p(a, b), a, b)


def _scales(spec, rng, shape):
    p = spec.params
    dist = p["t.dist"]
    if dist == "lognormal":
        return np.exp(rng.normal(p["t.mu"], p["t.sigma"], shape))
    if dist == "twopoint":
        return np.where(rng.random(shape) < p["t.p"], p["t.a"], p["t.b"])
    return np.full(shape, p["t.value"])


def _rotations(spec, rng, size):
    p, d = spec.params, spec.d
    kd = p["k.dist"]
    if kd == "haar":
        return haar_orthogonal(rng, size, d)
    if kd == "identity":
        k = np.eye(d)
    elif kd == "angle":
        c, s = np.cos(p["k.angle"]), np.sin(p["k.angle"])
        k = np.array([[c, -s], [s, c]])
    else:
        k = np.asarray(p["k.matrix"]).reshape(d, d)
    return np.broadcast_to(k, (size, d, d))


def _general(spec, rng, size):
    mean = spec._branch_values("c.mean")
    scale = spec._branch_values("c.scale")
    cap = spec.params["c.cond_cap"]
    d, n = spec.d, spec.N
    out = np.empty((size, n, d, d))
    rejected = 0
    todo = np.arange(size)
    while todo.size:
        z = rng.standard_normal((todo.size, n, d, d))
        c = mean[None, :, None, None] + scale[None, :, None, None] * z
        cond = np.linalg.cond(c.reshape(-1, d, d)).reshape(todo.size, n)
        ok = np.all(np.isfinite(cond) & (cond <= cap), axis=1)
        out[todo[ok]] = c[ok]
        rejected += int((~ok).sum())
        todo = todo[~ok]
    return out, rejected


def _immigration(spec, rng, C):
    p, d = spec.params, spec.d
    size = C.shape[0]
    qd = p["q.dist"]
    if qd == "zero":
        return np.zeros((size, d))
    if qd == "gaussian":
        mean = spec._vector("q.mean") if "q.mean" in p else np.zeros(d)
        return mean + p.get("q.scale", 1.0) * rng.standard_normal((size, d))
    if qd == "const":
        return np.broadcast_to(spec._vector("q.value"), (size, d)).copy()
    r = spec._vector("q.r")
    return r - np.einsum("bnij,j->bi", C, r)


def draw(spec, rng, size):
    """Vectorized draw of ``size`` weight vectors.

    Returns ``(C, Q, rejected)`` with ``C`` of shape ``(size, N, d, d)``,
    ``Q`` of shape ``(size, d)`` and the number of resampled draws (general
    family only).
    """
    d, n = spec.d, spec.N
    rejected = 0
    fam = spec.family
    if fam == "similarity":
        t = _scales(spec, rng, (size, n))
        k = _rotations(spec, rng, size * n).reshape(size, n, d, d)
        C = t[:, :, None, None] * k
    elif fam == "maxwell":
        u = maxwell_inelasticity(spec, rng, size)
        C = maxwell_weights(u, uniform_sphere(rng, size, d))
    elif fam == "diagonal":
        e = spec._vector("diag.exponents") if "diag.exponents" in spec.params else diagonal_default_exponents(d)
        C = np.broadcast_to(np.diag(float(n) ** -e), (size, n, d, d)).copy()
    else:
        C, rejected = _general(spec, rng, size)
    Q = _immigration(spec, rng, C)
    return C, Q, rejected


def diagonal_default_exponents(d):
    e = np.full(d, 0.5)
    e[0] = 1.0 / 3.0
    return e


def sample_weights(spec, stream):
    """Draw one realization ``(C_1, ..., C_N, Q)`` from ``stream`` (a numpy Generator)."""
    C, Q, _ = draw(spec, stream, 1)
    return WeightSample(C[0], Q[0])


class SamplePool:
    """Immutable seeded array of weight vectors used as common random numbers.

    The pool is generated in fixed blocks, each from its own substream, so
    its contents depend only on ``(spec, seed, size)``.
    """

    def __init__(self, spec, seed, C, Q, rejected=0):
        self.spec = spec
        self.seed = int(seed)
        C = np.ascontiguousarray(C, dtype=float)
        Q = np.ascontiguousarray(Q, dtype=float)
        C.flags.writeable = False
        Q.flags.writeable = False
        self.C, self.Q = C, Q
        self.rejected = rejected

    @classmethod
    def generate(cls, spec, seed, size, threads=None):
        if size < 1:
            raise ConfigError("pool size must be positive")

        def work(part):
            j, a, b = part
            return draw(spec, _rng.stream(seed, _rng.POOL, j), b - a)

        out = _rng.run_blocks(work, _rng.blocks(size), threads)
        C = np.concatenate([o[0] for o in out])
        Q = np.concatenate([o[1] for o in out])
        return cls(spec, seed, C, Q, sum(o[2] for o in out))

    def __len__(self):
        return self.C.shape[0]

    def __getitem__(self, i):
        return WeightSample(self.C[i], self.Q[i])

    def split(self, parts):
        """Disjoint contiguous sub-pools (for batch-means standard errors)."""
        edges = np.linspace(0, len(self), parts + 1).astype(int)
        return [SamplePool(self.spec, self.seed, self.C[a:b], self.Q[a:b])
                for a, b in zip(edges[:-1], edges[1:]) if b > a]

    def branches(self):
        """All ``B * N`` branch matrices; their empirical law is that of ``C = C_I``."""
        d = self.spec.d
        return self.C.reshape(-1, d, d)


# ----------------------------------------------------------------------
# side conditions


@dataclass(frozen=True)
class EigenvectorSolution:
    r: np.ndarray  # None when no solution exists
    singular: bool
    unique: bool

    @property
    def solvable(self):
        return self.r is not None


def solve_eigenvector(spec, pool):
    """Solve ``r = N E[C] r + E[Q]`` with pool averages.

    ``N E[C]`` with ``C = C_I`` equals ``sum_i E[C_i]``.  A system matrix
    whose smallest singular value is below ``1e-10`` times its largest is
    treated as singular; then the least-squares solution is returned when
    ``E[Q]`` lies in the range (flagged non-unique) and ``r = None``
    otherwise.
    """
    if len(pool) == 0:
        raise ConfigError("empty pool")
    d = spec.d
    A = np.eye(d) - pool.C.sum(axis=1).mean(axis=0)
    q = pool.Q.mean(axis=0)
    sv = np.linalg.svd(A, compute_uv=False)
    singular = sv[0] == 0 or sv[-1] < SINGULAR_RTOL * sv[0]
    if not singular:
        return EigenvectorSolution(np.linalg.solve(A, q), False, True)
    if not np.any(q):
        return EigenvectorSolution(np.zeros(d), True, False)
    r, *_ = np.linalg.lstsq(A, q, rcond=SINGULAR_RTOL)
    if np.linalg.norm(A @ r - q) > 1e-8 * max(1.0, np.linalg.norm(q)):
        return EigenvectorSolution(None, True, False)
    return EigenvectorSolution(r, True, False)


def covariance_residual(spec, pool, Sigma, se=False):
    """Frobenius norm of ``Sigma - N E[C Sigma C^T]`` over the pool.

    With ``se=True`` also returns the Frobenius norm of the entrywise
    standard errors of the pool average, a yardstick for the residual.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    if not np.allclose(Sigma, Sigma.T):
        raise ConfigError("Sigma must be symmetric")
    per = np.einsum("bnij,jk,bnlk->bil", pool.C, Sigma, pool.C)
    res = float(np.linalg.norm(Sigma - per.mean(axis=0)))
    if not se:
        return res
    err = per.std(axis=0, ddof=1) / np.sqrt(len(pool)) if len(pool) > 1 else np.zeros_like(Sigma)
    return res, float(np.linalg.norm(err))


def contraction_conditions(spec, pool):
    """The three contraction quantities ``(z1, z2, z3)``.

    ``z1 = E sum_k ||C_k||^2``, ``z2 = sum_k E ||C_k^T C_k||`` and
    ``z3 = || sum_k E C_k^T C_k ||`` (operator norms).  ``z2 == z1`` up to
    round-off because ``||A^T A|| = ||A||^2``; ``z3 <= z2`` by the triangle
    inequality.
    """
    if len(pool) == 0:
        raise ConfigError("empty pool")
    C = pool.C
    norms = np.linalg.norm(C, ord=2, axis=(2, 3))
    z1 = float((norms ** 2).sum(axis=1).mean())
    CtC = np.einsum("bnji,bnjk->bnik", C, C)
    z2 = float(np.linalg.norm(CtC, ord=2, axis=(2, 3)).mean(axis=0).sum())
    z3 = float(np.linalg.norm(CtC.mean(axis=0).sum(axis=0), ord=2))
    return z1, z2, z3
