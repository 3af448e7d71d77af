"""Metrics and quadrature baselines.

Grid quadrature (KL divergence and its rate of change along the flow) is
limited to ``d <= 2``. Kernel quantities use the Gaussian RKHS kernel
``k(x, x') = kappa^h(x - x')``, for which Gaussian-mixture embeddings, inner
products and MMD have closed forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .core import (LOG_2PI, GaussianKernel, GaussianMixtureTarget, Kernel, ParticleEnsemble,
                   TargetDensity, WeightedSample, _check_bandwidth, make_rng)
from .dynamics import ensemble_velocity, velocity_field
from .kde import MixtureApprox, kde_log_density
from .sampling import UnsupportedKernelError


class GridCoverageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Grids and KL
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    """Tensor grid with trapezoid weights in one or two dimensions.

    Args:
        ranges: ``[(lo, hi), ...]`` per axis.
        nodes: Node count per axis (at least 16), or one count for all axes.
    """

    ranges: tuple
    nodes: tuple

    def __post_init__(self):
        ranges = tuple((float(a), float(b)) for a, b in np.atleast_2d(self.ranges))
        nodes = self.nodes
        nodes = tuple([int(nodes)] * len(ranges)) if np.isscalar(nodes) else tuple(map(int, nodes))
        if not 1 <= len(ranges) <= 2:
            raise ValueError("grid quadrature is limited to d <= 2")
        if len(nodes) != len(ranges):
            raise ValueError("need one node count per axis")
        if min(nodes) < 16:
            raise ValueError("need at least 16 nodes per axis")
        if any(b <= a for a, b in ranges):
            raise ValueError("ranges must satisfy lo < hi")
        object.__setattr__(self, "ranges", ranges)
        object.__setattr__(self, "nodes", nodes)

    @property
    def dim(self) -> int:
        return len(self.ranges)

    @property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(a, b, n) for (a, b), n in zip(self.ranges, self.nodes)]

    @property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def weights(self) -> np.ndarray:
        ws = []
        for ax in self.axes:
            w = np.full(ax.size, ax[1] - ax[0])
            w[[0, -1]] *= 0.5
            ws.append(w)
        out = ws[0]
        for w in ws[1:]:
            out = np.multiply.outer(out, w)
        return out.ravel()

    def boundary_mask(self, band: float = 0.05) -> np.ndarray:
        """Nodes within ``band`` (fraction of each axis length) of the grid's edge."""
        pts = self.points
        mask = np.zeros(pts.shape[0], dtype=bool)
        for k, (a, b) in enumerate(self.ranges):
            w = band * (b - a)
            mask |= (pts[:, k] < a + w) | (pts[:, k] > b - w)
        return mask


def _log_evaluator(p):
    if isinstance(p, TargetDensity):
        return p.log_density
    return p


def _grid_log_mass(logp: np.ndarray, grid: Grid, name: str, tol: float):
    """Normalize log-density values on ``grid``; refuse if the edge carries mass."""
    if not np.all(np.isfinite(logp)):
        raise GridCoverageError(f"{name} is not strictly positive and finite on the grid")
    logw = np.log(grid.weights)
    log_z = logsumexp(logp + logw)
    edge = grid.boundary_mask()
    # mass in the outer band stands in for the unresolved tail mass beyond it
    edge_frac = math.exp(logsumexp(logp[edge] + logw[edge]) - log_z)
    if edge_frac > tol:
        raise GridCoverageError(f"grid misses mass of {name} (edge fraction {edge_frac:.2e})")
    return logp - log_z


def kl_numeric(p, q, grid: Grid, coverage_tol: float = 1e-6) -> float:
    """Trapezoid quadrature of ``int p log(p / q)`` after normalizing both on the grid.

    Args:
        p, q: TargetDensity instances or callables returning log-densities on
            ``(N, d)`` points.
    """
    x = grid.points
    lp = _grid_log_mass(np.asarray(_log_evaluator(p)(x), float), grid, "p", coverage_tol)
    lq = _grid_log_mass(np.asarray(_log_evaluator(q)(x), float), grid, "q", coverage_tol)
    pw = np.exp(lp) * grid.weights
    return float(np.sum(pw * (lp - lq)))


def kde_kl(positions, target: TargetDensity, kernel: Kernel, h: float, grid: Grid,
           coverage_tol: float = 1e-6) -> float:
    """``KL(KDE[positions] || target)`` on ``grid``."""
    pos = np.asarray(positions, dtype=float)
    return kl_numeric(lambda x: kde_log_density(pos, kernel, h, x), target, grid, coverage_tol)


def kl_flow_derivative(ensemble, target: TargetDensity, kernel: Kernel, h: float, grid: Grid,
                       coverage_tol: float = 1e-6) -> float:
    """Rate of change of ``KL(KDE || target)`` under the untempered flow.

    With ``v`` the flow's velocity field this is
    ``-(1/J) sum_j int kappa^h(x - X_j) v(X_j) . v(x) dx``, evaluated by grid
    quadrature.
    """
    X = ensemble.positions if isinstance(ensemble, ParticleEnsemble) else np.atleast_2d(ensemble)
    x = grid.points
    lk = kernel._log1((x[:, None, :] - X[None, :, :]) / h).sum(-1) - X.shape[1] * math.log(h)
    _grid_log_mass(logsumexp(lk, axis=1), grid, "KDE", coverage_tol)
    vj = ensemble_velocity(X, target, kernel, h)
    vx = velocity_field(X, target, kernel, h, 1.0, x)
    # (1/J) sum_j kappa^h(x - X_j) v(X_j), then dot with v(x)
    w = np.exp(lk) @ vj / X.shape[0]
    return float(-np.sum(grid.weights * np.einsum("nd,nd->n", w, vx)))


def kl_slope_fd(ensemble, target: TargetDensity, kernel: Kernel, h: float, grid: Grid,
                dt: float = 1e-3, coverage_tol: float = 1e-6) -> float:
    """Central finite difference of the KDE's KL along the flow.

    The particles are moved by one classical RK4 step of size ``dt`` forwards
    and backwards in time.
    """
    X = ensemble.positions if isinstance(ensemble, ParticleEnsemble) else np.atleast_2d(ensemble)

    def f(Y):
        return ensemble_velocity(Y, target, kernel, h)

    def rk4(Y, tau):
        k1 = f(Y)
        k2 = f(Y + 0.5 * tau * k1)
        k3 = f(Y + 0.5 * tau * k2)
        k4 = f(Y + tau * k3)
        return Y + tau / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    kl_plus = kde_kl(rk4(X, dt), target, kernel, h, grid, coverage_tol)
    kl_minus = kde_kl(rk4(X, -dt), target, kernel, h, grid, coverage_tol)
    return (kl_plus - kl_minus) / (2.0 * dt)


def bisect_bandwidth(ensemble, target: TargetDensity, kernel: Kernel, grid: Grid,
                     h_lo: float = 1e-2, h_hi: float = 3.0, tol: float = 1e-3,
                     max_iter: int = 60) -> float:
    """Largest bandwidth in ``[h_lo, h_hi]`` with ``kl_flow_derivative <= 0``, by bisection.

    Assumes one sign change; returns ``h_hi`` if the derivative is
    nonpositive there, and raises if it is already positive at ``h_lo``.
    """
    def sign_ok(h):
        return kl_flow_derivative(ensemble, target, kernel, h, grid) <= 0.0

    if not sign_ok(h_lo):
        raise ValueError(f"KL increases along the flow already at h={h_lo}")
    if sign_ok(h_hi):
        return float(h_hi)
    lo, hi = float(h_lo), float(h_hi)
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if sign_ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------------------
# Gaussian embeddings
# ---------------------------------------------------------------------------


class GaussianParts(NamedTuple):
    """A measure as ``sum_i w_i N(m_i, S_i)``; atoms carry ``S_i = 0``."""

    means: np.ndarray
    covs: np.ndarray
    weights: np.ndarray


def gaussian_parts(dist) -> GaussianParts:
    """Decompose a weighted sample, point array, Gaussian mixture, or Gaussian-kernel KDE."""
    if isinstance(dist, GaussianParts):
        return dist
    if isinstance(dist, GaussianMixtureTarget):
        return GaussianParts(dist.means, dist.covariances, dist.weights)
    if isinstance(dist, MixtureApprox):
        if not isinstance(dist.kernel, GaussianKernel):
            raise UnsupportedKernelError("closed-form embeddings need a Gaussian kernel")
        c = dist.centers
        return GaussianParts(c, np.broadcast_to(dist.h ** 2 * np.eye(c.shape[1]),
                                                (c.shape[0],) + (c.shape[1],) * 2),
                             np.full(c.shape[0], 1.0 / c.shape[0]))
    if isinstance(dist, TargetDensity):
        raise UnsupportedKernelError(f"no closed-form embedding for {type(dist).__name__}")
    ws = dist if isinstance(dist, WeightedSample) else WeightedSample(dist)
    n, d = ws.points.shape
    return GaussianParts(ws.points, np.zeros((n, d, d)), ws.weights)


def _cross_log_gauss(a: GaussianParts, b: GaussianParts, h: float) -> np.ndarray:
    """``log N(m_i - n_j; 0, S_i + T_j + h^2 I)`` for all pairs, ``(len a, len b)``."""
    d = a.means.shape[1]
    diff = a.means[:, None, :] - b.means[None, :, :]
    a_iso = not np.any(a.covs)
    b_iso = not np.any(b.covs)
    if a_iso and b_iso:
        return -0.5 * np.sum(diff ** 2, -1) / h ** 2 - 0.5 * d * (LOG_2PI + 2 * math.log(h))
    C = a.covs[:, None] + b.covs[None, :] + h ** 2 * np.eye(d)
    L = np.linalg.cholesky(C)
    z = np.linalg.solve(L, diff[..., None])[..., 0]
    logdet = 2 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(-1)
    return -0.5 * np.sum(z ** 2, -1) - 0.5 * logdet - 0.5 * d * LOG_2PI


def _check_kernel(kernel):
    if kernel is not None and not isinstance(kernel, GaussianKernel):
        raise UnsupportedKernelError("closed-form kernel embeddings need the Gaussian kernel")


class MeanEmbedding:
    """Kernel mean embedding ``mu(x) = int k(y, x) dP(y)`` of a Gaussian-decomposable measure."""

    def __init__(self, dist, h: float, kernel: Kernel | None = None):
        _check_bandwidth(h)
        _check_kernel(kernel)
        self.parts = gaussian_parts(dist)
        self.h = float(h)
        self.dim = self.parts.means.shape[1]
        self._sampler = dist if hasattr(dist, "sample") else None

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        pts = GaussianParts(x, np.zeros((x.shape[0], self.dim, self.dim)), np.ones(x.shape[0]))
        return np.exp(_cross_log_gauss(pts, self.parts, self.h)) @ self.parts.weights

    def inner(self, other: "MeanEmbedding") -> float:
        """RKHS inner product ``<mu_self, mu_other>``."""
        G = np.exp(_cross_log_gauss(self.parts, other.parts, self.h))
        return float(self.parts.weights @ G @ other.parts.weights)

    def sample(self, rng, n):
        if self._sampler is None:
            raise TypeError("the embedded measure cannot be sampled")
        return self._sampler.sample(rng, n)


def mean_embedding(dist, h: float, kernel: Kernel | None = None) -> MeanEmbedding:
    return MeanEmbedding(dist, h, kernel)


def gram(points, h: float) -> np.ndarray:
    p = np.atleast_2d(np.asarray(points, dtype=float))
    parts = GaussianParts(p, np.zeros((p.shape[0], p.shape[1], p.shape[1])), np.ones(p.shape[0]))
    return np.exp(_cross_log_gauss(parts, parts, h))


def mmd(sample, reference, h: float, kernel: Kernel | None = None) -> float:
    """RKHS distance between the embeddings of a (weighted) sample and a reference measure.

    Both arguments may be point arrays, WeightedSamples, Gaussian mixtures, or
    Gaussian-kernel mixture approximations.
    """
    _check_kernel(kernel)
    a = reference if isinstance(reference, MeanEmbedding) else MeanEmbedding(reference, h)
    b = MeanEmbedding(sample, h)
    sq = a.inner(a) - 2.0 * a.inner(b) + b.inner(b)
    return math.sqrt(max(sq, 0.0))


def mmd_discrete(x, y, h: float, wx=None, wy=None) -> float:
    return mmd(WeightedSample(x, wx), WeightedSample(y, wy), h)


# ---------------------------------------------------------------------------
# Test functions and quadrature error
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RkhsFunction:
    """``f(x) = sum_i alpha_i k(c_i, x)`` with ``k(x, x') = kappa^h(x - x')`` Gaussian."""

    coefs: np.ndarray
    anchors: np.ndarray
    h: float

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d = self.anchors.shape[1]
        sq = np.sum((x[:, None, :] - self.anchors[None]) ** 2, -1)
        k = np.exp(-0.5 * sq / self.h ** 2 - 0.5 * d * (LOG_2PI + 2 * math.log(self.h)))
        return k @ self.coefs

    def norm(self) -> float:
        return math.sqrt(max(float(self.coefs @ gram(self.anchors, self.h) @ self.coefs), 0.0))

    def expectation(self, dist) -> float:
        """``E_P[f] = sum_i alpha_i mu_P(c_i)`` in closed form."""
        emb = dist if isinstance(dist, MeanEmbedding) else MeanEmbedding(dist, self.h)
        return float(emb(self.anchors) @ self.coefs)

    @classmethod
    def random(cls, rng, anchors_from, h: float, n_anchors: int = 10) -> "RkhsFunction":
        """Standard normal coefficients at anchors drawn by ``anchors_from(rng, n)``, unit norm."""
        anchors = np.asarray(anchors_from(rng, n_anchors), dtype=float)
        f = cls(rng.standard_normal(n_anchors), anchors, h)
        return cls(f.coefs / f.norm(), anchors, h)


def quadrature_error_suite(point_sets, reference, h: float, n_funcs: int = 50, rng=None,
                           n_anchors: int = 10, anchors_from=None) -> np.ndarray:
    """Mean absolute quadrature error over random unit-norm RKHS test functions.

    Args:
        point_sets: Sequence of WeightedSamples (or point arrays, uniform weights).
        reference: Gaussian-decomposable measure; supplies exact expectations.
        anchors_from: ``(rng, n) -> anchors``; defaults to sampling the reference.

    Returns:
        One mean error per point set.
    """
    rng = make_rng(rng)
    ref = reference if isinstance(reference, MeanEmbedding) else MeanEmbedding(reference, h)
    draw = anchors_from or ref.sample
    sets = [s if isinstance(s, WeightedSample) else WeightedSample(s) for s in point_sets]
    errs = np.zeros((n_funcs, len(sets)))
    for i in range(n_funcs):
        f = RkhsFunction.random(rng, draw, h, n_anchors)
        exact = f.expectation(ref)
        for j, s in enumerate(sets):
            errs[i, j] = abs(exact - s.weights @ f(s.points))
    return errs.mean(axis=0)


# ---------------------------------------------------------------------------
# Herding and Bayesian quadrature
# ---------------------------------------------------------------------------


def candidate_pool(reference, M: int, rng, mode: str = "sample", box=None) -> np.ndarray:
    """``M`` candidates: draws from the reference, or uniform points in ``box``."""
    rng = make_rng(rng)
    if mode == "sample":
        emb = reference if isinstance(reference, MeanEmbedding) else None
        sampler = emb.sample if emb is not None else reference.sample
        return np.asarray(sampler(rng, int(M)), dtype=float)
    if mode == "box":
        if box is None:
            raise ValueError("box mode needs box=[(lo, hi), ...]")
        lo, hi = np.asarray(box, dtype=float).T
        return lo + (hi - lo) * rng.random((int(M), lo.size))
    raise ValueError(f"unknown pool mode {mode!r}")


def herding_points(reference, h: float, J: int, pool=None, rng=None, M: int | None = None,
                   mode: str = "sample", box=None) -> np.ndarray:
    """Greedy kernel herding over a finite candidate pool.

    ``z_{n+1} = argmax_x mu(x) - (1/(n+1)) sum_{j<=n} k(x, z_j)``, the standard
    herding recursion. The default pool is ``M = 200 J`` draws from the reference.
    """
    emb = reference if isinstance(reference, MeanEmbedding) else MeanEmbedding(reference, h)
    if pool is None:
        pool = candidate_pool(emb, M or 200 * int(J), rng, mode, box)
    pool = np.atleast_2d(np.asarray(pool, dtype=float))
    if pool.shape[0] == 0:
        raise ValueError("candidate pool is empty")
    mu = emb(pool)
    acc = np.zeros(pool.shape[0])
    chosen = []
    for n in range(int(J)):
        k = int(np.argmax(mu - acc / (n + 1)))
        chosen.append(k)
        acc += _kcol(pool, pool[k], h)
    return pool[chosen]


def _kcol(pool, z, h):
    d = pool.shape[1]
    return np.exp(-0.5 * np.sum((pool - z) ** 2, -1) / h ** 2 - 0.5 * d * (LOG_2PI + 2 * math.log(h)))


def _chol(K):
    try:
        return cho_factor(K, lower=True), 0.0
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(K) / K.shape[0]
        try:
            return cho_factor(K + jitter * np.eye(K.shape[0]), lower=True), jitter
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("Gram matrix singular even after jitter") from exc


def sbq_weights(points, reference, h: float) -> np.ndarray:
    """MMD-optimal weights ``K^-1 z`` for fixed points, ``z_j = mu(z_j)``; may be negative.

    A jitter of ``1e-10 trace(K) / J`` is added once if ``K`` is numerically singular.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    emb = reference if isinstance(reference, MeanEmbedding) else MeanEmbedding(reference, h)
    (c, _) = _chol(gram(pts, h))
    return cho_solve(c, emb(pts))


def weighted_mmd(points, weights, reference, h: float) -> float:
    """MMD of a signed-weight point set (SBQ weights need not be positive or sum to 1)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    emb = reference if isinstance(reference, MeanEmbedding) else MeanEmbedding(reference, h)
    w = np.asarray(weights, dtype=float)
    sq = emb.inner(emb) - 2.0 * w @ emb(pts) + w @ gram(pts, h) @ w
    return math.sqrt(max(sq, 0.0))


def sbq_points(reference, h: float, J: int, pool=None, rng=None, M: int | None = None,
               mode: str = "sample", box=None):
    """Sequential Bayesian quadrature: greedily add the pool point that most lowers
    the optimally weighted MMD.

    The gain of candidate ``x`` is ``(mu(x) - k_x^T K^-1 z)^2 / (k(x,x) - k_x^T K^-1 k_x)``.

    Returns:
        ``(points, weights)`` with the final SBQ weights.
    """
    emb = reference if isinstance(reference, MeanEmbedding) else MeanEmbedding(reference, h)
    if pool is None:
        pool = candidate_pool(emb, M or 50 * int(J), rng, mode, box)
    pool = np.atleast_2d(np.asarray(pool, dtype=float))
    mu = emb(pool)
    kxx = _kcol(pool[:1], pool[0], h)[0]
    # Cholesky-style incremental basis: rows of V solve L V = K_sel,pool
    V = np.zeros((0, pool.shape[0]))
    a = np.zeros(0)                                # L^-1 z over the selection
    chosen = []
    for _ in range(int(J)):
        resid_var = kxx - np.sum(V ** 2, axis=0)
        resid_mu = mu - a @ V
        gain = np.where(resid_var > 1e-12 * kxx, resid_mu ** 2 / np.maximum(resid_var, 1e-300), -1.0)
        gain[chosen] = -1.0
        k = int(np.argmax(gain))
        col = _kcol(pool, pool[k], h)
        lii = math.sqrt(max(resid_var[k], 1e-300))
        v_new = (col - V[:, k] @ V) / lii
        a = np.append(a, resid_mu[k] / lii)
        V = np.vstack([V, v_new])
        chosen.append(k)
    pts = pool[chosen]
    return pts, sbq_weights(pts, emb, h)


# ---------------------------------------------------------------------------
# Rates
# ---------------------------------------------------------------------------


class RateFit(NamedTuple):
    slope: float
    intercept: float
    ci_low: float
    ci_high: float


def fit_rate(Ks, errors, n_boot: int = 2000, level: float = 0.95, rng=0) -> RateFit:
    """Least-squares slope of ``log error`` against ``log K`` with a bootstrap interval.

    Args:
        Ks: Sample sizes (at least four).
        errors: ``(len(Ks),)`` errors, or ``(n_reps, len(Ks))`` errors over
            repetitions. Repetitions are averaged before fitting and resampled
            for the interval; a 1D input resamples the ``(K, error)`` pairs.
    """
    x = np.log(np.asarray(Ks, dtype=float))
    E = np.asarray(errors, dtype=float)
    if x.size < 4:
        raise ValueError("need at least four sample sizes")
    if np.any(E <= 0) or not np.all(np.isfinite(E)):
        raise ValueError("errors must be positive and finite")
    E2 = E[None] if E.ndim == 1 else E
    if E2.shape[1] != x.size:
        raise ValueError("errors do not match Ks")
    slope, intercept = np.polyfit(x, np.log(E2.mean(axis=0)), 1)
    rng = make_rng(rng)
    boots = np.empty(n_boot)
    for b in range(n_boot):
        if E.ndim == 1:
            idx = rng.integers(x.size, size=x.size)
            while np.unique(x[idx]).size < 2:
                idx = rng.integers(x.size, size=x.size)
            boots[b] = np.polyfit(x[idx], np.log(E[idx]), 1)[0]
        else:
            rows = rng.integers(E2.shape[0], size=E2.shape[0])
            boots[b] = np.polyfit(x, np.log(E2[rows].mean(axis=0)), 1)[0]
    lo, hi = np.quantile(boots, [(1 - level) / 2, (1 + level) / 2])
    return RateFit(float(slope), float(intercept), float(min(lo, slope)), float(max(hi, slope)))


# ---------------------------------------------------------------------------
# Shipped benchmark mixture
# ---------------------------------------------------------------------------


def make_benchmark_mixture(seed: int = 20, n_components: int = 20) -> GaussianMixtureTarget:
    """Fixed 2D mixture of Gaussians used for the herding and quadrature comparisons.

    Means are uniform on ``[-4, 4] x [-3, 1]``; each covariance is a random
    rotation of a diagonal with standard deviations uniform on ``[0.3, 1]``;
    weights are Dirichlet(5, ..., 5). Everything is derived from ``seed``.
    """
    rng = make_rng(seed)
    means = rng.uniform([-4.0, -3.0], [4.0, 1.0], size=(n_components, 2))
    sds = rng.uniform(0.3, 1.0, size=(n_components, 2))
    ang = rng.uniform(0.0, np.pi, size=n_components)
    covs = np.empty((n_components, 2, 2))
    for i in range(n_components):
        c, s = math.cos(ang[i]), math.sin(ang[i])
        R = np.array([[c, -s], [s, c]])
        covs[i] = R @ np.diag(sds[i] ** 2) @ R.T
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))
    weights = rng.dirichlet(np.full(n_components, 5.0))
    mix = GaussianMixtureTarget(means, covs, weights)
    mix.spec = {"family": "benchmark_mixture", "seed": seed, "n_components": n_components}
    return mix
