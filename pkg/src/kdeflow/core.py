"""Domain types shared across the package.

Targets are unnormalized log-densities with a score; kernels are symmetric
base densities ``kappa`` whose bandwidth scaling ``kappa^h(x) = h^-d kappa(x/h)``
is applied by the caller, so one kernel object serves every bandwidth.

All point arrays are ``(N, d)``; single points ``(d,)`` are accepted wherever
a batch is and give a batch-free result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, logit, logsumexp, ndtr, ndtri

LOG_2PI = math.log(2.0 * math.pi)


def _as_points(x, dim: int) -> tuple[np.ndarray, bool]:
    """Return ``x`` as a float ``(N, dim)`` array and whether it was a single point."""
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {np.shape(x)}")
    return arr, single


def _unbatch(values: np.ndarray, single: bool):
    return values[0] if single else values


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------


class TargetDensity:
    """Unnormalized target density ``rho_tar`` known through ``log_density``.

    Subclasses implement :meth:`_log_density` and usually :meth:`_score`; the
    base class falls back to central finite differences for the score and for
    the per-point Hessian of the log-density.

    Attributes:
        dim: Dimension of the ambient space.
        log_normalizer: ``log Z`` with ``rho_tar = exp(log_density) / Z`` when
            known analytically, else ``None``.
    """

    fd_step = 1e-6

    def __init__(self, dim: int, log_normalizer: float | None = None):
        if int(dim) < 1:
            raise ValueError("dim must be a positive integer")
        self.dim = int(dim)
        self.log_normalizer = log_normalizer

    # public, batch-aware API -------------------------------------------------
    def log_density(self, x):
        """Unnormalized log-density at ``x`` (``(d,)`` or ``(N, d)``)."""
        pts, single = _as_points(x, self.dim)
        return _unbatch(self._log_density(pts), single)

    def score(self, x):
        """Gradient of the log-density at ``x``."""
        pts, single = _as_points(x, self.dim)
        return _unbatch(self._score(pts), single)

    def score_jacobian(self, x):
        """Hessian of the log-density, shape ``(N, d, d)`` (or ``(d, d)``)."""
        pts, single = _as_points(x, self.dim)
        return _unbatch(self._score_jacobian(pts), single)

    def normalized_log_density(self, x):
        if self.log_normalizer is None:
            raise ValueError("target has no known normalizing constant")
        return self.log_density(x) - self.log_normalizer

    # overridable kernels -----------------------------------------------------
    def _log_density(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _score(self, x: np.ndarray) -> np.ndarray:
        # central differences, step 1e-6 * (1 + |x_k|) per coordinate
        out = np.empty_like(x)
        for k in range(self.dim):
            step = self.fd_step * (1.0 + np.abs(x[:, k]))
            xp = x.copy()
            xm = x.copy()
            xp[:, k] += step
            xm[:, k] -= step
            out[:, k] = (self._log_density(xp) - self._log_density(xm)) / (xp[:, k] - xm[:, k])
        return out

    def _score_jacobian(self, x: np.ndarray) -> np.ndarray:
        out = np.empty((x.shape[0], self.dim, self.dim))
        for k in range(self.dim):
            step = 1e-5 * (1.0 + np.abs(x[:, k]))
            xp = x.copy()
            xm = x.copy()
            xp[:, k] += step
            xm[:, k] -= step
            out[:, :, k] = (self._score(xp) - self._score(xm)) / (xp[:, k] - xm[:, k])[:, None]
        return 0.5 * (out + np.swapaxes(out, 1, 2))

    def tempered(self, beta: float) -> "TargetDensity":
        """The tempered density ``rho_tar ** beta`` (unnormalized)."""
        if beta == 1.0:
            return self
        return TemperedTarget(self, beta)

    def to_dict(self) -> dict:
        raise TypeError(f"{type(self).__name__} has no JSON description")


class CallableTarget(TargetDensity):
    """Black-box target from a log-density callable.

    ``log_density_fn`` must accept an ``(N, d)`` array. Without ``score_fn``
    the score is obtained by central finite differences.
    """

    def __init__(self, log_density_fn: Callable, dim: int, score_fn: Callable | None = None,
                 log_normalizer: float | None = None):
        super().__init__(dim, log_normalizer)
        self._fn = log_density_fn
        self._score_fn = score_fn

    def _log_density(self, x):
        return np.asarray(self._fn(x), dtype=float)

    def _score(self, x):
        if self._score_fn is None:
            return super()._score(x)
        return np.asarray(self._score_fn(x), dtype=float)


class TemperedTarget(TargetDensity):
    def __init__(self, base: TargetDensity, beta: float):
        if not 0.0 < beta <= 1.0:
            raise ValueError("inverse temperature must lie in (0, 1]")
        super().__init__(base.dim, None)
        self.base = base
        self.beta = float(beta)

    def _log_density(self, x):
        return self.beta * self.base._log_density(x)

    def _score(self, x):
        return self.beta * self.base._score(x)

    def _score_jacobian(self, x):
        return self.beta * self.base._score_jacobian(x)


class GaussianMixtureTarget(TargetDensity):
    """Normalized mixture of Gaussians with analytic log-density and score.

    Attributes:
        means: ``(M, d)`` component means.
        covariances: ``(M, d, d)`` SPD covariances.
        weights: ``(M,)`` simplex weights.
    """

    def __init__(self, means, covariances, weights):
        means = np.atleast_2d(np.asarray(means, dtype=float))
        m, d = means.shape
        if m < 1:
            raise ValueError("mixture needs at least one component")
        covs = _expand_covariances(covariances, m, d)
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape[0] != m:
            raise ValueError(f"got {w.shape[0]} weights for {m} components")
        if np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        chol = np.empty_like(covs)
        for i, c in enumerate(covs):
            if not np.allclose(c, c.T, atol=1e-12 * max(1.0, np.abs(c).max())):
                raise ValueError(f"covariance {i} is not symmetric")
            try:
                chol[i] = np.linalg.cholesky(c)
            except np.linalg.LinAlgError:
                raise ValueError(f"covariance {i} is not positive definite") from None
        super().__init__(d, 0.0)
        self.means = means
        self.covariances = covs
        self.weights = w
        self._chol = chol
        self._prec = np.linalg.inv(covs)
        self._log_w = np.log(np.where(w > 0, w, 1.0)) + np.where(w > 0, 0.0, -np.inf)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        self._log_norm = -0.5 * (d * LOG_2PI + logdet)

    def _component_logs(self, x):
        diff = x[:, None, :] - self.means[None]  # (N, M, d)
        maha = np.einsum("nmi,mij,nmj->nm", diff, self._prec, diff)
        return self._log_w + self._log_norm - 0.5 * maha, diff

    def _log_density(self, x):
        logs, _ = self._component_logs(x)
        return logsumexp(logs, axis=1)

    def _score(self, x):
        logs, diff = self._component_logs(x)
        resp = np.exp(logs - logsumexp(logs, axis=1, keepdims=True))
        grads = -np.einsum("mij,nmj->nmi", self._prec, diff)
        return np.einsum("nm,nmi->ni", resp, grads)

    def _score_jacobian(self, x):
        logs, diff = self._component_logs(x)
        resp = np.exp(logs - logsumexp(logs, axis=1, keepdims=True))
        grads = -np.einsum("mij,nmj->nmi", self._prec, diff)
        mean_g = np.einsum("nm,nmi->ni", resp, grads)
        second = np.einsum("nm,nmi,nmj->nij", resp, grads, grads)
        return (-np.einsum("nm,mij->nij", resp, self._prec) + second
                - mean_g[:, :, None] * mean_g[:, None, :])

    def density(self, x):
        return np.exp(self.log_density(x))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", self._chol[comp], z)

    def convolve_gaussian(self, h: float) -> "GaussianMixtureTarget":
        """The mixture convolved with an isotropic Gaussian of std ``h``."""
        return GaussianMixtureTarget(self.means, self.covariances + h * h * np.eye(self.dim),
                                     self.weights)

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def to_dict(self) -> dict:
        return {"family": "gaussian_mixture", "means": self.means.tolist(),
                "covariances": self.covariances.tolist(), "weights": self.weights.tolist()}


def _expand_covariances(covariances, m: int, d: int) -> np.ndarray:
    """Accept scalars (variances), ``(d, d)`` matrices, or a list of either."""
    if np.isscalar(covariances):
        covariances = [covariances] * m
    out = []
    for c in covariances:
        c = np.asarray(c, dtype=float)
        if c.ndim == 0:
            if c <= 0:
                raise ValueError("scalar variances must be positive")
            c = float(c) * np.eye(d)
        elif c.shape != (d, d):
            raise ValueError(f"covariance of shape {c.shape} does not match dimension {d}")
        out.append(c)
    if len(out) != m:
        raise ValueError(f"got {len(out)} covariances for {m} components")
    return np.stack(out)


def make_gaussian_mixture_target(means, covariances, weights=None) -> GaussianMixtureTarget:
    """Build a normalized Gaussian mixture target.

    Args:
        means: List of component means (each of length ``d``).
        covariances: Per-component SPD matrices or scalar variances.
        weights: Simplex vector; uniform if omitted.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    if means.size == 0:
        raise ValueError("mixture needs at least one component")
    if weights is None:
        weights = np.full(means.shape[0], 1.0 / means.shape[0])
    return GaussianMixtureTarget(means, covariances, weights)


def make_three_gaussian_target() -> GaussianMixtureTarget:
    """Default 2D three-component mixture used by the SDE/ODE comparison demo.

    Means at (-2, 0), (2, 0) and (0, 2.5), isotropic variances 0.5, 0.5, 0.3,
    weights (0.4, 0.35, 0.25). A fixed documented choice, not a reproduction.
    """
    return GaussianMixtureTarget([[-2.0, 0.0], [2.0, 0.0], [0.0, 2.5]],
                                 _expand_covariances([0.5, 0.5, 0.3], 3, 2),
                                 [0.4, 0.35, 0.25])


class RezendeTarget(TargetDensity):
    """Bimodal ring density ``exp(-U)`` in two dimensions.

    ``U(x) = 0.5 ((|x| - 2) / 0.4)^2 - log(exp(-0.5 ((x1 - 2) / 0.6)^2)
    + exp(-0.5 ((x2 + 2) / 0.6)^2))``, with modes near (2, 0) and (0, -2)
    joined by the lower-right arc of the ring.

    ``variant="two_sided"`` puts the second bump at ``x1 = -2`` instead
    (modes near (+-2, 0)), so the two modes are separated by low-density arcs.
    The normalizer is unknown in both cases.
    """

    ring_radius = 2.0
    ring_width = 0.4
    bump_width = 0.6
    variants = ("default", "two_sided")

    def __init__(self, variant: str = "default"):
        if variant not in self.variants:
            raise ValueError(f"variant must be one of {self.variants}, got {variant!r}")
        super().__init__(2, None)
        self.variant = variant
        # second bump acts on coordinate `axis` centred at -2
        self._axis = 1 if variant == "default" else 0
        self.modes = np.array([[2.0, 0.0], [0.0, -2.0]] if variant == "default"
                              else [[2.0, 0.0], [-2.0, 0.0]])

    def potential(self, x):
        return -self.log_density(x)

    def _terms(self, x):
        a = -0.5 * ((x[:, 0] - 2.0) / self.bump_width) ** 2
        b = -0.5 * ((x[:, self._axis] + 2.0) / self.bump_width) ** 2
        return a, b

    def _log_density(self, x):
        r = np.hypot(x[:, 0], x[:, 1])
        a, b = self._terms(x)
        return -0.5 * ((r - self.ring_radius) / self.ring_width) ** 2 + np.logaddexp(a, b)

    def _score(self, x):
        r = np.hypot(x[:, 0], x[:, 1])
        # the ring term's gradient has a removable 0/0 only at the origin
        safe_r = np.where(r > 0, r, 1.0)
        ring = -((r - self.ring_radius) / self.ring_width ** 2 / safe_r)[:, None] * x
        ring[r == 0] = 0.0
        a, b = self._terms(x)
        m = np.logaddexp(a, b)
        wa, wb = np.exp(a - m), np.exp(b - m)
        bump = np.zeros_like(x)
        bump[:, 0] -= wa * (x[:, 0] - 2.0)
        bump[:, self._axis] -= wb * (x[:, self._axis] + 2.0)
        return ring + bump / self.bump_width ** 2

    def to_dict(self) -> dict:
        if self.variant == "default":
            return {"family": "rezende"}
        return {"family": "rezende", "variant": self.variant}


def make_rezende_target(variant: str = "default") -> RezendeTarget:
    return RezendeTarget(variant)


def target_from_dict(spec: dict) -> TargetDensity:
    """Inverse of ``target.to_dict()`` for the shipped target families."""
    spec = dict(spec)
    family = spec.pop("family", None)
    if family == "rezende":
        return RezendeTarget(spec.get("variant", "default"))
    if family == "gaussian_mixture":
        return make_gaussian_mixture_target(spec["means"], spec["covariances"],
                                            spec.get("weights"))
    if family == "gaussian":
        mean = np.atleast_1d(np.asarray(spec.get("mean", [0.0]), dtype=float))
        return make_gaussian_mixture_target([mean], [spec.get("covariance", 1.0)], [1.0])
    if family == "three_gaussian":
        return make_three_gaussian_target()
    if family == "benchmark_mixture":
        from .evaluation import make_benchmark_mixture
        return make_benchmark_mixture(**spec)
    raise ValueError(f"unknown target family {family!r}")


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


class Kernel:
    """Symmetric, strictly positive product-form base density ``kappa`` on R^d.

    Subclasses define the one-dimensional factor through ``_log1``, ``_dlog1``,
    ``_d2log1``, ``_ppf1`` and ``_cdf1``.
    """

    family = "abstract"

    def __init__(self, dim: int):
        if int(dim) < 1:
            raise ValueError("dim must be a positive integer")
        self.dim = int(dim)

    def log_eval(self, u):
        """``log kappa(u)`` of the base (unit-bandwidth) kernel."""
        pts, single = _as_points(u, self.dim)
        return _unbatch(self._log1(pts).sum(axis=-1), single)

    def grad_log_eval(self, u):
        pts, single = _as_points(u, self.dim)
        return _unbatch(self._dlog1(pts), single)

    def hess_log_diag(self, u):
        """Diagonal of the Hessian of ``log kappa`` (product kernels are separable)."""
        pts, single = _as_points(u, self.dim)
        return _unbatch(self._d2log1(pts), single)

    def log_eval_scaled(self, x, h: float):
        """``log kappa^h(x) = log kappa(x / h) - d log h``."""
        _check_bandwidth(h)
        return self.log_eval(np.asarray(x, dtype=float) / h) - self.dim * math.log(h)

    def draw(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        n = 1 if size is None else int(size)
        out = self.qmc_transform(rng.random((n, self.dim)))
        return out[0] if size is None else out

    def qmc_transform(self, u):
        """Map ``(0, 1)^d`` to ``kappa`` by the per-coordinate inverse CDF."""
        return self._ppf1(np.asarray(u, dtype=float))

    def cdf1(self, z):
        """CDF of the one-dimensional factor."""
        return self._cdf1(np.asarray(z, dtype=float))

    def to_dict(self) -> dict:
        return {"family": self.family, "dim": self.dim}

    def __eq__(self, other):
        return type(self) is type(other) and self.dim == other.dim

    def __hash__(self):
        return hash((self.family, self.dim))

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim})"


class GaussianKernel(Kernel):
    """Standard normal base kernel, ``grad log kappa(u) = -u``."""

    family = "gaussian"

    def _log1(self, u):
        return -0.5 * u * u - 0.5 * LOG_2PI

    def _dlog1(self, u):
        return -u

    def _d2log1(self, u):
        return -np.ones_like(u)

    def _ppf1(self, u):
        return ndtri(u)

    def _cdf1(self, z):
        return ndtr(z)

    def draw(self, rng, size=None):
        shape = (self.dim,) if size is None else (int(size), self.dim)
        return rng.standard_normal(shape)


class LogisticKernel(Kernel):
    """Product of standard logistic densities; heavier (exponential) tails."""

    family = "logistic"

    def _log1(self, u):
        a = np.abs(u)
        return -a - 2.0 * np.log1p(np.exp(-a))

    def _dlog1(self, u):
        return -np.tanh(0.5 * u)

    def _d2log1(self, u):
        return -0.5 / np.cosh(0.5 * u) ** 2

    def _ppf1(self, u):
        return logit(u)

    def _cdf1(self, z):
        return expit(z)


_KERNELS = {"gaussian": GaussianKernel, "logistic": LogisticKernel}


def make_kernel(family: str = "gaussian", dim: int = 1) -> Kernel:
    try:
        return _KERNELS[family](dim)
    except KeyError:
        raise ValueError(f"unknown kernel family {family!r}; known: {sorted(_KERNELS)}") from None


def kernel_from_dict(spec: dict) -> Kernel:
    return make_kernel(spec.get("family", "gaussian"), spec.get("dim", 1))


@dataclass(frozen=True)
class BandwidthSpec:
    h: float

    def __post_init__(self):
        _check_bandwidth(self.h)


def _check_bandwidth(h) -> None:
    if not (np.isfinite(h) and h > 0):
        raise ValueError(f"bandwidth must be a positive real, got {h!r}")


# ---------------------------------------------------------------------------
# Ensembles and weighted samples
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """``J`` particle positions in R^d at integration time ``t``.

    Positions must be finite; pairwise distinctness is enforced unless
    ``require_distinct=False``.
    """

    positions: np.ndarray
    t: float = 0.0
    require_distinct: bool = field(default=True, repr=False)

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos[:, None]
        if pos.ndim != 2 or pos.shape[0] < 1:
            raise ValueError("positions must be a non-empty (J, d) array")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        if self.t < 0:
            raise ValueError("integration time must be nonnegative")
        if self.require_distinct and has_coincident_points(pos):
            raise ValueError("positions must be pairwise distinct")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def J(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def translated(self, shift) -> "ParticleEnsemble":
        return ParticleEnsemble(self.positions + np.asarray(shift, dtype=float), self.t)


def has_coincident_points(points: np.ndarray) -> bool:
    if points.shape[0] < 2:
        return False
    return np.unique(points, axis=0).shape[0] < points.shape[0]


@dataclass(frozen=True, eq=False)
class WeightedSample:
    """Points with nonnegative weights, normalized to sum to one on construction."""

    points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        n = pts.shape[0]
        w = np.full(n, 1.0 / n) if self.weights is None else np.array(self.weights, dtype=float)
        if w.shape != (n,):
            raise ValueError(f"expected {n} weights, got shape {w.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        total = w.sum()
        if total <= 0:
            raise ValueError("weights sum to zero")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w / total)

    @classmethod
    def from_log_weights(cls, points, log_weights) -> "WeightedSample":
        lw = np.asarray(log_weights, dtype=float)
        if not np.any(np.isfinite(lw)):
            raise ValueError("all log-weights are -inf: weight collapse")
        return cls(points, np.exp(lw - lw.max()))

    @property
    def K(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def covariance(self) -> np.ndarray:
        c = self.points - self.mean()
        return (self.weights[:, None] * c).T @ c


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------


def make_rng(seed: int | np.random.SeedSequence | None) -> np.random.Generator:
    """PCG64 generator from a 64-bit seed (``None`` draws fresh entropy)."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    if seed is not None and not 0 <= int(seed) < 2 ** 64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return np.random.default_rng(np.random.SeedSequence(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent child streams of one root seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def initial_ensemble(J: int, dim: int, rng: np.random.Generator, mean=None, scale: float = 1.0,
                     h: float = 1.0) -> ParticleEnsemble:
    """Draw ``J`` iid points from ``N(mean, scale^2 I)``.

    Coincident draws (possible only through rounding) are re-jittered by
    ``1e-8 * h``.
    """
    mean = np.zeros(dim) if mean is None else np.broadcast_to(np.asarray(mean, float), (dim,))
    pts = mean + scale * rng.standard_normal((J, dim))
    return ParticleEnsemble(dejitter(pts, rng, h))


def dejitter(points: np.ndarray, rng: np.random.Generator, h: float = 1.0) -> np.ndarray:
    pts = np.array(points, dtype=float)
    while has_coincident_points(pts):
        _, first = np.unique(pts, axis=0, return_index=True)
        dup = np.setdiff1d(np.arange(pts.shape[0]), first)
        pts[dup] += 1e-8 * h * rng.standard_normal((dup.size, pts.shape[1]))
    return pts
