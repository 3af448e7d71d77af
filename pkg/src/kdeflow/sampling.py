"""Sampling and expectation estimates built on a frozen mixture approximation.

A mixture ``(1/J) sum_j kappa^h(. - X_j)`` is cheap to sample (pick a
component, add a scaled kernel draw) and to evaluate, so it serves both as a
sampler in its own right and as an importance proposal for the target.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import logsumexp
from scipy.stats import qmc

from .core import GaussianKernel, TargetDensity, WeightedSample, make_rng
from .kde import MixtureApprox


class UnsupportedKernelError(NotImplementedError):
    pass


class RoundingWarning(UserWarning):
    pass


@dataclass(frozen=True)
class QmcSpec:
    """Low-discrepancy point set description.

    ``skip`` drops that many points after the (always discarded) origin, and
    only every ``leap``-th point is kept.
    """

    K: int
    sequence: str = "halton"
    skip: int = 0
    leap: int = 1
    scramble: bool = False
    seed: int | None = None

    def __post_init__(self):
        if int(self.K) < 1:
            raise ValueError("K must be at least 1")
        if self.sequence != "halton":
            raise ValueError(f"unsupported sequence {self.sequence!r}")
        if self.skip < 0 or self.leap < 1:
            raise ValueError("need skip >= 0 and leap >= 1")


@dataclass(frozen=True)
class Estimate:
    value: np.ndarray
    kind: str
    K: int
    ess: float

    def to_dict(self) -> dict:
        return {"value": np.asarray(self.value).tolist(), "kind": self.kind, "K": self.K,
                "ess": self.ess}


def direct_sample(mix: MixtureApprox, K: int, rng) -> np.ndarray:
    """Composition method: uniform component index, then ``X_nu + h Z`` with ``Z ~ kappa``."""
    if int(K) < 1:
        raise ValueError("K must be at least 1")
    rng = make_rng(rng)
    idx = rng.integers(mix.J, size=int(K))
    return mix.centers[idx] + mix.h * mix.kernel.draw(rng, int(K))


def stratified_sample(mix: MixtureApprox, L: int, rng) -> np.ndarray:
    """Exactly ``L`` draws per component, ``(J * L, d)`` in component order."""
    if int(L) < 1:
        raise ValueError("L must be at least 1")
    rng = make_rng(rng)
    z = mix.kernel.draw(rng, mix.J * int(L)).reshape(mix.J, int(L), mix.dim)
    return (mix.centers[:, None, :] + mix.h * z).reshape(-1, mix.dim)


def _split(samples):
    if isinstance(samples, WeightedSample):
        return samples.points, samples.weights
    pts = np.atleast_2d(np.asarray(samples, dtype=float))
    return pts, None


def _evaluate(f: Callable, pts: np.ndarray) -> np.ndarray:
    vals = np.asarray(f(pts), dtype=float)
    if vals.shape[0] != pts.shape[0]:
        raise ValueError("f must map (K, d) points to K values or K rows")
    return vals


def _ess(w: np.ndarray) -> float:
    return float(w.sum() ** 2 / np.sum(w * w))


def importance_estimate(f: Callable, samples, mix: MixtureApprox, target: TargetDensity) -> Estimate:
    """Unbiased ``(1/K) sum_k f(Y_k) rho_tar(Y_k) / mix(Y_k)`` for ``Y_k ~ mix``.

    Needs a normalized target (``log_normalizer`` known). If ``samples`` is a
    :class:`WeightedSample`, its weights replace the uniform ``1/K``.
    """
    if target.log_normalizer is None:
        raise ValueError("importance_estimate needs a target with a known normalizer; "
                         "use self_normalized_estimate instead")
    pts, base = _split(samples)
    log_q = mix.log_density(pts)
    if not np.all(np.isfinite(log_q)):
        raise FloatingPointError("mixture density vanished at a sample point")
    w = np.exp(target.normalized_log_density(pts) - log_q)
    if base is not None:
        w = w * base * pts.shape[0]
    vals = _evaluate(f, pts)
    value = np.tensordot(w, vals, axes=(0, 0)) / pts.shape[0]
    return Estimate(value, "importance", pts.shape[0], _ess(w))


def self_normalized_estimate(f: Callable, samples, mix: MixtureApprox,
                             target: TargetDensity) -> Estimate:
    """``sum f(Y_k) w_k / sum w_k`` with ``w_k = rho~_tar(Y_k) / mix(Y_k)``.

    Consistent but biased at finite K; the target's normalizer cancels.
    """
    pts, base = _split(samples)
    lw = target.log_density(pts) - mix.log_density(pts)
    if base is not None:
        lw = lw + np.log(base)
    if not np.any(np.isfinite(lw)):
        raise FloatingPointError("all importance weights vanish")
    w = np.exp(lw - lw.max())
    vals = _evaluate(f, pts)
    value = np.tensordot(w, vals, axes=(0, 0)) / w.sum()
    return Estimate(value, "self_normalized", pts.shape[0], _ess(w))


def plain_estimate(f: Callable, samples) -> Estimate:
    pts, base = _split(samples)
    w = np.full(pts.shape[0], 1.0 / pts.shape[0]) if base is None else base
    return Estimate(np.tensordot(w, _evaluate(f, pts), axes=(0, 0)), "plain", pts.shape[0],
                    _ess(w))


def halton_points(spec: QmcSpec, dim: int) -> np.ndarray:
    """``(K, dim)`` Halton points in the open unit cube, bases = first ``dim`` primes.

    The sequence starts at index 1 (its first base-2 values are 1/2, 1/4, 3/4)
    because index 0 is the origin, which no inverse CDF can map.
    """
    if int(dim) < 1:
        raise ValueError("dim must be at least 1")
    gen = qmc.Halton(int(dim), scramble=spec.scramble, seed=spec.seed)
    gen.fast_forward(1 + spec.skip)
    u = gen.random(int(spec.K) * spec.leap)[:: spec.leap]
    return u


def _require_gaussian(mix: MixtureApprox):
    if not isinstance(mix.kernel, GaussianKernel):
        raise UnsupportedKernelError(
            f"QMC transport is implemented for the Gaussian kernel only, got {mix.kernel.family!r}")


def rosenblatt_transport(mix: MixtureApprox, u: np.ndarray, iters: int = 80) -> np.ndarray:
    """Exact Knothe-Rosenblatt map from the unit cube to a product-kernel mixture.

    Coordinate ``k`` inverts the conditional CDF given the first ``k - 1``
    coordinates, which is again a mixture of 1D kernels with weights
    proportional to each component's density in those coordinates. The
    inversion is a vectorized bisection.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    c, h, ker = mix.centers, mix.h, mix.kernel
    K = u.shape[0]
    out = np.empty((K, mix.dim))
    logw = np.zeros((K, mix.J))
    for k in range(mix.dim):
        w = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
        # component quantiles bracket the mixture quantile
        zq = ker._ppf1(u[:, k])
        lo = c[:, k].min() + h * zq
        hi = c[:, k].max() + h * zq
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            F = np.einsum("kj,kj->k", w, ker._cdf1((mid[:, None] - c[None, :, k]) / h))
            above = F > u[:, k]
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
        x = 0.5 * (lo + hi)
        out[:, k] = x
        logw = logw + ker._log1((x[:, None] - c[None, :, k]) / h)
    return out


def kde_qmc_points(mix: MixtureApprox, K: int, spec: QmcSpec | None = None,
                   transport: str = "rosenblatt") -> WeightedSample:
    """Transport Halton points to the mixture; uniform weights.

    Args:
        mix: Mixture with a Gaussian kernel.
        K: Number of output points.
        spec: Halton settings (``spec.K`` is ignored in favour of ``K``).
        transport: ``"rosenblatt"`` maps ``K`` Halton points through the exact
            Knothe-Rosenblatt map of the whole mixture. ``"stratified"``
            Gaussianizes ``L = ceil(K / J)`` Halton points, scales by ``h`` and
            translates the same set to every center (``K`` is rounded up to
            ``J L``, with a warning).
    """
    _require_gaussian(mix)
    spec = QmcSpec(int(K)) if spec is None else spec
    if transport == "rosenblatt":
        u = halton_points(_with_K(spec, K), mix.dim)
        return WeightedSample(rosenblatt_transport(mix, u))
    if transport == "stratified":
        L = -(-int(K) // mix.J)
        if L * mix.J != K:
            warnings.warn(f"K={K} not divisible by J={mix.J}; using K={L * mix.J}",
                          RoundingWarning, stacklevel=2)
        z = mix.kernel.qmc_transform(halton_points(_with_K(spec, L), mix.dim))
        return WeightedSample((mix.centers[:, None, :] + mix.h * z[None]).reshape(-1, mix.dim))
    raise ValueError(f"unknown transport {transport!r}")


def _with_K(spec: QmcSpec, K: int) -> QmcSpec:
    return QmcSpec(int(K), spec.sequence, spec.skip, spec.leap, spec.scramble, spec.seed)


class McmcResult(NamedTuple):
    points: np.ndarray
    acceptance_rate: float
    scale: float


def mcmc_baseline(target: TargetDensity, K: int, scale="auto", rng=None, x0=None,
                  burn_in: int = 1000, target_acceptance: float | None = None) -> McmcResult:
    """Random-walk Metropolis chain of length ``K`` after burn-in.

    With ``scale="auto"`` the isotropic proposal scale is adapted during
    burn-in, batch by batch, towards ``target_acceptance`` (0.44 in 1D, 0.234
    otherwise) and then frozen, so the returned chain is a plain Markov chain.
    """
    rng = make_rng(rng)
    d = target.dim
    auto = isinstance(scale, str)
    if auto and scale != "auto":
        raise ValueError("scale must be positive or 'auto'")
    s = 2.38 / math.sqrt(d) if auto else float(scale)
    if not s > 0:
        raise ValueError("proposal scale must be positive")
    goal = target_acceptance or (0.44 if d == 1 else 0.234)
    x = np.zeros(d) if x0 is None else np.array(x0, dtype=float)
    lp = float(target.log_density(x))

    def run(n, s, x, lp, store):
        steps = s * rng.standard_normal((n, d))
        logu = np.log(rng.random(n))
        acc = 0
        out = np.empty((n, d)) if store else None
        for i in range(n):
            y = x + steps[i]
            ly = float(target.log_density(y))
            if logu[i] < ly - lp:
                x, lp = y, ly
                acc += 1
            if store:
                out[i] = x
        return x, lp, acc, out

    batch = 100
    done = 0
    while done < burn_in:
        n = min(batch, burn_in - done)
        x, lp, acc, _ = run(n, s, x, lp, False)
        if auto:
            s *= math.exp((acc / n - goal) * 1.5)
        done += n
    x, lp, acc, pts = run(int(K), s, x, lp, True)
    return McmcResult(pts, acc / int(K), s)
