"""Kernel mean outbedding and an SMC filter that resamples through it.

With a translation-invariant kernel ``k(x, x') = kappa^h(x - x')`` the mean
embedding of a weighted sample is the weighted KDE ``sum_i w_i kappa^h(. - y_i)``.
Running the particle flow against that density yields equal-weight points
whose own KDE reproduces it; they are approximately distributed like the
pre-image (the deconvolution of the embedding).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp, softmax

from .core import (Kernel, ParticleEnsemble, TargetDensity, WeightedSample, _check_bandwidth,
                   dejitter, make_kernel, make_rng)
from .dynamics import FlowConfig, integrate
from .kde import _log_terms


class EmbeddedDistribution(TargetDensity):
    """Weighted kernel mixture ``sum_i w_i kappa^h(x - y_i)`` viewed as a normalized target."""

    def __init__(self, ws: WeightedSample, kernel: Kernel, h: float):
        _check_bandwidth(h)
        if ws.dim != kernel.dim:
            raise ValueError("sample and kernel dimensions differ")
        super().__init__(kernel.dim, 0.0)
        self.sample = ws
        self.kernel = kernel
        self.h = float(h)
        with np.errstate(divide="ignore"):
            self._logw = np.log(ws.weights)

    @property
    def atoms(self) -> np.ndarray:
        return self.sample.points

    @property
    def weights(self) -> np.ndarray:
        return self.sample.weights

    def _log_density(self, x):
        logk, _ = _log_terms(self.atoms, self.kernel, self.h, x)
        return logsumexp(logk + self._logw, axis=1) - self.dim * math.log(self.h)

    def _score(self, x):
        logk, u = _log_terms(self.atoms, self.kernel, self.h, x)
        r = softmax(logk + self._logw, axis=1)
        return np.einsum("nj,njd->nd", r, self.kernel._dlog1(u)) / self.h

    def mean(self) -> np.ndarray:
        return self.sample.mean()


def embed(ws: WeightedSample, kernel: Kernel | None = None, h: float = 0.3) -> EmbeddedDistribution:
    if not isinstance(ws, WeightedSample):
        ws = WeightedSample(ws)
    return EmbeddedDistribution(ws, kernel or make_kernel("gaussian", ws.dim), h)


def systematic_indices(weights, J: int, rng) -> np.ndarray:
    """Systematic resampling: one uniform offset, ``J`` evenly spaced quantiles."""
    u = (make_rng(rng).random() + np.arange(int(J))) / int(J)
    return np.minimum(np.searchsorted(np.cumsum(weights), u), len(weights) - 1)


def outbed(emb: EmbeddedDistribution, J: int, config: FlowConfig | None = None, init=None,
           rng=None, return_trace: bool = False):
    """Equal-weight points whose KDE matches the embedding ``emb``.

    Args:
        emb: Target embedding; its bandwidth must equal ``config.h``.
        J: Number of output points (ignored when ``init`` is given).
        config: Flow settings; defaults to ``FlowConfig(h=emb.h)``.
        init: Starting positions (warm start), or a mode string.
            ``"embedding"`` (the default) takes ``J`` draws from the embedding
            itself; ``"systematic"`` places ``J`` points on the atoms by
            systematic resampling, so each atom starts with about ``J w_i``
            points.
        rng: Seed or generator for the random initializations.

    Returns:
        The converged ParticleEnsemble, plus its FlowTrace if ``return_trace``.
    """
    config = FlowConfig(h=emb.h) if config is None else config
    if not math.isclose(config.h, emb.h, rel_tol=0, abs_tol=0):
        raise ValueError(f"outbedding needs the flow bandwidth h={config.h} to equal the "
                         f"embedding bandwidth h={emb.h}")
    if config.beta != 1.0:
        raise ValueError("outbedding runs the untempered flow")
    rng = make_rng(rng)
    if init is None or (isinstance(init, str) and init == "embedding"):
        idx = rng.choice(emb.sample.K, size=int(J), p=emb.weights)
        pts = emb.atoms[idx] + emb.h * emb.kernel.draw(rng, int(J))
    elif isinstance(init, str) and init == "systematic":
        pts = emb.atoms[systematic_indices(emb.weights, int(J), rng)]
    elif isinstance(init, str):
        raise ValueError(f"unknown outbedding init {init!r}")
    else:
        pts = init.positions if isinstance(init, ParticleEnsemble) else np.asarray(init, float)
    initial = ParticleEnsemble(dejitter(np.atleast_2d(pts), rng, emb.h))
    ens, trace = integrate(initial, emb, emb.kernel, config)
    return (ens, trace) if return_trace else ens


# ---------------------------------------------------------------------------
# Sequential Monte Carlo
# ---------------------------------------------------------------------------


@dataclass
class SmcModel:
    """State-space model with vectorized transition and likelihood.

    Attributes:
        dim: State dimension.
        transition: ``(points (N, d), rng) -> points (N, d)``.
        log_likelihood: ``(points (N, d), observation) -> (N,)``.
    """

    dim: int
    transition: Callable
    log_likelihood: Callable


@dataclass
class LinearGaussianModel(SmcModel):
    """``x' = A x + N(0, Q)``, ``y = H x + N(0, R)``, prior ``N(m0, P0)``."""

    A: np.ndarray = None
    Q: np.ndarray = None
    H: np.ndarray = None
    R: np.ndarray = None
    m0: np.ndarray = None
    P0: np.ndarray = None

    @classmethod
    def build(cls, A, Q, H, R, m0, P0) -> "LinearGaussianModel":
        A, Q, H, R = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, Q, H, R))
        m0 = np.atleast_1d(np.asarray(m0, dtype=float))
        P0 = np.atleast_2d(np.asarray(P0, dtype=float))
        d = A.shape[0]
        LQ = np.linalg.cholesky(Q) if np.any(Q) else np.zeros_like(Q)
        R_inv = np.linalg.inv(R)
        _, logdet_R = np.linalg.slogdet(R)
        m = H.shape[0]

        def transition(x, rng):
            x = np.atleast_2d(x)
            return x @ A.T + rng.standard_normal(x.shape) @ LQ.T

        def log_likelihood(x, y):
            r = np.asarray(y, dtype=float) - np.atleast_2d(x) @ H.T
            return -0.5 * np.einsum("ni,ij,nj->n", r, R_inv, r) - 0.5 * (
                logdet_R + m * math.log(2 * math.pi))

        return cls(d, transition, log_likelihood, A, Q, H, R, m0, P0)

    def sample_prior(self, rng, n: int) -> np.ndarray:
        return make_rng(rng).multivariate_normal(self.m0, self.P0, size=int(n))

    def simulate(self, T: int, rng):
        """True states ``x_1..x_T`` (one transition after a prior draw) and observations."""
        rng = make_rng(rng)
        x = self.sample_prior(rng, 1)
        LR = np.linalg.cholesky(self.R)
        xs, ys = [], []
        for _ in range(int(T)):
            x = self.transition(x, rng)
            xs.append(x[0])
            ys.append(x[0] @ self.H.T + LR @ rng.standard_normal(self.R.shape[0]))
        return np.array(xs), np.array(ys)


def make_rotation_model(angle: float = math.pi / 6, decay: float = 0.95, q: float = 0.3,
                        r: float = 0.5, p0: float = 1.0) -> LinearGaussianModel:
    """2D toy: damped rotation plus isotropic noise, noisy position observations."""
    c, s = math.cos(angle), math.sin(angle)
    A = decay * np.array([[c, -s], [s, c]])
    return LinearGaussianModel.build(A, q ** 2 * np.eye(2), np.eye(2), r ** 2 * np.eye(2),
                                     np.zeros(2), p0 ** 2 * np.eye(2))


def kalman_filter(model: LinearGaussianModel, observations):
    """Filtered means and covariances after each observation."""
    m, P = model.m0.copy(), model.P0.copy()
    A, Q, H, R = model.A, model.Q, model.H, model.R
    means, covs = [], []
    for y in np.atleast_2d(np.asarray(observations, dtype=float)):
        m = A @ m
        P = A @ P @ A.T + Q
        S = H @ P @ H.T + R
        G = np.linalg.solve(S, H @ P).T
        m = m + G @ (y - H @ m)
        P = P - G @ S @ G.T
        P = 0.5 * (P + P.T)
        means.append(m.copy())
        covs.append(P.copy())
    return np.array(means), np.array(covs)


def smc_analysis(model: SmcModel, current: WeightedSample, observation, rng):
    """Prediction then analysis: propagate, multiply weights by the likelihood.

    Returns:
        ``(predicted points, weighted posterior sample)``.
    """
    rng = make_rng(rng)
    pred = np.atleast_2d(model.transition(current.points, rng))
    ll = np.asarray(model.log_likelihood(pred, observation), dtype=float)
    with np.errstate(divide="ignore"):
        lw = np.log(current.weights) + ll
    if not np.any(np.isfinite(lw)):
        raise FloatingPointError("weight collapse: every particle has zero likelihood")
    return pred, WeightedSample.from_log_weights(pred, lw)


def resample(posterior: WeightedSample, J: int, method: str, rng, kernel: Kernel | None = None,
             config: FlowConfig | None = None, init=None) -> WeightedSample:
    """Equal-weight resampling, by multinomial draws or by embed-then-outbed.

    ``init`` is passed to :func:`outbed` (positions or a mode string).
    """
    rng = make_rng(rng)
    if method == "multinomial":
        idx = rng.choice(posterior.K, size=int(J), p=posterior.weights)
        return WeightedSample(posterior.points[idx])
    if method == "outbed":
        config = config or FlowConfig()
        emb = embed(posterior, kernel, config.h)
        return WeightedSample(outbed(emb, J, config, init=init, rng=rng).positions)
    raise ValueError(f"unknown resampler {method!r}")


def smc_step(model: SmcModel, current: WeightedSample, observation, resampler: str = "outbed",
             J: int | None = None, rng=None, config: FlowConfig | None = None,
             kernel: Kernel | None = None, outbed_init: str = "systematic") -> WeightedSample:
    """One filter step: prediction, analysis, then resampling to ``J`` equal weights.

    Args:
        outbed_init: Start of the outbedding flow. ``"systematic"`` puts
            points on the atoms in proportion to their weights, ``"warm"``
            starts at the predicted points (when their number equals ``J``),
            ``"embedding"`` draws from the embedding.
    """
    rng = make_rng(rng)
    J = current.K if J is None else int(J)
    pred, post = smc_analysis(model, current, observation, rng)
    return resample(post, J, resampler, rng, kernel, config, _outbed_init(outbed_init, pred, J))


def _outbed_init(mode, pred, J):
    if mode == "warm":
        return pred if pred.shape[0] == J else "embedding"
    if mode in ("systematic", "embedding"):
        return mode
    raise ValueError(f"unknown outbedding init {mode!r}")


@dataclass
class SmcRun:
    posteriors: list = field(default_factory=list)
    resampled: list = field(default_factory=list)
    ess: list = field(default_factory=list)
    mmd: list = field(default_factory=list)

    @property
    def means(self) -> np.ndarray:
        return np.array([s.mean() for s in self.resampled])

    def rows(self) -> list[dict]:
        out = []
        for t, (s, e, m) in enumerate(zip(self.resampled, self.ess, self.mmd)):
            mean = s.mean()
            row = {"step": t + 1, "ess": e, "mmd": m}
            row.update({f"mean_{k + 1}": float(v) for k, v in enumerate(mean)})
            out.append(row)
        return out


def smc_run(model: SmcModel, prior, observations, J: int = 40, resampler: str = "outbed",
            rng=None, config: FlowConfig | None = None, kernel: Kernel | None = None,
            ess_threshold: float | None = None, outbed_init: str = "systematic") -> SmcRun:
    """Run the filter over ``observations``.

    Args:
        prior: ``(rng, n) -> points`` sampler, point array, or WeightedSample.
        ess_threshold: Resample only when ESS falls below this fraction of the
            sample size; ``None`` resamples every step.
        outbed_init: Outbedding start, see :func:`smc_step`.

    Returns:
        Per step: the weighted posterior, the sample carried forward, its ESS
        before resampling, and the MMD between the posterior's embedding and
        that of the carried sample (kernel bandwidth ``config.h``).
    """
    from .evaluation import mmd

    rng = make_rng(rng)
    config = config or FlowConfig()
    _outbed_init(outbed_init, np.zeros((0, 1)), 0)
    obs = list(observations)
    if not obs:
        raise ValueError("need at least one observation")
    if callable(prior):
        current = WeightedSample(prior(rng, J))
    else:
        current = prior if isinstance(prior, WeightedSample) else WeightedSample(prior)
    out = SmcRun()
    for y in obs:
        pred, post = smc_analysis(model, current, y, rng)
        ess = post.ess
        if ess_threshold is not None and ess >= ess_threshold * post.K:
            nxt = post
        else:
            nxt = resample(post, J, resampler, rng, kernel, config,
                           _outbed_init(outbed_init, pred, J))
        out.posteriors.append(post)
        out.resampled.append(nxt)
        out.ess.append(ess)
        out.mmd.append(mmd(nxt, post, config.h))
        current = nxt
    return out
