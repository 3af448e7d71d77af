"""Interacting-particle flow towards KDE points.

Each particle moves with ``v(x) = grad log rho_tar(x) - beta^-1 grad log KDE[X](x)``;
at ``beta = 1`` this is ``grad log(rho_tar / KDE)``. Integration stops once the
largest particle speed ``nu_t`` drops below ``stop_eps``. At that point the KDE
score matches the (tempered) target score at every particle to ``stop_eps``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from ._solvers import NonFiniteError, Ros2Stepper, Rk45Stepper, StepSizeError
from .core import (Kernel, ParticleEnsemble, TargetDensity, _check_bandwidth, initial_ensemble,
                   make_kernel, make_rng)
from .kde import kde_log_density, kde_score, self_score, self_score_jacobian

SOLVERS = ("semi_implicit", "adaptive_explicit")


class FlowError(FloatingPointError):
    """Non-finite particle state during integration."""


@dataclass(frozen=True)
class FlowConfig:
    """Integration settings.

    ``rtol``/``atol`` are the per-step local error tolerances; ``max_time`` is
    a duration measured from the initial ensemble's time stamp. The explicit
    solver caps both at ``1e-2 * stop_eps``: with looser control its steps
    settle on the stability boundary and ``nu_t`` stalls above ``stop_eps``.
    """

    h: float = 0.3
    beta: float = 1.0
    stop_eps: float = 1e-4
    max_time: float = 1e4
    solver: str = "semi_implicit"
    first_step: float = 1e-2
    min_step: float = 1e-12
    max_step: float = np.inf
    rtol: float = 1e-3
    atol: float = 1e-5
    linear_solver: str = "dense"
    jac_every: int = 10

    def __post_init__(self):
        _check_bandwidth(self.h)
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if not self.stop_eps > 0:
            raise ValueError("stop_eps must be positive")
        if not self.max_time > 0:
            raise ValueError("max_time must be positive")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if not 0 < self.min_step <= self.first_step:
            raise ValueError("need 0 < min_step <= first_step")


@dataclass(frozen=True)
class TemperLadder:
    betas: tuple

    def __post_init__(self):
        b = tuple(float(v) for v in self.betas)
        if not b:
            raise ValueError("ladder needs at least one inverse temperature")
        if any(not 0.0 < v <= 1.0 for v in b):
            raise ValueError("inverse temperatures must lie in (0, 1]")
        if any(x > y for x, y in zip(b, b[1:])):
            raise ValueError("inverse temperatures must be nondecreasing")
        if b[-1] != 1.0:
            raise ValueError("ladder must end at beta = 1")
        object.__setattr__(self, "betas", b)


@dataclass
class FlowTrace:
    """Snapshots of an integration run; ``nu`` is recorded as computed."""

    times: list = field(default_factory=list)
    positions: list = field(default_factory=list)
    nu: list = field(default_factory=list)
    betas: list = field(default_factory=list)
    converged: bool = False
    message: str = ""
    n_steps: int = 0
    n_rhs: int = 0

    def record(self, t, positions, nu, beta):
        self.times.append(float(t))
        self.positions.append(np.array(positions, dtype=float))
        self.nu.append(float(nu))
        self.betas.append(float(beta))

    def extend(self, other: "FlowTrace") -> None:
        self.times += other.times
        self.positions += other.positions
        self.nu += other.nu
        self.betas += other.betas
        self.n_steps += other.n_steps
        self.n_rhs += other.n_rhs
        self.converged = other.converged
        self.message = other.message

    def to_dict(self) -> dict:
        return {"times": self.times, "nu": self.nu, "betas": self.betas,
                "positions": [p.tolist() for p in self.positions],
                "converged": self.converged, "message": self.message,
                "n_steps": self.n_steps, "n_rhs": self.n_rhs}


def _positions(ensemble) -> np.ndarray:
    if isinstance(ensemble, ParticleEnsemble):
        return ensemble.positions
    return np.atleast_2d(np.asarray(ensemble, dtype=float))


def velocity_field(ensemble, target: TargetDensity, kernel: Kernel, h: float, beta: float, x):
    """Tempered velocity ``grad log rho_tar(x) - kde_score(x) / beta`` at ``x``."""
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    centers = _positions(ensemble)
    return target.score(x) - kde_score(centers, kernel, h, x) / beta


def ensemble_velocity(X: np.ndarray, target: TargetDensity, kernel: Kernel, h: float,
                      beta: float = 1.0) -> np.ndarray:
    """Velocities of all particles at their own positions, ``(J, d)``."""
    return target._score(X) - self_score(X, kernel, h) / beta


def _velocity_jacobian(X, target, kernel, h, beta):
    J, d = X.shape
    jac = -self_score_jacobian(X, kernel, h) / beta
    hess = target._score_jacobian(X)
    for i in range(J):
        jac[i * d:(i + 1) * d, i * d:(i + 1) * d] += hess[i]
    return jac


def _max_speed(f: np.ndarray, d: int) -> float:
    return float(np.max(np.linalg.norm(f.reshape(-1, d), axis=1)))


def integrate(initial: ParticleEnsemble, target: TargetDensity, kernel: Kernel,
              config: FlowConfig = FlowConfig(), trace: bool = False):
    """Integrate the particle ODE until ``nu_t < stop_eps`` or ``max_time`` elapses.

    Args:
        initial: Starting ensemble (pairwise distinct positions).
        target: Target density; only its score is used.
        kernel: Smoothing kernel of the KDE.
        config: Bandwidth, inverse temperature, solver and stopping settings.
        trace: Record every accepted step, not just the endpoints.

    Returns:
        ``(ensemble, trace)``. ``trace.converged`` is False when ``max_time`` ran
        out first; the ensemble is then the last state reached.

    Raises:
        FlowError: a non-finite state was produced.
    """
    if not isinstance(initial, ParticleEnsemble):
        initial = ParticleEnsemble(initial)
    if initial.dim != target.dim or kernel.dim != target.dim:
        raise ValueError("ensemble, target and kernel dimensions differ")
    X0 = initial.positions
    J, d = X0.shape
    h, beta, eps = config.h, config.beta, config.stop_eps

    def rhs(y):
        return ensemble_velocity(y.reshape(J, d), target, kernel, h, beta).ravel()

    def jac(y):
        return _velocity_jacobian(y.reshape(J, d), target, kernel, h, beta)

    out = FlowTrace()
    t0 = initial.t
    t_end = t0 + config.max_time
    f0 = rhs(X0.ravel())
    _check_finite(X0.ravel(), f0, 0, d, t0)
    nu = _max_speed(f0, d)
    out.record(t0, X0, nu, beta)
    out.n_rhs = 1
    if nu < eps:
        out.converged = True
        out.message = "already stationary"
        return initial, out

    common = dict(t0=t0, t_bound=t_end, first_step=config.first_step, min_step=config.min_step,
                  max_step=config.max_step, rtol=config.rtol, atol=config.atol)
    if config.solver == "semi_implicit":
        stepper = Ros2Stepper(rhs, jac, X0.ravel(), jac_every=config.jac_every,
                              linear_solver=config.linear_solver, **common)
    else:
        common.update(rtol=min(config.rtol, 1e-2 * eps), atol=min(config.atol, 1e-2 * eps))
        stepper = Rk45Stepper(rhs, X0.ravel(), **common)

    n = 0
    while True:
        try:
            stepper.step()
        except (NonFiniteError, StepSizeError) as exc:
            raise FlowError(f"integration failed after {n} steps: {exc}") from exc
        n += 1
        _check_finite(stepper.y, stepper.f, n, d, stepper.t)
        nu = _max_speed(stepper.f, d)
        if nu < eps:
            out.converged = True
            out.message = "stopping criterion met"
            break
        if stepper.t >= t_end:
            out.message = f"max_time reached with nu={nu:.3g} >= stop_eps={eps:.3g}"
            break
        if trace:
            out.record(stepper.t, stepper.y.reshape(J, d), nu, beta)
    out.record(stepper.t, stepper.y.reshape(J, d), nu, beta)
    out.n_steps = n
    out.n_rhs = stepper.n_rhs + 1
    final = ParticleEnsemble(stepper.y.reshape(J, d), t=stepper.t, require_distinct=False)
    return final, out


def _check_finite(y, f, step, d, t):
    bad = ~(np.isfinite(y) & np.isfinite(f))
    if np.any(bad):
        j = int(np.flatnonzero(bad)[0]) // d
        raise FlowError(f"non-finite state at step {step} (t={t:.6g}), particle {j}")


def sde_baseline(initial, target: TargetDensity, dt: float, n_steps: int, rng,
                 noise: bool = True, beta: float = 1.0) -> ParticleEnsemble:
    """Euler-Maruyama for overdamped Langevin ``dY = grad log rho_tar dt + sqrt(2/beta) dW``.

    Comparison baseline only. ``noise=False`` gives plain gradient ascent on
    ``log rho_tar``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    rng = make_rng(rng)
    X = np.array(_positions(initial), dtype=float)
    drift = target._score(X)
    if not np.any(drift) and not np.any(target._score(X + 1.0)):
        raise ValueError("target drift vanishes identically: improper (flat) target")
    amp = math.sqrt(2.0 * dt / beta)
    for k in range(int(n_steps)):
        X = X + drift * dt
        if noise:
            X = X + amp * rng.standard_normal(X.shape)
        if not np.all(np.isfinite(X)):
            raise FlowError(f"non-finite state at Euler-Maruyama step {k + 1}")
        drift = target._score(X)
    return ParticleEnsemble(X, require_distinct=False)


def anneal(initial: ParticleEnsemble, target: TargetDensity, kernel: Kernel,
           ladder: TemperLadder, config: FlowConfig = FlowConfig(), trace: bool = False):
    """Run the flow to convergence at each inverse temperature of ``ladder`` in turn."""
    if not isinstance(ladder, TemperLadder):
        ladder = TemperLadder(tuple(ladder))
    ens = initial
    full = FlowTrace()
    for b in ladder.betas:
        ens, tr = integrate(ens, target, kernel, replace(config, beta=b), trace=trace)
        full.extend(tr)
    return ens, full


def ratio_fluctuation(ensemble, target: TargetDensity, kernel: Kernel, h: float,
                      beta: float = 1.0):
    """KDE-to-target ratios at the particles and their max/min factor.

    The target enters unnormalized (and tempered by ``beta``), so only the
    spread of the ratios is meaningful.
    """
    X = _positions(ensemble)
    log_r = kde_log_density(X, kernel, h, X) - beta * target.log_density(X)
    return np.exp(log_r), float(math.exp(log_r.max() - log_r.min()))


class AutoAnnealResult(NamedTuple):
    ensemble: ParticleEnsemble
    ladder: TemperLadder
    factor: float
    resolved: bool
    trace: FlowTrace


class AnnealingWarning(UserWarning):
    pass


def auto_anneal(initial: ParticleEnsemble, target: TargetDensity, kernel: Kernel,
                config: FlowConfig = FlowConfig(), factor_threshold: float = 10.0,
                temp_multiplier: float = 3.0, max_rounds: int = 5) -> AutoAnnealResult:
    """Heat until the ratio fluctuation is acceptable, then cool back to ``beta = 1``.

    Round one runs untempered. While the max/min ratio at the particles exceeds
    ``factor_threshold``, the temperature is multiplied by ``temp_multiplier``
    and the flow is continued from the current particles, checking against the
    tempered target. Once acceptable (or after ``max_rounds``), the flow is
    replayed through the visited temperatures in decreasing order down to 1.
    The returned ``factor`` is measured on the final, untempered ensemble.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be at least 1")
    cfg = replace(config, beta=1.0)
    ens, full = integrate(initial, target, kernel, cfg)
    _, factor = ratio_fluctuation(ens, target, kernel, cfg.h)
    betas = [1.0]
    rounds = 1
    while factor > factor_threshold and rounds < max_rounds:
        b = betas[-1] / temp_multiplier
        ens, tr = integrate(ens, target, kernel, replace(cfg, beta=b))
        full.extend(tr)
        betas.append(b)
        _, factor = ratio_fluctuation(ens, target, kernel, cfg.h, beta=b)
        rounds += 1
    resolved = factor <= factor_threshold
    if len(betas) > 1:
        for b in reversed(betas[:-1]):
            ens, tr = integrate(ens, target, kernel, replace(cfg, beta=b))
            full.extend(tr)
        _, factor = ratio_fluctuation(ens, target, kernel, cfg.h)
    if not resolved:
        warnings.warn(f"ratio fluctuation still above {factor_threshold} after {max_rounds} "
                      "rounds; increase the number of points J and/or adapt the bandwidth h",
                      AnnealingWarning, stacklevel=2)
    return AutoAnnealResult(ens, TemperLadder(tuple(sorted(betas))), factor, resolved, full)


def kde_points(target: TargetDensity, J: int, kernel: Kernel | None = None,
               config: FlowConfig = FlowConfig(), rng=None, init_mean=None,
               init_scale: float = 1.0, initial=None):
    """Convenience wrapper: draw a Gaussian reference ensemble and integrate.

    Returns ``(ensemble, trace)`` like :func:`integrate`.
    """
    kernel = kernel or make_kernel("gaussian", target.dim)
    if initial is None:
        initial = initial_ensemble(J, target.dim, make_rng(rng), init_mean, init_scale, config.h)
    return integrate(initial, target, kernel, config)
