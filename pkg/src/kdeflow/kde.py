"""Kernel density estimates of point sets and the frozen mixture approximation.

``KDE[X](x) = (1/J) sum_j kappa^h(x - X_j)``. Sums run over centers in index
order with the largest term as log-sum-exp pivot, so results do not depend on
how query points are batched.
"""

from __future__ import annotations

import csv
import json
import math

import numpy as np
from scipy.special import logsumexp, softmax

from .core import (Kernel, TargetDensity, _as_points, _check_bandwidth, _unbatch,
                   has_coincident_points, kernel_from_dict)


def _check_centers(centers, kernel: Kernel) -> np.ndarray:
    c = np.asarray(centers, dtype=float)
    if c.ndim == 1:
        c = c[:, None] if kernel.dim == 1 else c[None, :]
    if c.shape[0] == 0:
        raise ValueError("center set is empty")
    if c.shape[1] != kernel.dim:
        raise ValueError(f"centers have dimension {c.shape[1]}, kernel has {kernel.dim}")
    return c


def _log_terms(c: np.ndarray, kernel: Kernel, h: float, x: np.ndarray):
    """Kernel log-values ``log kappa((x_n - X_j)/h)`` and the scaled offsets, ``(N, J)``."""
    u = (x[:, None, :] - c[None, :, :]) / h
    logk = kernel._log1(u).sum(axis=-1)
    return logk, u


def kde_log_density(centers, kernel: Kernel, h: float, x):
    """Log of the kernel density estimate at ``x``.

    Args:
        centers: ``(J, d)`` kernel centers.
        kernel: Base kernel ``kappa``.
        h: Bandwidth.
        x: Query point ``(d,)`` or points ``(N, d)``.
    """
    _check_bandwidth(h)
    c = _check_centers(centers, kernel)
    pts, single = _as_points(x, kernel.dim)
    logk, _ = _log_terms(c, kernel, h, pts)
    out = logsumexp(logk, axis=1) - math.log(c.shape[0]) - kernel.dim * math.log(h)
    return _unbatch(out, single)


def kde_score(centers, kernel: Kernel, h: float, x):
    """Gradient of ``log KDE`` at ``x``, via softmax-weighted kernel scores."""
    _check_bandwidth(h)
    c = _check_centers(centers, kernel)
    pts, single = _as_points(x, kernel.dim)
    logk, u = _log_terms(c, kernel, h, pts)
    w = softmax(logk, axis=1)
    out = np.einsum("nj,njd->nd", w, kernel._dlog1(u)) / h
    return _unbatch(out, single)


def self_score(centers: np.ndarray, kernel: Kernel, h: float) -> np.ndarray:
    """``kde_score`` of the centers evaluated at the centers themselves, ``(J, d)``."""
    return kde_score(centers, kernel, h, centers)


def self_score_jacobian(centers: np.ndarray, kernel: Kernel, h: float) -> np.ndarray:
    """Jacobian of ``X -> (kde_score[X](X_i))_i`` as a ``(J d, J d)`` matrix.

    Row block ``i`` and column block ``j`` hold ``d S_i / d X_j``, where ``S_i``
    is the KDE score of the ensemble at its own member ``X_i``.
    """
    c = np.asarray(centers, dtype=float)
    J, d = c.shape
    logk, u = _log_terms(c, kernel, h, c)
    w = softmax(logk, axis=1)
    g = kernel._dlog1(u) / h                      # (J, J, d) kernel scores
    s = np.einsum("ij,ijd->id", w, g)
    hess = kernel._d2log1(u) / h ** 2              # diagonal Hessian of log kappa^h
    m = np.einsum("ija,ijb->ijab", g - s[:, None, :], g)
    m[..., np.arange(d), np.arange(d)] += hess
    m *= w[:, :, None, None]
    blocks = -m
    blocks[np.arange(J), np.arange(J)] += m.sum(axis=1)
    return blocks.transpose(0, 2, 1, 3).reshape(J * d, J * d)


class MixtureApprox(TargetDensity):
    """Equal-weight kernel mixture ``(1/J) sum_j kappa^h(. - X_j)`` of distinct centers.

    Normalized, so ``log_normalizer`` is 0; usable anywhere a target is.
    """

    def __init__(self, centers, kernel: Kernel, h: float):
        _check_bandwidth(h)
        c = np.array(_check_centers(centers, kernel), dtype=float)
        if not np.all(np.isfinite(c)):
            raise ValueError("centers must be finite")
        if has_coincident_points(c):
            raise ValueError("mixture centers must be pairwise distinct")
        super().__init__(kernel.dim, 0.0)
        c.setflags(write=False)
        self.centers = c
        self.kernel = kernel
        self.h = float(h)

    @property
    def J(self) -> int:
        return self.centers.shape[0]

    def _log_density(self, x):
        logk, _ = _log_terms(self.centers, self.kernel, self.h, x)
        return logsumexp(logk, axis=1) - math.log(self.J) - self.dim * math.log(self.h)

    def _score(self, x):
        return kde_score(self.centers, self.kernel, self.h, x)

    def density(self, x):
        return np.exp(self.log_density(x))

    def mean(self) -> np.ndarray:
        return self.centers.mean(axis=0)

    def to_dict(self) -> dict:
        return {"family": "mixture", "kernel": self.kernel.to_dict(), "h": self.h,
                "centers": self.centers.tolist()}

    @classmethod
    def from_dict(cls, spec: dict) -> "MixtureApprox":
        return cls(np.asarray(spec["centers"], dtype=float), kernel_from_dict(spec["kernel"]),
                   float(spec["h"]))

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    def centers_to_csv(self, path) -> None:
        from .io import write_points_csv
        write_points_csv(path, self.centers)

    @classmethod
    def from_json(cls, path) -> "MixtureApprox":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def read_centers_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)


def smoothing_limit_check(sampler, kernel: Kernel, h: float, J: int, grid, rng,
                          convolved=None, density=None) -> float:
    """Max deviation between the KDE of ``J`` iid draws and ``rho * kappa^h``.

    Args:
        sampler: ``sampler(rng, J) -> (J, d)`` iid draws from ``rho``.
        grid: ``(N, d)`` query points.
        convolved: Callable giving ``(rho * kappa^h)(x)`` on ``(N, d)`` points.
            If omitted it is computed by quadrature of ``density`` over the
            grid, which must then be a regular tensor grid in ``d <= 2``.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.shape[1] != kernel.dim and grid.shape[0] == 1:
        grid = grid.T
    pts = np.asarray(sampler(rng, J), dtype=float).reshape(J, kernel.dim)
    est = np.exp(kde_log_density(pts, kernel, h, grid))
    if convolved is not None:
        ref = np.asarray(convolved(grid), dtype=float)
    else:
        if density is None:
            raise ValueError("need either the analytic convolution or the density")
        ref = _convolve_on_grid(density, kernel, h, grid)
    return float(np.max(np.abs(est - ref)))


def _convolve_on_grid(density, kernel: Kernel, h: float, grid: np.ndarray) -> np.ndarray:
    # trapezoid weights of a tensor grid, recovered from the unique node coordinates
    axes = [np.unique(grid[:, k]) for k in range(grid.shape[1])]
    wts = np.ones(grid.shape[0])
    for k, ax in enumerate(axes):
        tw = np.zeros_like(ax)
        dx = np.diff(ax)
        tw[:-1] += 0.5 * dx
        tw[1:] += 0.5 * dx
        wts *= tw[np.searchsorted(ax, grid[:, k])]
    rho = np.asarray(density(grid), dtype=float) * wts
    logk, _ = _log_terms(grid, kernel, h, grid)
    return np.exp(logk - kernel.dim * math.log(h)) @ rho
