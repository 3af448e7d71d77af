"""Adaptive one-step integrators for autonomous systems ``y' = F(y)``.

Both steppers expose ``t``, ``y``, ``f = F(y)``, ``n_rhs`` and ``step()``,
which advances by exactly one accepted step (rejections are retried
internally) without overshooting ``t_bound``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.integrate import RK45
from scipy.linalg import lu_factor, lu_solve
from scipy.sparse.linalg import LinearOperator, gmres


class StepSizeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _rms_norm(err, y_old, y_new, rtol, atol) -> float:
    scale = atol + rtol * np.maximum(np.abs(y_old), np.abs(y_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


class Ros2Stepper:
    """Two-stage L-stable Rosenbrock-W method of order 2 with embedded Euler estimate.

    ``(I - g tau A) k1 = F(y)``, ``(I - g tau A) k2 = F(y + tau k1) - 2 k1``,
    ``y+ = y + tau (3 k1 + k2) / 2`` with ``g = 1 + 1/sqrt(2)``. Order two
    holds for any matrix ``A``, so the Jacobian is refreshed only every
    ``jac_every`` accepted steps or after a rejection. With
    ``linear_solver="gmres"`` no matrix is formed: stage systems are solved by
    GMRES on finite-difference Jacobian-vector products.
    """

    gamma = 1.0 + 1.0 / math.sqrt(2.0)
    max_rejects = 60

    def __init__(self, fun, jac, y0, t0=0.0, t_bound=np.inf, first_step=1e-2, min_step=1e-12,
                 max_step=np.inf, rtol=1e-3, atol=1e-5, jac_every=10, linear_solver="dense"):
        if linear_solver not in ("dense", "gmres"):
            raise ValueError("linear_solver must be 'dense' or 'gmres'")
        if linear_solver == "dense" and jac is None:
            raise ValueError("dense linear solves need a Jacobian callable")
        self.fun, self.jac = fun, jac
        self.t = float(t0)
        self.t_bound = float(t_bound)
        self.y = np.array(y0, dtype=float)
        self.f = fun(self.y)
        self.n_rhs, self.n_jac = 1, 0
        self.tau = float(first_step)
        self.min_step, self.max_step = min_step, max_step
        self.rtol, self.atol = rtol, atol
        self.jac_every = jac_every
        self.linear_solver = linear_solver
        self._A = None
        self._lu = None
        self._since_jac = 0

    def _solve(self, tau):
        n = self.y.size
        g = self.gamma
        if self.linear_solver == "dense":
            if self._A is None:
                self._A = self.jac(self.y)
                self.n_jac += 1
                self._since_jac = 0
                self._lu = None
            if self._lu is None or self._lu[0] != tau:
                self._lu = (tau, lu_factor(np.eye(n) - g * tau * self._A, check_finite=False))
            lu = self._lu[1]
            return lambda b: lu_solve(lu, b, check_finite=False)

        y0, f0 = self.y, self.f
        ynorm = np.linalg.norm(y0)

        def matvec(v):
            nv = np.linalg.norm(v)
            if nv == 0:
                return np.zeros_like(v)
            eps = math.sqrt(np.finfo(float).eps) * (1.0 + ynorm) / nv
            self.n_rhs += 1
            return v - g * tau * (self.fun(y0 + eps * v) - f0) / eps

        op = LinearOperator((n, n), matvec=matvec, dtype=float)

        def solve(b):
            x, _ = gmres(op, b, rtol=1e-6, atol=0.0, restart=min(n, 50), maxiter=4)
            return x

        return solve

    def step(self) -> None:
        rejects = 0
        fac_max = 5.0
        while True:
            tau = min(self.tau, self.max_step, self.t_bound - self.t)
            if tau < self.min_step:
                raise StepSizeError(f"step size {tau:.3g} below minimum at t={self.t:.6g}")
            solve = self._solve(tau)
            k1 = solve(self.f)
            f1 = self.fun(self.y + tau * k1)
            k2 = solve(f1 - 2.0 * k1)
            self.n_rhs += 1
            y_new = self.y + tau * (1.5 * k1 + 0.5 * k2)
            finite = np.all(np.isfinite(y_new))
            err = _rms_norm(0.5 * tau * (k1 + k2), self.y, y_new, self.rtol, self.atol) \
                if finite else np.inf
            if err <= 1.0:
                f_new = self.fun(y_new)
                self.n_rhs += 1
                if np.all(np.isfinite(f_new)):
                    break
                err = np.inf
            rejects += 1
            if rejects > self.max_rejects:
                raise NonFiniteError(f"{rejects} consecutive step rejections at t={self.t:.6g}")
            self._A = None
            fac_max = 1.0
            self.tau = tau * (0.2 if not np.isfinite(err) else max(0.2, 0.9 / math.sqrt(err)))
        self.t += tau
        self.y, self.f = y_new, f_new
        self._since_jac += 1
        if self._since_jac >= self.jac_every:
            self._A = None
        fac = fac_max if err == 0 else min(fac_max, max(0.2, 0.9 / math.sqrt(err)))
        clipped = tau < self.tau
        # a step cut short by t_bound or max_step does not shrink the proposal
        self.tau = max(self.tau, tau * fac) if clipped else tau * fac

    @property
    def step_size(self) -> float:
        return self.tau


class Rk45Stepper:
    """Dormand-Prince 5(4) explicit stepper (scipy's ``RK45``)."""

    def __init__(self, fun, y0, t0=0.0, t_bound=np.inf, first_step=1e-2, min_step=1e-12,
                 max_step=np.inf, rtol=1e-3, atol=1e-5):
        self.n_rhs = 0

        def counted(t, y):
            self.n_rhs += 1
            return fun(y)

        self._impl = RK45(counted, t0, np.array(y0, dtype=float), t_bound, first_step=first_step,
                          max_step=max_step, rtol=rtol, atol=atol)
        self.min_step = min_step
        self.n_jac = 0

    @property
    def t(self):
        return self._impl.t

    @property
    def y(self):
        return self._impl.y

    @property
    def f(self):
        return self._impl.f

    @property
    def step_size(self):
        return self._impl.step_size

    def step(self) -> None:
        msg = self._impl.step()
        if self._impl.status == "failed":
            if not np.all(np.isfinite(self._impl.y)):
                raise NonFiniteError(msg)
            raise StepSizeError(msg or "RK45 step failed")
        if self._impl.step_size is not None and self._impl.step_size < self.min_step \
                and self._impl.status == "running":
            raise StepSizeError(f"step size {self._impl.step_size:.3g} below minimum")
