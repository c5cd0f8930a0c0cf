"""Implicit gradients and Hessian-vector products of ``g(y(theta), theta)``.

``y(theta)`` is defined by ``r(y, theta) = 0``.  Both the residual and the
objective are duck-typed; each must provide

* residual: ``__call__(y, th)``, ``jacobian(y, th)``, ``jvp(y, th, dy, dth)``,
  ``vjp(y, th, w)``, ``second(y, th, w, dy, dth, mode)``, ``initial_guess()``,
  ``n_state``, ``n_param``
* objective: ``__call__(y, th)``, ``grad(y, th)``,
  ``second(y, th, dy, dth, mode)``

where ``second`` returns the gradient, with respect to ``(y, theta)``, of the
directional derivative along ``(dy, dth)`` (contracted with ``w`` for the
residual).  :class:`~hessfem.fem.FemResidual` and
:class:`~hessfem.fem.FemObjective` are the mesh-based implementations;
:class:`KernelResidual` and :class:`KernelObjective` wrap small dense kernels.
"""
from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import ad
from .fem import NonFiniteError
from .sparse import Factorization, SparseMatrix, factorize, from_triplets

__all__ = [
    "NewtonConvergenceError",
    "ImplicitProblem",
    "ForwardSolution",
    "HvpWorkspace",
    "KernelResidual",
    "KernelObjective",
    "newton_solve",
    "solve_forward",
    "solve_adjoint",
    "objective",
    "gradient",
    "hvp",
    "fd_hvp",
    "full_hessian",
]

FULL_HESSIAN_MAX = 512


class NewtonConvergenceError(RuntimeError):
    pass


@dataclass
class HvpWorkspace:
    """Forward/adjoint state cached for one bit-exact ``theta``."""

    key: bytes
    theta: np.ndarray
    y: np.ndarray
    factor: Factorization
    lam: np.ndarray | None = None


@dataclass(eq=False)
class ImplicitProblem:
    residual: object
    objective: object
    newton_tol: float = 1e-10
    newton_max_iter: int = 20
    max_halvings: int = 10
    mode: str = ad.DEFAULT_MODE
    counters: Counter = field(default_factory=Counter)
    workspace: HvpWorkspace | None = field(default=None, repr=False)
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    @property
    def n_state(self) -> int:
        return self.residual.n_state

    @property
    def n_param(self) -> int:
        return self.residual.n_param


@dataclass
class ForwardSolution:
    y: np.ndarray
    factor: Factorization
    n_iter: int
    residual_norm: float


def _as_param(p: ImplicitProblem, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (p.n_param,):
        raise ValueError(f"parameter vector has shape {theta.shape}, expected ({p.n_param},)")
    if not np.all(np.isfinite(theta)):
        raise ValueError("parameter vector is not finite")
    return theta


def newton_solve(p: ImplicitProblem, theta) -> ForwardSolution:
    """Newton iteration with step halving on the residual 2-norm.

    Converged when ``|r|_inf <= newton_tol * max(1, |r(y0)|_inf)``.  The
    returned factorization is of the Jacobian at the converged state.
    """
    theta = _as_param(p, theta)
    res = p.residual
    y = res.initial_guess()
    r = res(y, theta)
    tol = p.newton_tol * max(1.0, np.max(np.abs(r), initial=0.0))
    for it in range(p.newton_max_iter + 1):
        rnorm = np.max(np.abs(r), initial=0.0)
        F = factorize(res.jacobian(y, theta))
        if rnorm <= tol:
            p.counters["forward"] += 1
            p.counters["newton_iter"] += it
            return ForwardSolution(y, F, it, float(rnorm))
        if it == p.newton_max_iter:
            break
        dy = -F.solve(r)
        merit = np.linalg.norm(r)
        step = 1.0
        for _ in range(p.max_halvings + 1):
            y_try = y + step * dy
            try:
                r_try = res(y_try, theta)
            except NonFiniteError:
                r_try = None
            if r_try is not None and np.linalg.norm(r_try) < merit:
                break
            step *= 0.5
        if r_try is None:
            raise NewtonConvergenceError("residual stayed non-finite after step halving")
        y, r = y_try, r_try
    raise NewtonConvergenceError(
        f"Newton did not converge in {p.newton_max_iter} iterations (|r|_inf={rnorm:.3e})")


def _state(p: ImplicitProblem, theta: np.ndarray, adjoint: bool) -> HvpWorkspace:
    key = theta.tobytes()
    ws = p.workspace
    if ws is None or ws.key != key:
        sol = newton_solve(p, theta)
        ws = HvpWorkspace(key, theta.copy(), sol.y, sol.factor)
        p.workspace = ws
    if adjoint and ws.lam is None:
        ws.lam = _adjoint(p, ws)
    return ws


def _adjoint(p: ImplicitProblem, ws: HvpWorkspace) -> np.ndarray:
    gy, _ = p.objective.grad(ws.y, ws.theta)
    p.counters["adjoint"] += 1
    return ws.factor.solve_transpose(-gy)


def solve_forward(p: ImplicitProblem, theta) -> np.ndarray:
    theta = _as_param(p, theta)
    with p._lock:
        return _state(p, theta, adjoint=False).y.copy()


def solve_adjoint(p: ImplicitProblem, theta, y=None) -> np.ndarray:
    """Adjoint vector solving ``(dr/dy)^T lam = -(dg/dy)^T``.

    With ``y`` given, the Jacobian is assembled there; otherwise the cached
    forward state for ``theta`` is used (solving it if needed).
    """
    theta = _as_param(p, theta)
    if y is not None:
        F = factorize(p.residual.jacobian(y, theta))
        ws = HvpWorkspace(b"", theta, np.asarray(y, dtype=float), F)
        return _adjoint(p, ws)
    with p._lock:
        return _state(p, theta, adjoint=True).lam.copy()


def objective(p: ImplicitProblem, theta) -> float:
    theta = _as_param(p, theta)
    with p._lock:
        ws = _state(p, theta, adjoint=False)
        return p.objective(ws.y, theta)


def gradient(p: ImplicitProblem, theta) -> np.ndarray:
    """Total derivative ``dg/dtheta = dg/dtheta|_y + lam^T dr/dtheta``."""
    theta = _as_param(p, theta)
    with p._lock:
        ws = _state(p, theta, adjoint=True)
        _, g_th = p.objective.grad(ws.y, theta)
        _, r_th = p.residual.vjp(ws.y, theta, ws.lam)
        return g_th + r_th


def hvp(p: ImplicitProblem, theta, theta_hat, mode: str | None = None) -> np.ndarray:
    """Implicit Hessian-vector product ``H theta_hat``.

    Forward and adjoint states are cached per ``theta``; each call then
    costs one incremental forward and one incremental adjoint solve on the
    cached factorization, plus four nested-AD evaluations.
    """
    theta = _as_param(p, theta)
    th_hat = np.asarray(theta_hat, dtype=float)
    if th_hat.shape != theta.shape or not np.all(np.isfinite(th_hat)):
        raise ValueError("incremental parameter vector must be finite with the shape of theta")
    mode = p.mode if mode is None else mode
    if mode not in ad.MODES:
        raise ad.UnsupportedModeError(mode)
    res, obj = p.residual, p.objective
    with p._lock:
        ws = _state(p, theta, adjoint=True)
        y, lam, F = ws.y, ws.lam, ws.factor
        p.counters["hvp"] += 1

        # incremental forward
        y_hat = F.solve(-res.jvp(y, theta, None, th_hat))

        # second-order terms along theta_hat and along y_hat
        g_y_th, g_th_th = obj.second(y, theta, None, th_hat, mode)
        r_y_th, r_th_th = res.second(y, theta, lam, None, th_hat, mode)
        g_y_y, g_th_y = obj.second(y, theta, y_hat, None, mode)
        r_y_y, r_th_y = res.second(y, theta, lam, y_hat, None, mode)

        # incremental adjoint
        lam_hat = F.solve_transpose(-(g_y_y + r_y_y) - (g_y_th + r_y_th))

        _, r_th_lamhat = res.vjp(y, theta, lam_hat)
        return g_th_th + r_th_th + g_th_y + r_th_y + r_th_lamhat


def fd_hvp(p: ImplicitProblem, theta, theta_hat, h: float = 1e-3) -> np.ndarray:
    """Central difference of the implicit gradient along ``theta_hat``."""
    if not h > 0:
        raise ValueError("step size must be positive")
    theta = _as_param(p, theta)
    th_hat = np.asarray(theta_hat, dtype=float)
    return (gradient(p, theta + h * th_hat) - gradient(p, theta - h * th_hat)) / (2 * h)


def full_hessian(p: ImplicitProblem, theta, mode: str | None = None) -> np.ndarray:
    """Dense Hessian assembled column by column from :func:`hvp`."""
    M = p.n_param
    if M > FULL_HESSIAN_MAX:
        raise ValueError(f"full_hessian is limited to {FULL_HESSIAN_MAX} parameters, got {M}")
    H = np.empty((M, M))
    e = np.zeros(M)
    for j in range(M):
        e[j] = 1.0
        H[:, j] = hvp(p, theta, e, mode)
        e[j] = 0.0
    return H


# ---------------------------------------------------------------------------
# Dense kernel-backed residual/objective for small problems.


class KernelResidual:
    """Residual given by one kernel ``[y..., theta...] -> r`` of size N+M -> N."""

    def __init__(self, kernel: ad.KernelFunction, n_state: int, n_param: int, y0=None):
        if kernel.arity_in != n_state + n_param or kernel.arity_out != n_state:
            raise ValueError("kernel arity does not match n_state/n_param")
        self.kernel = kernel
        self.n_state, self.n_param = n_state, n_param
        self._y0 = np.zeros(n_state) if y0 is None else np.asarray(y0, dtype=float)

    def initial_guess(self) -> np.ndarray:
        return self._y0.copy()

    def _z(self, y, theta):
        return np.concatenate([np.asarray(y, float), np.asarray(theta, float)])

    def _t(self, dy, dth):
        dy = np.zeros(self.n_state) if dy is None else dy
        dth = np.zeros(self.n_param) if dth is None else dth
        return self._z(dy, dth)

    def __call__(self, y, theta):
        r = self.kernel(self._z(y, theta))
        if not np.all(np.isfinite(r)):
            raise NonFiniteError("non-finite residual")
        return r

    def jacobian(self, y, theta) -> SparseMatrix:
        N = self.n_state
        z = self._z(y, theta)
        cols = [ad.jvp(self.kernel, z, np.eye(N + self.n_param)[j]) for j in range(N)]
        J = np.column_stack(cols)
        r, c = np.nonzero(J)
        return from_triplets(N, N, r, c, J[r, c])

    def jvp(self, y, theta, dy=None, dtheta=None):
        return ad.jvp(self.kernel, self._z(y, theta), self._t(dy, dtheta))

    def vjp(self, y, theta, w):
        zb = ad.vjp(self.kernel, self._z(y, theta), w)
        return zb[:self.n_state], zb[self.n_state:]

    def second(self, y, theta, w, dy=None, dtheta=None, mode=ad.DEFAULT_MODE):
        zb = ad.compose_second_order(self.kernel, self._z(y, theta), mode, w, self._t(dy, dtheta))
        return zb[:self.n_state], zb[self.n_state:]


class KernelObjective:
    """Objective given by one scalar kernel ``[y..., theta...] -> [g]``."""

    def __init__(self, kernel: ad.KernelFunction, n_state: int, n_param: int):
        if kernel.arity_in != n_state + n_param or kernel.arity_out != 1:
            raise ValueError("kernel arity does not match n_state/n_param")
        self.kernel = kernel
        self.n_state, self.n_param = n_state, n_param

    def _z(self, y, theta):
        return np.concatenate([np.asarray(y, float), np.asarray(theta, float)])

    def __call__(self, y, theta) -> float:
        return float(self.kernel(self._z(y, theta))[0])

    def grad(self, y, theta):
        zb = ad.vjp(self.kernel, self._z(y, theta), [1.0])
        return zb[:self.n_state], zb[self.n_state:]

    def second(self, y, theta, dy=None, dtheta=None, mode=ad.DEFAULT_MODE):
        dy = np.zeros(self.n_state) if dy is None else dy
        dtheta = np.zeros(self.n_param) if dtheta is None else dtheta
        zb = ad.compose_second_order(self.kernel, self._z(y, theta), mode, [1.0], self._z(dy, dtheta))
        return zb[:self.n_state], zb[self.n_state:]
