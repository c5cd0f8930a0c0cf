"""L-BFGS and truncated Newton-CG driven by gradient / Hessian-vector callbacks."""
from __future__ import annotations

import csv
import json
import time
import warnings
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import line_search

__all__ = [
    "OptimizeSettings",
    "IterationRecord",
    "OptimizeResult",
    "minimize_lbfgs",
    "minimize_newton_cg",
    "truncated_cg",
    "write_records_jsonl",
    "write_records_csv",
]

CSV_COLUMNS = ("iter", "elapsed_s", "objective", "grad_norm", "n_hvp_calls")


@dataclass(frozen=True)
class OptimizeSettings:
    max_iter: int = 100
    grad_tol: float = 1e-8
    cg_max_iter: int = 100
    cg_forcing: float = 0.5
    lbfgs_memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    record_time: bool = True

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("Wolfe constants need 0 < c1 < c2 < 1")
        if self.lbfgs_memory < 1:
            raise ValueError("lbfgs_memory must be >= 1")
        if self.max_iter < 0 or self.cg_max_iter < 1:
            raise ValueError("iteration limits must be positive")


@dataclass(frozen=True)
class IterationRecord:
    iter: int
    elapsed: float
    objective: float
    grad_norm: float
    n_hvp_calls: int = 0

    def as_row(self) -> dict:
        return {"iter": self.iter, "elapsed_s": self.elapsed, "objective": self.objective,
                "grad_norm": self.grad_norm, "n_hvp_calls": self.n_hvp_calls}


@dataclass
class OptimizeResult:
    """``status`` is one of converged, max-iter, line-search-failure."""

    x: np.ndarray
    records: list[IterationRecord]
    status: str
    message: str = ""
    settings: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def fun(self) -> float:
        return self.records[-1].objective


class _Clock:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.t0 = time.perf_counter()

    def __call__(self) -> float:
        return time.perf_counter() - self.t0 if self.enabled else 0.0


# Failures of the underlying model at a trial point (e.g. a forward solve
# that does not converge) make that point infeasible rather than fatal.
_EVAL_ERRORS = (ArithmeticError, np.linalg.LinAlgError, RuntimeError)
MAX_SHORTEN = 30


def _safe(obj):
    def f(x):
        try:
            v = float(obj(x))
        except _EVAL_ERRORS:
            return np.inf
        return v if np.isfinite(v) else np.inf
    return f


def _wolfe_step(obj, grad, x, d, f, g, s: OptimizeSettings):
    safe = _safe(obj)
    for _ in range(MAX_SHORTEN):
        if np.isfinite(safe(x + d)):
            break
        d = 0.5 * d
    else:
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # scipy warns on failure; we report it ourselves
        try:
            alpha, _, _, f_new, _, g_new = line_search(safe, grad, x, d, g, f, None,
                                                       c1=s.c1, c2=s.c2, maxiter=20)
        except _EVAL_ERRORS:
            return None
    if alpha is None or not np.isfinite(f_new):
        return None
    x_new = x + alpha * d
    if g_new is None:
        g_new = grad(x_new)
    return alpha, x_new, f_new, np.asarray(g_new, dtype=float)


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    if S:
        q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def minimize_lbfgs(obj: Callable, grad: Callable, theta0, settings: OptimizeSettings | None = None,
                   callback: Callable | None = None) -> OptimizeResult:
    """Limited-memory BFGS with a strong-Wolfe line search.

    Curvature pairs with ``s^T y <= 0`` are skipped.  The first step uses
    the normalized steepest-descent direction.
    """
    s = settings or OptimizeSettings()
    clock = _Clock(s.record_time)
    x = np.array(theta0, dtype=float)
    f, g = float(obj(x)), np.asarray(grad(x), dtype=float)
    records = [IterationRecord(0, clock(), f, float(np.max(np.abs(g))), 0)]
    S: deque = deque(maxlen=s.lbfgs_memory)
    Y: deque = deque(maxlen=s.lbfgs_memory)
    status, msg = "max-iter", ""
    for k in range(1, s.max_iter + 1):
        if records[-1].grad_norm <= s.grad_tol:
            status = "converged"
            break
        if S:
            d = -_two_loop(g, S, Y)
        else:
            d = -g / np.linalg.norm(g)
        if d @ g >= 0:
            S.clear()
            Y.clear()
            d = -g / np.linalg.norm(g)
        step = _wolfe_step(obj, grad, x, d, f, g, s)
        if step is None:
            status, msg = "line-search-failure", f"no strong-Wolfe step at iteration {k}"
            break
        alpha, x_new, f_new, g_new = step
        sk, yk = x_new - x, g_new - g
        if sk @ yk > 0:
            S.append(sk)
            Y.append(yk)
        x, f, g = x_new, float(f_new), g_new
        records.append(IterationRecord(k, clock(), f, float(np.max(np.abs(g))), 0))
        if callback is not None:
            callback(x, records[-1])
    else:
        if records[-1].grad_norm <= s.grad_tol:
            status = "converged"
    return OptimizeResult(x, records, status, msg, asdict(s))


def truncated_cg(hessp: Callable, g: np.ndarray, tol: float, max_iter: int) -> tuple[np.ndarray, int]:
    """Approximately solve ``H d = -g`` by CG, stopping at negative curvature.

    Returns the direction and the number of Hessian-vector products used.
    On negative curvature in the first iteration the steepest-descent
    direction ``-g`` is returned.
    """
    z = np.zeros_like(g)
    r = g.copy()
    p = -r
    rr = r @ r
    n_hvp = 0
    for i in range(max_iter):
        Hp = hessp(p)
        n_hvp += 1
        curv = p @ Hp
        if curv <= 0:
            return (-g.copy() if i == 0 else z), n_hvp
        a = rr / curv
        z = z + a * p
        r = r + a * Hp
        rr_new = r @ r
        if np.sqrt(rr_new) <= tol:
            break
        p = -r + (rr_new / rr) * p
        rr = rr_new
    return z, n_hvp


def minimize_newton_cg(obj: Callable, grad: Callable, hvp: Callable, theta0,
                       settings: OptimizeSettings | None = None,
                       callback: Callable | None = None) -> OptimizeResult:
    """Truncated Newton-CG with a strong-Wolfe line search.

    The inner CG stops at ``min(cg_forcing, sqrt(|g|)) * |g|`` or on
    negative curvature.  ``hvp(theta, v)`` must be linear in ``v``.
    """
    s = settings or OptimizeSettings()
    clock = _Clock(s.record_time)
    x = np.array(theta0, dtype=float)
    f, g = float(obj(x)), np.asarray(grad(x), dtype=float)
    records = [IterationRecord(0, clock(), f, float(np.max(np.abs(g))), 0)]
    status, msg = "max-iter", ""
    for k in range(1, s.max_iter + 1):
        if records[-1].grad_norm <= s.grad_tol:
            status = "converged"
            break
        gn = np.linalg.norm(g)
        eta = min(s.cg_forcing, np.sqrt(gn)) * gn
        xk = x
        d, n_hvp = truncated_cg(lambda v: np.asarray(hvp(xk, v), dtype=float), g, eta, s.cg_max_iter)
        if d @ g >= 0:
            d = -g
        step = _wolfe_step(obj, grad, x, d, f, g, s)
        if step is None:
            status, msg = "line-search-failure", f"no strong-Wolfe step at iteration {k}"
            break
        _, x, f, g = step
        f = float(f)
        records.append(IterationRecord(k, clock(), f, float(np.max(np.abs(g))), n_hvp))
        if callback is not None:
            callback(x, records[-1])
    else:
        if records[-1].grad_norm <= s.grad_tol:
            status = "converged"
    return OptimizeResult(x, records, status, msg, asdict(s))


def write_records_jsonl(path, records, **extra) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({**rec.as_row(), **extra}) + "\n")


def write_records_csv(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for rec in records:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.as_row().items()})
