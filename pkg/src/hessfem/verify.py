"""Derivative verification: Taylor remainders, FD comparison, mode agreement."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ad
from .fem import NonFiniteError
from .implicit import ImplicitProblem, NewtonConvergenceError, fd_hvp, gradient, hvp, objective
from .sparse import SingularMatrixError

__all__ = [
    "DEFAULT_EPS",
    "DEFAULT_H",
    "TaylorReport",
    "run_taylor_test",
    "run_fd_comparison",
    "summarize_fd",
    "run_mode_agreement",
    "run_symmetry_check",
    "sample_rng",
    "write_jsonl",
]

DEFAULT_EPS = (1e-4, 1e-3, 1e-2, 1e-1)
DEFAULT_H = (1e-4, 1e-3, 1e-2, 1e-1)
ZERO_FLOOR = 1e-14

_SOLVER_ERRORS = (NewtonConvergenceError, SingularMatrixError, NonFiniteError)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per sample so draws do not depend on scheduling."""
    return np.random.default_rng([seed, index])


def _rel(a, b) -> float:
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / nb) if nb > 0 else float(np.linalg.norm(a))


@dataclass
class TaylorReport:
    eps: list[float]
    r_zeroth: list[float]
    r_first: list[float]
    r_second: list[float]
    slopes: dict[str, float]
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, allow_nan=True)


def _fit_slope(eps, r, floor, name, notes) -> float:
    eps, r = np.asarray(eps), np.asarray(r)
    keep = r > floor
    if keep.sum() < len(r):
        notes.append(f"{name}: {int((~keep).sum())} remainder(s) below {floor:g} excluded from fit")
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(eps[keep]), np.log(r[keep]), 1)[0])


def run_taylor_test(p: ImplicitProblem, theta, dtheta, eps: Sequence[float] = DEFAULT_EPS,
                    quadratic_coefficient: float = 0.5, floor: float = ZERO_FLOOR,
                    grad: Callable | None = None, hessp: Callable | None = None) -> TaylorReport:
    """Remainders of the zeroth, first and second order Taylor expansions.

    ``r_second`` subtracts ``quadratic_coefficient * eps^2 * dtheta.H.dtheta``;
    with the default 0.5 it decays like ``eps^3``.  Remainders at or below
    ``floor * |g(theta)|`` are round-off and are left out of the slope fit.
    The forward solves should be converged well below the smallest remainder,
    so build ``p`` with a tight ``newton_tol`` (1e-14 works).

    ``grad(theta)`` and ``hessp(theta, v)`` default to the implicit
    derivatives of ``p``; pass replacements to test other implementations.
    """
    eps = [float(e) for e in eps]
    if len(eps) < 3 or min(eps) <= 0 or max(eps) / min(eps) < 100:
        raise ValueError("need >= 3 positive step scales spanning >= 2 decades")
    grad = grad or (lambda t: gradient(p, t))
    hessp = hessp or (lambda t, v: hvp(p, t, v))
    theta = np.asarray(theta, dtype=float)
    dtheta = np.asarray(dtheta, dtype=float)

    g0 = objective(p, theta)
    lin = float(grad(theta) @ dtheta)
    quad = float(dtheta @ hessp(theta, dtheta))
    r0, r1, r2 = [], [], []
    for e in eps:
        d = objective(p, theta + e * dtheta) - g0
        r0.append(abs(d))
        r1.append(abs(d - e * lin))
        r2.append(abs(d - e * lin - quadratic_coefficient * e * e * quad))
    notes: list[str] = []
    cut = floor * max(abs(g0), np.finfo(float).tiny)
    slopes = {name: _fit_slope(eps, r, cut, name, notes)
              for name, r in (("r_zeroth", r0), ("r_first", r1), ("r_second", r2))}
    return TaylorReport(eps, r0, r1, r2, slopes, notes)


def run_fd_comparison(p: ImplicitProblem, h_list: Sequence[float] = DEFAULT_H,
                      n_samples: int = 100, seed: int = 0, mode: str | None = None) -> list[dict]:
    """Compare implicit HVPs with central differences of the gradient.

    Sample ``i`` draws a pair ``(theta, theta_hat)`` for the vector metric
    and a fresh triple ``(theta, theta_hat, theta_tilde)`` for the scalar
    metric, all standard normal; the same draws are reused for every ``h``.
    Returns one record per ``(h, sample)``, grouped by ``h`` in input order.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    h_list = [float(h) for h in h_list]
    M = p.n_param
    per_h: dict[float, list[dict]] = {h: [] for h in h_list}
    for i in range(n_samples):
        rng = sample_rng(seed, i)
        th, th_hat = rng.standard_normal((2, M))
        ts, ts_hat, ts_tilde = rng.standard_normal((3, M))
        try:
            v_ad = hvp(p, th, th_hat, mode)
            s_ad = float(ts_tilde @ hvp(p, ts, ts_hat, mode))
        except _SOLVER_ERRORS as err:
            for h in h_list:
                per_h[h].append({"h": h, "sample": i, "seed": seed, "e_v": None, "e_s": None,
                                 "skipped": True, "reason": type(err).__name__})
            continue
        for h in h_list:
            try:
                v_fd = fd_hvp(p, th, th_hat, h)
                s_fd = float(ts_tilde @ fd_hvp(p, ts, ts_hat, h))
            except _SOLVER_ERRORS as err:
                per_h[h].append({"h": h, "sample": i, "seed": seed, "e_v": None, "e_s": None,
                                 "skipped": True, "reason": type(err).__name__})
                continue
            per_h[h].append({"h": h, "sample": i, "seed": seed,
                             "e_v": _rel(v_fd, v_ad),
                             "e_s": abs(s_fd - s_ad) / abs(s_ad),
                             "skipped": False})
    return [rec for h in h_list for rec in per_h[h]]


def summarize_fd(records: list[dict]) -> dict[float, dict]:
    out: dict[float, dict] = {}
    for h in dict.fromkeys(r["h"] for r in records):
        rows = [r for r in records if r["h"] == h]
        ok = [r for r in rows if not r["skipped"]]
        ev = np.array([r["e_v"] for r in ok])
        es = np.array([r["e_s"] for r in ok])
        out[h] = {"n": len(ok), "n_skipped": len(rows) - len(ok),
                  "max_e_v": float(ev.max()) if ok else float("nan"),
                  "median_e_v": float(np.median(ev)) if ok else float("nan"),
                  "max_e_s": float(es.max()) if ok else float("nan"),
                  "median_e_s": float(np.median(es)) if ok else float("nan")}
    return out


def run_mode_agreement(p: ImplicitProblem, n_samples: int = 20, seed: int = 0) -> list[dict]:
    """Pairwise relative differences of :func:`hvp` across composition modes."""
    M = p.n_param
    rows = []
    for i in range(n_samples):
        rng = sample_rng(seed, i)
        th, th_hat = rng.standard_normal((2, M))
        v = {m: hvp(p, th, th_hat, m) for m in ad.MODES}
        pairs = {f"{a}|{b}": _rel(v[a], v[b])
                 for k, a in enumerate(ad.MODES) for b in ad.MODES[k + 1:]}
        rows.append({"sample": i, "seed": seed, **pairs, "max": max(pairs.values())})
    return rows


def run_symmetry_check(p: ImplicitProblem, n_samples: int = 50, seed: int = 0) -> list[dict]:
    """``|t~ . H t^ - t^ . H t~| / |t~ . H t^|`` for random triples."""
    M = p.n_param
    rows = []
    for i in range(n_samples):
        rng = sample_rng(seed, i)
        th, a, b = rng.standard_normal((3, M))
        ab = float(b @ hvp(p, th, a))
        ba = float(a @ hvp(p, th, b))
        rows.append({"sample": i, "seed": seed, "vhv": ab, "rel_asym": abs(ab - ba) / abs(ab)})
    return rows


def write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
