"""Run several optimizers on one benchmark from the same start and log everything."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ad
from .bench import DEFAULT_ALPHA, make_benchmark
from .fem import write_field, write_mesh
from .implicit import ImplicitProblem, fd_hvp, gradient, hvp, objective, solve_forward
from .optimize import (OptimizeResult, OptimizeSettings, minimize_lbfgs, minimize_newton_cg,
                       write_records_csv, write_records_jsonl)

__all__ = ["OPTIMIZERS", "RunManifest", "run_optimizer_bakeoff", "run_single", "replay",
           "relative_l2_error"]

_RUN_ERRORS = (ArithmeticError, np.linalg.LinAlgError, RuntimeError, ad.DomainError)

OPTIMIZERS = ("lbfgs", "newton-cg-ad", "newton-cg-fd")
DEFAULT_FD_H = 1e-3
# Without an explicit grad_tol the runs stop at this fraction of |grad g(theta0)|_inf.
RELATIVE_GRAD_TOL = 1e-6


@dataclass
class RunManifest:
    """Everything needed to rerun one optimizer on one benchmark."""

    benchmark: str
    optimizer: str
    seed: int
    settings: dict
    outputs: dict = field(default_factory=dict)
    nx: int = 32
    ny: int = 32
    alpha: float = DEFAULT_ALPHA
    fd_h: float = DEFAULT_FD_H
    obs_digest: str = ""
    status: str = ""
    detail: str = ""
    initial_objective: float = float("nan")
    final_objective: float = float("nan")
    n_iter: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**d)


def relative_l2_error(mesh, theta, f, corner_radius: float = 0.0) -> float:
    """Quadrature-weighted ``|theta - f| / |f|`` over points farther than
    ``corner_radius`` from every corner of the unit square."""
    x = mesh.quad_points.reshape(-1, 2)
    w = mesh.wdet.reshape(-1)
    ref = f(x[:, 0], x[:, 1])
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    dist = np.min(np.linalg.norm(x[:, None, :] - corners[None], axis=2), axis=1)
    keep = dist > corner_radius
    num = np.sum(w[keep] * (np.asarray(theta)[keep] - ref[keep]) ** 2)
    den = np.sum(w[keep] * ref[keep] ** 2)
    return float(np.sqrt(num / den))


def _minimize(p: ImplicitProblem, optimizer: str, theta0, settings: OptimizeSettings,
              fd_h: float) -> OptimizeResult:
    obj = lambda t: objective(p, t)
    grad = lambda t: gradient(p, t)
    if optimizer == "lbfgs":
        return minimize_lbfgs(obj, grad, theta0, settings)
    if optimizer == "newton-cg-ad":
        return minimize_newton_cg(obj, grad, lambda t, v: hvp(p, t, v), theta0, settings)
    if optimizer == "newton-cg-fd":
        return minimize_newton_cg(obj, grad, lambda t, v: fd_hvp(p, t, v, fd_h), theta0, settings)
    raise ValueError(f"unknown optimizer {optimizer!r}; expected one of {OPTIMIZERS}")


def _resolve_settings(p, spec, theta0, settings: OptimizeSettings | None) -> OptimizeSettings:
    if settings is not None:
        return settings
    g0 = np.max(np.abs(gradient(p, theta0)))
    return OptimizeSettings(grad_tol=float(RELATIVE_GRAD_TOL * g0))


def run_single(benchmark: str, optimizer: str, settings: OptimizeSettings | None = None,
               out_path=None, nx: int = 32, ny: int | None = None, alpha: float = DEFAULT_ALPHA,
               seed: int = 0, fd_h: float = DEFAULT_FD_H) -> RunManifest:
    """One optimizer run with its own problem instance.

    Solver errors and line-search failures end up in ``status`` and
    ``detail``; nothing is raised for a run that fails numerically.
    """
    if optimizer not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {optimizer!r}; expected one of {OPTIMIZERS}")
    p, spec = make_benchmark(benchmark, nx, ny, alpha)
    theta0 = spec.initial_guess(seed)
    settings = _resolve_settings(p, spec, theta0, settings)
    man = RunManifest(benchmark, optimizer, seed, asdict(settings), nx=spec.nx, ny=spec.ny,
                      alpha=alpha, fd_h=fd_h, obs_digest=spec.obs_digest,
                      initial_objective=objective(p, theta0))
    try:
        res = _minimize(p, optimizer, theta0, settings, fd_h)
    except _RUN_ERRORS as err:
        man.status, man.detail = "failed", f"{type(err).__name__}: {err}"
        return _write(man, None, p, spec, out_path)
    man.status = "converged" if res.converged else "failed"
    man.detail = res.status if not res.message else f"{res.status}: {res.message}"
    man.final_objective = res.fun
    man.n_iter = res.records[-1].iter
    return _write(man, res, p, spec, out_path)


def _write(man: RunManifest, res, p, spec, out_path) -> RunManifest:
    if out_path is None:
        return man
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    tag = man.optimizer
    files = {"mesh": out / "mesh.txt", "observed": out / "observed.txt"}
    write_mesh(files["mesh"], spec.mesh)
    write_field(files["observed"], spec.y_obs)
    if res is not None:
        files.update(log_jsonl=out / f"{tag}.jsonl", log_csv=out / f"{tag}.csv",
                     theta=out / f"{tag}_theta.txt", predicted=out / f"{tag}_state.txt")
        write_records_jsonl(files["log_jsonl"], res.records, optimizer=tag, benchmark=man.benchmark)
        write_records_csv(files["log_csv"], res.records)
        write_field(files["theta"], res.x)
        try:
            write_field(files["predicted"], solve_forward(p, res.x))
        except _RUN_ERRORS:
            del files["predicted"]
    man.outputs = {k: os.fspath(v) for k, v in files.items()}
    return man


def run_optimizer_bakeoff(benchmark: str, optimizers=OPTIMIZERS, settings: OptimizeSettings | None = None,
                          out_path=None, nx: int = 32, ny: int | None = None,
                          alpha: float = DEFAULT_ALPHA, seed: int = 0,
                          fd_h: float = DEFAULT_FD_H) -> list[RunManifest]:
    """Every optimizer from the same ``theta0``; one manifest per run.

    With ``out_path`` the logs, snapshots and a ``manifest.json`` holding
    all runs are written there.
    """
    runs = [run_single(benchmark, opt, settings, out_path, nx, ny, alpha, seed, fd_h)
            for opt in optimizers]
    if out_path is not None:
        with open(Path(out_path) / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump([m.to_dict() for m in runs], fh, indent=2)
    return runs


def replay(man: RunManifest, out_path=None) -> RunManifest:
    """Rerun from a manifest; logs match when ``record_time`` is off."""
    return run_single(man.benchmark, man.optimizer, OptimizeSettings(**man.settings), out_path,
                      man.nx, man.ny, man.alpha, man.seed, man.fd_h)
