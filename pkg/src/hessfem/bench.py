"""Benchmark inverse problems on the unit square.

``model-nonlinear-id``
    ``-div(exp(theta u) grad u) = b`` with ``u = 0`` on ``x1 in {0, 1}`` and
    flux ``t = sin(5 x1)`` on ``x2 in {0, 1}``; ``theta`` is the exponent field.
    Observations come from ``theta = 1``.
``source-id``
    ``-div(grad u) = theta`` with the same Dirichlet sides and zero flux;
    ``theta`` is the source field.  Observations come from the Gaussian
    source ``b_ref``.

Both use the objective ``0.5 int (u - u_obs)^2 + 0.5 alpha int theta^2``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import ad
from .fem import (FemObjective, FemResidual, Mesh, WeakForm, build_unit_square_mesh,
                  interpolate_to_quad, misfit_density, nodal_to_quad)
from .implicit import ImplicitProblem, newton_solve

__all__ = ["BENCHMARKS", "DEFAULT_ALPHA", "BenchmarkSpec", "make_benchmark", "b_ref", "observation"]

BENCHMARKS = ("model-nonlinear-id", "source-id")
DEFAULT_ALPHA = 1e-6


def b_ref(x1, x2):
    return 10.0 * np.exp(-((x1 - 0.5) ** 2 + (x2 - 0.5) ** 2) / 0.02)


def _traction(x1, x2):
    return np.sin(5.0 * x1)


def _nonlinear_form() -> WeakForm:
    def flux(u, grad_u, theta, x):
        k = ad.exp(theta * u)
        return k * grad_u[0], k * grad_u[1]

    def source(u, theta, x):
        return b_ref(x[0], x[1])

    return WeakForm(flux, source, _traction)


def _linear_form() -> WeakForm:
    def flux(u, grad_u, theta, x):
        return grad_u

    def source(u, theta, x):
        return theta

    return WeakForm(flux, source, None)


@dataclass(frozen=True, eq=False)
class BenchmarkSpec:
    name: str
    nx: int
    ny: int
    alpha: float
    theta_ref: np.ndarray = field(repr=False)
    y_obs: np.ndarray = field(repr=False)
    obs_digest: str = ""
    mesh: Mesh | None = field(default=None, repr=False)

    def initial_guess(self, seed: int = 0) -> np.ndarray:
        """Starting iterate: zeros for source-id, ones plus 0.1 N(0, 1) noise otherwise."""
        M = self.theta_ref.size
        if self.name == "source-id":
            return np.zeros(M)
        return 1.0 + 0.1 * np.random.default_rng(seed).standard_normal(M)


def _check(name: str) -> None:
    if name not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {name!r}; expected one of {BENCHMARKS}")


@lru_cache(maxsize=None)
def _mesh_and_form(name: str, nx: int, ny: int):
    mesh = build_unit_square_mesh(nx, ny, dirichlet=("left", "right"), neumann=("bottom", "top"))
    form = _nonlinear_form() if name == "model-nonlinear-id" else _linear_form()
    return mesh, form


def _theta_ref(name: str, mesh: Mesh) -> np.ndarray:
    if name == "model-nonlinear-id":
        return np.ones(mesh.n_params)
    return interpolate_to_quad(mesh, b_ref)


@lru_cache(maxsize=None)
def observation(name: str, nx: int, ny: int) -> tuple[np.ndarray, str]:
    """Synthetic observation ``y_obs`` and its sha256, solved once per mesh."""
    _check(name)
    mesh, form = _mesh_and_form(name, nx, ny)
    res = FemResidual(mesh, form)
    # The objective is irrelevant for a forward solve.
    p = ImplicitProblem(res, None)
    y = newton_solve(p, _theta_ref(name, mesh)).y
    y.flags.writeable = False
    return y, hashlib.sha256(y.tobytes()).hexdigest()


def make_benchmark(name: str, nx: int = 32, ny: int | None = None,
                   alpha: float = DEFAULT_ALPHA, **settings) -> tuple[ImplicitProblem, BenchmarkSpec]:
    """Build the implicit problem and its description.

    Extra keyword arguments are forwarded to :class:`ImplicitProblem`
    (``newton_tol``, ``mode`` ...).
    """
    _check(name)
    ny = nx if ny is None else ny
    mesh, form = _mesh_and_form(name, nx, ny)
    y_obs, digest = observation(name, nx, ny)
    res = FemResidual(mesh, form)
    obj = FemObjective(mesh, misfit_density(nodal_to_quad(mesh, y_obs), alpha))
    spec = BenchmarkSpec(name, nx, ny, alpha, _theta_ref(name, mesh), y_obs, digest, mesh)
    return ImplicitProblem(res, obj, **settings), spec
