"""Bilinear quadrilateral finite elements with AD-differentiated assembly.

The discrete residual is assembled from a local kernel evaluated at every
quadrature point of every element in one batched call.  Its inputs are the
four nodal values of the element and the parameter value at that point;
its outputs are the four local residual entries.  Parameters therefore live
at quadrature points, laid out element-major: ``theta[4 * e + q]``.

Dirichlet rows are replaced by ``y_i - u_D,i`` inside the residual itself,
so ``r(y, theta) = 0`` holds literally and the Jacobian has identity rows at
constrained nodes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from . import ad
from .sparse import SparseMatrix, from_triplets

__all__ = [
    "NonFiniteError",
    "Mesh",
    "QuadratureRule",
    "gauss_2x2",
    "shape_functions",
    "build_unit_square_mesh",
    "WeakForm",
    "FemResidual",
    "FemObjective",
    "assemble_residual",
    "assemble_jacobian",
    "interpolate_to_quad",
    "nodal_to_quad",
    "integrate_scalar",
    "write_mesh",
    "read_mesh",
    "write_field",
    "read_field",
]

SIDES = ("left", "right", "bottom", "top")
# Reference corners of the bi-unit square, counterclockwise.
_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
# Local edges as (start, end) corner pairs: bottom, right, top, left.
_EDGES = np.array([[0, 1], [1, 2], [2, 3], [3, 0]])


class NonFiniteError(FloatingPointError):
    """Assembly produced inf/nan, e.g. an overflowing ``exp(theta * u)``."""


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray


def gauss_2x2() -> QuadratureRule:
    g = 1.0 / np.sqrt(3.0)
    pts = np.array([[-g, -g], [g, -g], [g, g], [-g, g]])
    return QuadratureRule(pts, np.ones(4))


def shape_functions(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Q1 shape values ``(P, 4)`` and reference gradients ``(P, 4, 2)``."""
    xi = np.atleast_2d(xi)
    a = 1.0 + xi[:, None, 0] * _CORNERS[None, :, 0]
    b = 1.0 + xi[:, None, 1] * _CORNERS[None, :, 1]
    vals = 0.25 * a * b
    grads = np.stack([0.25 * _CORNERS[:, 0] * b, 0.25 * _CORNERS[:, 1] * a], axis=-1)
    return vals, grads


@dataclass(frozen=True, eq=False)
class Mesh:
    """Quadrilateral mesh with boundary classification.

    ``neumann_facets`` rows are ``(element, local_edge)``; ``dirichlet_values``
    align with ``dirichlet_nodes``.
    """

    nodes: np.ndarray
    elements: np.ndarray
    dirichlet_nodes: np.ndarray
    dirichlet_values: np.ndarray
    neumann_facets: np.ndarray
    rule: QuadratureRule = field(default_factory=gauss_2x2)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_quad(self) -> int:
        return len(self.rule.weights)

    @property
    def n_params(self) -> int:
        return self.n_elements * self.n_quad

    @cached_property
    def phi(self) -> np.ndarray:
        return shape_functions(self.rule.points)[0]

    @cached_property
    def _geometry(self):
        _, dref = shape_functions(self.rule.points)  # (Q, 4, 2)
        X = self.nodes[self.elements]  # (E, 4, 2)
        J = np.einsum("eak,qal->eqkl", X, dref)  # dx_k / dxi_l
        det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        if np.any(det <= 0):
            raise ValueError("element with non-positive Jacobian determinant")
        Jinv = np.linalg.inv(J)
        dphi = np.einsum("qal,eqlk->eqak", dref, Jinv)  # (E, Q, 4, 2)
        wdet = det * self.rule.weights[None, :]
        xq = np.einsum("qa,eak->eqk", self.phi, X)
        return dphi, wdet, xq

    @property
    def dphi(self) -> np.ndarray:
        return self._geometry[0]

    @property
    def wdet(self) -> np.ndarray:
        return self._geometry[1]

    @property
    def quad_points(self) -> np.ndarray:
        return self._geometry[2]

    @cached_property
    def free_mask(self) -> np.ndarray:
        m = np.ones(self.n_nodes, dtype=bool)
        m[self.dirichlet_nodes] = False
        return m


def build_unit_square_mesh(nx: int, ny: int | None = None,
                           dirichlet: Sequence[str] = ("left", "right"),
                           neumann: Sequence[str] = ("bottom", "top"),
                           u_D: float | Callable = 0.0) -> Mesh:
    """Structured ``nx x ny`` mesh of the unit square.

    ``u_D`` is a constant or a function ``(x1, x2) -> value`` evaluated at
    the Dirichlet nodes.  Corner nodes shared by a Dirichlet and a Neumann
    side are Dirichlet.
    """
    ny = nx if ny is None else ny
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be >= 1")
    dirichlet, neumann = tuple(dirichlet), tuple(neumann)
    for s in dirichlet + neumann:
        if s not in SIDES:
            raise ValueError(f"unknown side {s!r}")
    if set(dirichlet) & set(neumann):
        raise ValueError(f"sides {sorted(set(dirichlet) & set(neumann))} are both Dirichlet and Neumann")

    xs, ys = np.linspace(0.0, 1.0, nx + 1), np.linspace(0.0, 1.0, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    nid = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    elements = np.column_stack([nid[:-1, :-1].ravel(), nid[:-1, 1:].ravel(),
                                nid[1:, 1:].ravel(), nid[1:, :-1].ravel()])

    side_nodes = {"left": nid[:, 0], "right": nid[:, -1], "bottom": nid[0, :], "top": nid[-1, :]}
    dn = np.unique(np.concatenate([side_nodes[s] for s in dirichlet])) if dirichlet else np.zeros(0, int)
    if callable(u_D):
        dv = np.asarray(u_D(nodes[dn, 0], nodes[dn, 1]), dtype=float) * np.ones(len(dn))
    else:
        dv = np.full(len(dn), float(u_D))

    eid = np.arange(nx * ny).reshape(ny, nx)
    side_facets = {"bottom": (eid[0, :], 0), "right": (eid[:, -1], 1),
                   "top": (eid[-1, :], 2), "left": (eid[:, 0], 3)}
    facets = [np.column_stack([side_facets[s][0], np.full(len(side_facets[s][0]), side_facets[s][1])])
              for s in neumann]
    facets = np.concatenate(facets) if facets else np.zeros((0, 2), int)
    return Mesh(nodes, elements, dn.astype(np.int64), dv, facets.astype(np.int64))


def interpolate_to_quad(mesh: Mesh, f: Callable) -> np.ndarray:
    """Evaluate ``f(x1, x2)`` at every quadrature point (parameter layout)."""
    xq = mesh.quad_points
    return (np.asarray(f(xq[..., 0], xq[..., 1]), dtype=float) * np.ones(xq.shape[:2])).ravel()


def nodal_to_quad(mesh: Mesh, y: np.ndarray) -> np.ndarray:
    """Interpolate a nodal field to quadrature points, shape ``(E, Q)``."""
    return np.asarray(y)[mesh.elements] @ mesh.phi.T


def integrate_scalar(mesh: Mesh, density: Callable, y=None, theta=None) -> float:
    """Quadrature sum of ``density(u, theta, x)`` over the mesh.

    ``u`` and ``theta`` are the quadrature-point values (``(E, Q)`` arrays,
    zero when not given) and ``x`` the pair of coordinate arrays.
    """
    E, Q = mesh.n_elements, mesh.n_quad
    u = nodal_to_quad(mesh, y) if y is not None else np.zeros((E, Q))
    th = np.asarray(theta, dtype=float).reshape(E, Q) if theta is not None else np.zeros((E, Q))
    xq = mesh.quad_points
    vals = density(u, th, (xq[..., 0], xq[..., 1])) * np.ones((E, Q))
    return float(np.sum(mesh.wdet * vals))


@dataclass(frozen=True)
class WeakForm:
    """Integrands of ``int flux . grad v - int source v - int_N traction v``.

    ``flux(u, grad_u, theta, x)`` returns a pair; ``source(u, theta, x)`` a
    scalar; ``traction(x1, x2)`` is evaluated on Neumann facets.  ``x`` is
    the coordinate pair at quadrature points.
    """

    flux: Callable
    source: Callable | None = None
    traction: Callable | None = None


def _scatter(mesh: Mesh, local: np.ndarray) -> np.ndarray:
    """Sum ``(4, E)`` element contributions into a nodal vector."""
    return np.bincount(mesh.elements.T.ravel(), weights=local.ravel(), minlength=mesh.n_nodes)


def neumann_load(mesh: Mesh, traction: Callable | None) -> np.ndarray:
    """``int_N t phi_i`` with two-point Gauss on each Neumann facet."""
    f = np.zeros(mesh.n_nodes)
    if traction is None or len(mesh.neumann_facets) == 0:
        return f
    g = 1.0 / np.sqrt(3.0)
    s = np.array([-g, g])
    w1d = np.array([0.5 * (1 - s), 0.5 * (1 + s)])  # (2 end nodes, 2 points)
    el, edge = mesh.neumann_facets[:, 0], mesh.neumann_facets[:, 1]
    n0 = mesh.elements[el, _EDGES[edge, 0]]
    n1 = mesh.elements[el, _EDGES[edge, 1]]
    p0, p1 = mesh.nodes[n0], mesh.nodes[n1]
    half_len = 0.5 * np.linalg.norm(p1 - p0, axis=1)
    for k in range(2):
        xg = w1d[0, k] * p0 + w1d[1, k] * p1
        t = np.asarray(traction(xg[:, 0], xg[:, 1]), dtype=float) * np.ones(len(xg))
        np.add.at(f, n0, t * w1d[0, k] * half_len)
        np.add.at(f, n1, t * w1d[1, k] * half_len)
    return f


def _residual_kernel(mesh: Mesh, form: WeakForm) -> ad.KernelFunction:
    phi, dphi, wdet, xq = mesh.phi, mesh.dphi, mesh.wdet, mesh.quad_points
    x = (xq[..., 0], xq[..., 1])
    phis = [phi[:, a] for a in range(4)]
    dx = [dphi[:, :, a, 0] for a in range(4)]
    dy = [dphi[:, :, a, 1] for a in range(4)]
    wphi = [wdet * p for p in phis]
    wdx = [wdet * d for d in dx]
    wdy = [wdet * d for d in dy]

    def fn(z):
        ue, th = z[:4], z[4]
        u = ad.dot(phis, ue)
        gu = (ad.dot(dx, ue), ad.dot(dy, ue))
        f1, f2 = form.flux(u, gu, th, x)
        out = [f1 * wdx[i] + f2 * wdy[i] for i in range(4)]
        if form.source is not None:
            s = form.source(u, th, x)
            out = [out[i] - s * wphi[i] for i in range(4)]
        return out

    return ad.KernelFunction(5, 4, fn)


class _LocalMap:
    """Gather/scatter between global vectors and batched kernel inputs."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.shape = (mesh.n_elements, mesh.n_quad)

    def inputs(self, y, theta) -> np.ndarray:
        E, Q = self.shape
        ue = np.asarray(y, dtype=float)[self.mesh.elements].T  # (4, E)
        th = np.asarray(theta, dtype=float).reshape(E, Q)
        return np.concatenate([np.broadcast_to(ue[:, :, None], (4, E, Q)), th[None]])

    def reduce(self, zbar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Input cotangents ``(5, E, Q)`` -> (nodal vector, parameter vector)."""
        return _scatter(self.mesh, zbar[:4].sum(axis=2)), zbar[4].ravel().copy()


class FemResidual:
    """Discrete residual ``r(y, theta)`` with its first and second derivatives."""

    def __init__(self, mesh: Mesh, form: WeakForm):
        self.mesh = mesh
        self.form = form
        self.kernel = _residual_kernel(mesh, form)
        self.n_state = mesh.n_nodes
        self.n_param = mesh.n_params
        self._map = _LocalMap(mesh)
        self._load = neumann_load(mesh, form.traction)
        self._free = mesh.free_mask.astype(float)

    def initial_guess(self) -> np.ndarray:
        y = np.zeros(self.n_state)
        y[self.mesh.dirichlet_nodes] = self.mesh.dirichlet_values
        return y

    def _local_cotangent(self, w) -> np.ndarray:
        wl = (np.asarray(w, dtype=float) * self._free)[self.mesh.elements].T  # (4, E)
        return np.broadcast_to(wl[:, :, None], (4,) + self._map.shape)

    def _tangent(self, dy, dtheta) -> np.ndarray:
        E, Q = self._map.shape
        dy = np.zeros(self.n_state) if dy is None else dy
        dtheta = np.zeros(self.n_param) if dtheta is None else dtheta
        return self._map.inputs(dy, dtheta)

    def __call__(self, y, theta) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        out = self.kernel(self._map.inputs(y, theta))
        r = _scatter(self.mesh, out.sum(axis=2)) - self._load
        dn = self.mesh.dirichlet_nodes
        r[dn] = y[dn] - self.mesh.dirichlet_values
        if not np.all(np.isfinite(r)):
            raise NonFiniteError("non-finite residual")
        return r

    def jacobian(self, y, theta) -> SparseMatrix:
        E, Q = self._map.shape
        z = self._map.inputs(y, theta)
        zb = np.broadcast_to(z[:, None], (5, 4, E, Q))
        seeds = np.zeros((5, 4, 1, 1))
        seeds[np.arange(4), np.arange(4)] = 1.0
        dr = ad.jvp(self.kernel, zb, np.broadcast_to(seeds, zb.shape))  # (i, a, E, Q)
        Ke = dr.sum(axis=3)  # (i, a, E)
        conn = self.mesh.elements
        rows = np.broadcast_to(conn.T[:, None, :], Ke.shape)
        cols = np.broadcast_to(conn.T[None, :, :], Ke.shape)
        keep = self.mesh.free_mask[rows]
        if not np.all(np.isfinite(Ke)):
            raise NonFiniteError("non-finite Jacobian")
        dn = self.mesh.dirichlet_nodes
        return from_triplets(self.n_state, self.n_state,
                             np.concatenate([rows[keep], dn]),
                             np.concatenate([cols[keep], dn]),
                             np.concatenate([Ke[keep], np.ones(len(dn))]))

    def jvp(self, y, theta, dy=None, dtheta=None) -> np.ndarray:
        """``dr/dy dy + dr/dtheta dtheta``."""
        out = ad.jvp(self.kernel, self._map.inputs(y, theta), self._tangent(dy, dtheta))
        t = _scatter(self.mesh, out.sum(axis=2))
        dn = self.mesh.dirichlet_nodes
        t[dn] = 0.0 if dy is None else np.asarray(dy)[dn]
        return t

    def vjp(self, y, theta, w) -> tuple[np.ndarray, np.ndarray]:
        """``(w^T dr/dy, w^T dr/dtheta)``."""
        zbar = ad.vjp(self.kernel, self._map.inputs(y, theta), self._local_cotangent(w))
        ybar, tbar = self._map.reduce(zbar)
        dn = self.mesh.dirichlet_nodes
        ybar[dn] += np.asarray(w, dtype=float)[dn]
        return ybar, tbar

    def second(self, y, theta, w, dy=None, dtheta=None, mode: str = ad.DEFAULT_MODE):
        """Gradient of ``w^T (dr/dy dy + dr/dtheta dtheta)`` w.r.t. ``(y, theta)``."""
        zbar = ad.compose_second_order(self.kernel, self._map.inputs(y, theta), mode,
                                       self._local_cotangent(w), self._tangent(dy, dtheta))
        return self._map.reduce(zbar)


class FemObjective:
    """``g(y, theta) = sum over quadrature points of wdet * density(u, theta, x)``."""

    def __init__(self, mesh: Mesh, density: Callable):
        self.mesh = mesh
        self.density = density
        self._map = _LocalMap(mesh)
        phis = [mesh.phi[:, a] for a in range(4)]
        xq = mesh.quad_points
        x = (xq[..., 0], xq[..., 1])
        wdet = mesh.wdet

        def fn(z):
            return [wdet * density(ad.dot(phis, z[:4]), z[4], x)]

        self.kernel = ad.KernelFunction(5, 1, fn)
        self._ones = np.ones((1,) + self._map.shape)

    def __call__(self, y, theta) -> float:
        v = float(np.sum(self.kernel(self._map.inputs(y, theta))))
        if not np.isfinite(v):
            raise NonFiniteError("non-finite objective")
        return v

    def grad(self, y, theta) -> tuple[np.ndarray, np.ndarray]:
        return self._map.reduce(ad.vjp(self.kernel, self._map.inputs(y, theta), self._ones))

    def second(self, y, theta, dy=None, dtheta=None, mode: str = ad.DEFAULT_MODE):
        dy = np.zeros(self.mesh.n_nodes) if dy is None else dy
        dtheta = np.zeros(self.mesh.n_params) if dtheta is None else dtheta
        zbar = ad.compose_second_order(self.kernel, self._map.inputs(y, theta), mode,
                                       self._ones, self._map.inputs(dy, dtheta))
        return self._map.reduce(zbar)


def misfit_density(u_obs_q: np.ndarray, alpha: float) -> Callable:
    """``0.5 (u - u_obs)^2 + 0.5 alpha theta^2`` with ``u_obs`` at quadrature points."""

    def density(u, theta, x):
        d = u - u_obs_q
        return 0.5 * d * d + (0.5 * alpha) * theta * theta

    return density


def assemble_residual(mesh: Mesh, form: WeakForm, y, theta) -> np.ndarray:
    return FemResidual(mesh, form)(y, theta)


def assemble_jacobian(mesh: Mesh, form: WeakForm, y, theta) -> SparseMatrix:
    return FemResidual(mesh, form).jacobian(y, theta)


# ---------------------------------------------------------------------------
# Plain-text snapshots: "id x y" per node, "id n0 n1 n2 n3" per element,
# one value per line for fields.


def write_mesh(path, mesh: Mesh) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# nodes {mesh.n_nodes}\n")
        for i, (x, y) in enumerate(mesh.nodes):
            fh.write(f"{i} {float(x)!r} {float(y)!r}\n")
        fh.write(f"# elements {mesh.n_elements}\n")
        for i, el in enumerate(mesh.elements):
            fh.write(f"{i} {el[0]} {el[1]} {el[2]} {el[3]}\n")


def read_mesh(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`write_mesh`: ``(nodes (N, 2), elements (E, 4))``."""
    blocks: dict[str, list] = {"nodes": [], "elements": []}
    current = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "#":
                current = parts[1]
                continue
            blocks[current].append(parts[1:])
    nodes = np.array(blocks["nodes"], dtype=float).reshape(-1, 2)
    elements = np.array(blocks["elements"], dtype=np.int64).reshape(-1, 4)
    return nodes, elements


def write_field(path, values) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in np.asarray(values, dtype=float).ravel().tolist():
            fh.write(f"{v!r}\n")


def read_field(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        return np.array([float(line) for line in fh if line.strip()])
