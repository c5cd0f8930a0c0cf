import numpy as np
import pytest

from hessfem import ad
from hessfem.bench import make_benchmark
from hessfem.fem import (FemObjective, FemResidual, WeakForm, assemble_jacobian, assemble_residual,
                         build_unit_square_mesh, integrate_scalar, interpolate_to_quad,
                         misfit_density, nodal_to_quad, read_field, read_mesh, write_field,
                         write_mesh)
from hessfem.implicit import ImplicitProblem, newton_solve

ALL_SIDES = ("left", "right", "bottom", "top")


def laplace_form(source=None):
    return WeakForm(lambda u, gu, th, x: gu, source)


def nonlinear_form():
    def flux(u, gu, th, x):
        k = ad.exp(th * u)
        return k * gu[0], k * gu[1]

    return WeakForm(flux, lambda u, th, x: 10.0 * ad.exp(-((x[0] - 0.5) ** 2 + (x[1] - 0.5) ** 2) / 0.02),
                    lambda x1, x2: np.sin(5 * x1))


def fd_jacobian(res, y, th, h=1e-6):
    cols = []
    for j in range(res.n_state):
        e = np.zeros_like(y)
        e[j] = h
        cols.append((res(y + e, th) - res(y - e, th)) / (2 * h))
    return np.column_stack(cols)


@pytest.mark.parametrize("n, nodes, elements, params", [(1, 4, 1, 4), (2, 9, 4, 16), (64, 4225, 4096, 16384)])
def test_mesh_counts(n, nodes, elements, params):
    m = build_unit_square_mesh(n)
    assert (m.n_nodes, m.n_elements, m.n_params) == (nodes, elements, params)


def test_mesh_orientation_and_boundaries():
    m = build_unit_square_mesh(3, 2)
    assert np.all(m.wdet > 0)
    assert np.isclose(m.wdet.sum(), 1.0)
    left_right = np.flatnonzero(np.isclose(m.nodes[:, 0], 0) | np.isclose(m.nodes[:, 0], 1))
    np.testing.assert_array_equal(np.sort(m.dirichlet_nodes), left_right)
    assert len(m.neumann_facets) == 2 * 3
    with pytest.raises(ValueError):
        build_unit_square_mesh(2, dirichlet=("left",), neumann=("left",))
    with pytest.raises(ValueError):
        build_unit_square_mesh(2, dirichlet=("front",))


def test_integrate_constants_and_linear():
    m = build_unit_square_mesh(5, 3)
    assert integrate_scalar(m, lambda u, th, x: 1.0) == pytest.approx(1.0, abs=1e-14)
    assert integrate_scalar(m, lambda u, th, x: x[0]) == pytest.approx(0.5, abs=1e-12)
    y = np.sin(m.nodes[:, 0] * 3)
    yq = nodal_to_quad(m, y)
    assert integrate_scalar(m, lambda u, th, x: (u - yq) ** 2, y=y) == 0.0


def test_single_element_all_dirichlet_gives_identity_residual():
    m = build_unit_square_mesh(1, dirichlet=ALL_SIDES, neumann=())
    y = np.array([0.3, -1.0, 2.0, 0.5])
    np.testing.assert_array_equal(assemble_residual(m, laplace_form(), y, np.zeros(4)), y)


def test_two_by_two_hand_assembly():
    """Center node of a 2x2 mesh against the textbook Q1 element stiffness."""
    m = build_unit_square_mesh(2, dirichlet=ALL_SIDES, neumann=())
    Ke = np.array([[4, -1, -2, -1], [-1, 4, -1, -2], [-2, -1, 4, -1], [-1, -2, -1, 4]]) / 6.0
    K = np.zeros((9, 9))
    for el in m.elements:
        K[np.ix_(el, el)] += Ke
    load = np.zeros(9)
    h2 = 0.25
    for el in m.elements:
        load[el] += h2 / 4  # int phi_a over a square element of area h^2
    y = np.random.default_rng(1).standard_normal(9)
    r = assemble_residual(m, laplace_form(lambda u, th, x: 1.0), y, np.zeros(16))
    assert r[4] == pytest.approx(K[4] @ y - load[4], abs=1e-13)
    J = assemble_jacobian(m, laplace_form(), y, np.zeros(16)).toarray()
    np.testing.assert_allclose(J[4], K[4], atol=1e-14)


def test_patch_test_reproduces_linear_field():
    m = build_unit_square_mesh(6, 4, dirichlet=ALL_SIDES, neumann=(), u_D=lambda x1, x2: x1)
    p = ImplicitProblem(FemResidual(m, laplace_form()), None)
    sol = newton_solve(p, np.zeros(m.n_params))
    assert np.max(np.abs(sol.y - m.nodes[:, 0])) <= 1e-10


def test_jacobian_matches_fd_on_nonlinear_instance():
    m = build_unit_square_mesh(2)
    res = FemResidual(m, nonlinear_form())
    rng = np.random.default_rng(2)
    y, th = rng.standard_normal(m.n_nodes), 1 + 0.3 * rng.standard_normal(m.n_params)
    J = res.jacobian(y, th).toarray()
    Jfd = fd_jacobian(res, y, th)
    assert np.max(np.abs(J - Jfd)) <= 1e-6 * np.max(np.abs(Jfd))


def test_jacobian_symmetric_at_zero_theta():
    m = build_unit_square_mesh(4)
    res = FemResidual(m, nonlinear_form())
    y = np.random.default_rng(3).standard_normal(m.n_nodes)
    J = res.jacobian(y, np.zeros(m.n_params)).toarray()
    free = m.free_mask
    np.testing.assert_allclose(J[np.ix_(free, free)], J[np.ix_(free, free)].T, atol=1e-14)


def test_linear_jacobian_independent_of_state():
    m = build_unit_square_mesh(3)
    res = FemResidual(m, laplace_form(lambda u, th, x: th))
    th = np.ones(m.n_params)
    A = res.jacobian(np.zeros(m.n_nodes), th)
    B = res.jacobian(np.random.default_rng(0).standard_normal(m.n_nodes), th)
    assert A.data.tobytes() == B.data.tobytes()
    assert A.indices.tobytes() == B.indices.tobytes()


def test_jvp_vjp_consistent_with_jacobian():
    m = build_unit_square_mesh(3)
    res = FemResidual(m, nonlinear_form())
    rng = np.random.default_rng(4)
    y, th = rng.standard_normal(m.n_nodes), rng.standard_normal(m.n_params)
    dy, dth, w = rng.standard_normal(m.n_nodes), rng.standard_normal(m.n_params), rng.standard_normal(m.n_nodes)
    J = res.jacobian(y, th).toarray()
    np.testing.assert_allclose(res.jvp(y, th, dy), J @ dy, rtol=1e-12, atol=1e-12)
    ybar, thbar = res.vjp(y, th, w)
    np.testing.assert_allclose(ybar, J.T @ w, rtol=1e-12, atol=1e-12)
    # w . (dr/dtheta dth) == thbar . dth
    assert float(w @ res.jvp(y, th, None, dth)) == pytest.approx(float(thbar @ dth), rel=1e-12)


def test_residual_second_order_matches_fd():
    m = build_unit_square_mesh(2)
    res = FemResidual(m, nonlinear_form())
    rng = np.random.default_rng(5)
    y, th = rng.standard_normal(m.n_nodes), rng.standard_normal(m.n_params)
    w, dy, dth = rng.standard_normal(m.n_nodes), rng.standard_normal(m.n_nodes), rng.standard_normal(m.n_params)
    h = 1e-6
    plus = res.vjp(y + h * dy, th + h * dth, w)
    minus = res.vjp(y - h * dy, th - h * dth, w)
    for mode in ad.MODES:
        gy, gth = res.second(y, th, w, dy, dth, mode)
        np.testing.assert_allclose(gy, (plus[0] - minus[0]) / (2 * h), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(gth, (plus[1] - minus[1]) / (2 * h), rtol=1e-6, atol=1e-8)


def test_objective_gradient_matches_closed_form():
    m = build_unit_square_mesh(3)
    rng = np.random.default_rng(6)
    y_obs = rng.standard_normal(m.n_nodes)
    alpha = 0.3
    obj = FemObjective(m, misfit_density(nodal_to_quad(m, y_obs), alpha))
    y, th = rng.standard_normal(m.n_nodes), rng.standard_normal(m.n_params)
    # Consistent mass matrix from the same quadrature.
    Mass = np.zeros((m.n_nodes, m.n_nodes))
    for e, el in enumerate(m.elements):
        Mass[np.ix_(el, el)] += np.einsum("q,qa,qb->ab", m.wdet[e], m.phi, m.phi)
    d = y - y_obs
    assert obj(y, th) == pytest.approx(0.5 * d @ Mass @ d + 0.5 * alpha * np.sum(m.wdet.ravel() * th ** 2), rel=1e-13)
    gy, gth = obj.grad(y, th)
    np.testing.assert_allclose(gy, Mass @ d, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(gth, alpha * m.wdet.ravel() * th, rtol=1e-12)


def test_nonlinear_forward_refinement_converges():
    """Discrete solutions at increasing resolution approach each other at a shared node."""
    vals = []
    for n in (8, 16, 32):
        p, spec = make_benchmark("model-nonlinear-id", n)
        y = spec.y_obs
        center = np.flatnonzero(np.all(np.isclose(spec.mesh.nodes, 0.5), axis=1))[0]
        vals.append(y[center])
    assert abs(vals[2] - vals[1]) < abs(vals[1] - vals[0])


def test_interpolate_layout_is_element_major():
    m = build_unit_square_mesh(2)
    q = interpolate_to_quad(m, lambda x1, x2: x1 + 10 * x2)
    np.testing.assert_allclose(q.reshape(4, 4), m.quad_points[..., 0] + 10 * m.quad_points[..., 1])


def test_text_io_roundtrip(tmp_path):
    m = build_unit_square_mesh(3, 2)
    write_mesh(tmp_path / "mesh.txt", m)
    nodes, elements = read_mesh(tmp_path / "mesh.txt")
    np.testing.assert_array_equal(nodes, m.nodes)
    np.testing.assert_array_equal(elements, m.elements)
    first = (tmp_path / "mesh.txt").read_text().splitlines()[:2]
    assert first == [f"# nodes {m.n_nodes}", "0 0.0 0.0"]
    v = np.random.default_rng(0).standard_normal(7)
    write_field(tmp_path / "f.txt", v)
    assert read_field(tmp_path / "f.txt").tobytes() == v.tobytes()
