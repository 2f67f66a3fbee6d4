import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from glenn import fem
from glenn.fem import (
    DIV_TOL,
    LinearSolveError,
    assemble_a_k,
    assemble_b_k,
    complex_to_real_operator,
    fe_data,
    gradient_field,
    interpolate_order,
    interpolate_p1,
    interpolate_potential,
    monomial_integral,
    p2_nodes,
    project_div_free,
    solve_constrained,
    solve_spd,
    triangle_quadrature,
)
from glenn.gl import initial_value
from glenn.mesh import generate_l_shape, generate_unit_square

from . import oracles


def rand_u(rng, fe):
    return rng.normal(size=fe.n_p2) + 1j * rng.normal(size=fe.n_p2)


def sym_err(M):
    return abs(M - M.T).max() / abs(M).max()


# ------------------------------------------------------------------ quadrature


def test_quadrature_weights_sum_to_reference_area():
    q = triangle_quadrature(8)
    assert q.degree >= 8
    assert abs(q.weights.sum() - 0.5) < 1e-15
    assert np.all(q.weights > 0)
    assert np.allclose(q.points.sum(axis=1), 1.0)


@pytest.mark.parametrize("a", range(9))
def test_quadrature_exact_for_monomials(a):
    q = triangle_quadrature(8)
    x, y = q.points[:, 1], q.points[:, 2]
    for b in range(9 - a):
        exact = monomial_integral(a, b)
        assert abs(q.weights @ (x**a * y**b) - exact) <= 1e-15 * max(1.0, 1 / exact)


def test_monomial_integral_closed_form():
    assert monomial_integral(0, 0) == pytest.approx(0.5)
    assert monomial_integral(1, 0) == pytest.approx(1 / 6)
    assert monomial_integral(1, 1) == pytest.approx(1 / 24)


def test_quadrature_matches_independent_rule():
    pts, w = oracles.collapsed_gauss(8)
    f = lambda x, y: np.exp(x) * np.cos(3 * y)  # noqa: E731
    q = triangle_quadrature(8)
    ours = q.weights @ f(q.points[:, 1], q.points[:, 2])
    assert ours == pytest.approx(w @ f(pts[:, 0], pts[:, 1]), rel=1e-7)


# -------------------------------------------------------------------- a_k, b_k


def test_a_k_zero_state_is_scaled_laplacian():
    m = generate_unit_square(3)
    fe = fe_data(m)
    kappa = 4.0
    M = assemble_a_k(m, np.zeros(fe.n_p2, complex), np.zeros(m.n_edges), kappa, 0.0)
    K = complex_to_real_operator(fe.p2_stiffness / kappa**2)
    assert abs(M - K).max() <= 1e-14 * abs(K).max()
    # Re and Im decouple
    assert abs(M[0::2, 1::2]).max() <= 1e-14


def test_a_k_unit_state_adds_mass():
    m = generate_unit_square(3)
    fe = fe_data(m)
    kappa = 2.0
    M = assemble_a_k(m, np.ones(fe.n_p2, complex), np.zeros(m.n_edges), kappa, 0.0)
    mass = fe.p2_weighted_mass(np.ones_like(fe.W))
    ref = complex_to_real_operator(fe.p2_stiffness / kappa**2 + mass)
    assert abs(M - ref).max() <= 1e-13 * abs(ref).max()


def test_a_k_quadratic_form_matches_oracle(rng):
    m = generate_unit_square(3)
    fe = fe_data(m)
    u, v, A = rand_u(rng, fe), rand_u(rng, fe), rng.normal(size=m.n_edges)
    M = assemble_a_k(m, u, A, 7.0, 0.3)
    x = v.view(np.float64)
    assert x @ (M @ x) == pytest.approx(oracles.a_form(m, u, A, 7.0, 0.3, v), rel=1e-12)
    assert sym_err(M) <= 1e-12


def test_a_k_rejects_bad_kappa():
    m = generate_unit_square(2)
    fe = fe_data(m)
    with pytest.raises(ValueError):
        assemble_a_k(m, np.zeros(fe.n_p2, complex), np.zeros(m.n_edges), 0.0)


def test_complex_to_real_operator_matches_real_product(rng):
    n = 5
    M = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    v, w = rng.normal(size=n) + 1j * rng.normal(size=n), rng.normal(size=n) + 1j * rng.normal(size=n)
    R = complex_to_real_operator(sp.csr_matrix(M))
    assert w.view(np.float64) @ (R @ v.view(np.float64)) == pytest.approx(np.real(np.conj(w) @ M @ v))


def test_b_k_zero_state_is_curlcurl_plus_mass():
    m = generate_unit_square(3)
    fe = fe_data(m)
    M = assemble_b_k(m, np.zeros(fe.n_p2, complex), 1.0)
    ref = fe.nd_curlcurl + fe.nd_mass
    assert abs(M - ref).max() <= 1e-14 * abs(ref).max()


def test_b_k_on_gradient_is_mass_norm(rng):
    m = generate_unit_square(4)
    fe = fe_data(m)
    B = gradient_field(m, rng.normal(size=m.n_vertices))
    M = assemble_b_k(m, np.zeros(fe.n_p2, complex), 1.0)
    assert B @ (M @ B) == pytest.approx(B @ (fe.nd_mass @ B), rel=1e-12)
    assert np.abs(fe.eval_nd_curl(B)).max() <= 1e-12


def test_b_k_quadratic_form_matches_oracle(rng):
    m = generate_l_shape(4)
    fe = fe_data(m)
    u, B = rand_u(rng, fe), rng.normal(size=m.n_edges)
    M = assemble_b_k(m, u, 0.7)
    assert B @ (M @ B) == pytest.approx(oracles.b_form(m, u, 0.7, B), rel=1e-12)
    assert sym_err(M) <= 1e-12


def test_operators_positive_definite_with_beta(rng):
    m = generate_unit_square(2)
    fe = fe_data(m)
    u, A = rand_u(rng, fe), rng.normal(size=m.n_edges)
    for M in (assemble_a_k(m, u, A, 3.0, 1.0), assemble_b_k(m, u, 1.0)):
        ev = np.linalg.eigvalsh(M.toarray())
        assert ev.min() > 0


def test_stiffness_and_mass_symmetric():
    fe = fe_data(generate_l_shape(4))
    for M in (fe.p2_stiffness, fe.nd_curlcurl, fe.nd_mass, fe.p1_laplacian):
        assert sym_err(M) <= 1e-12


# ----------------------------------------------------------------------- solves


def test_solve_spd_identity(rng):
    b = rng.normal(size=7)
    assert np.allclose(solve_spd(sp.identity(7, format="csr"), b), b, atol=1e-14)


def test_solve_spd_mass_constant():
    fe = fe_data(generate_unit_square(3))
    mass = fe.p2_weighted_mass(np.ones_like(fe.W))
    x = solve_spd(mass, mass @ np.ones(fe.n_p2))
    assert np.allclose(x, 1.0, atol=1e-12)


def test_solve_spd_matches_dense(rng):
    G = rng.normal(size=(10, 10))
    A = G @ G.T + 10 * np.eye(10)
    b = rng.normal(size=10)
    x = solve_spd(sp.csr_matrix(A), b)
    ref = np.linalg.solve(A, b)
    assert np.linalg.norm(x - ref) <= 1e-10 * np.linalg.norm(ref)
    assert np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b)


def test_solve_spd_rejects_size_mismatch():
    with pytest.raises(ValueError):
        solve_spd(sp.identity(3, format="csr"), np.ones(4))


def test_solve_spd_singular_reports():
    with pytest.raises(LinearSolveError):
        solve_spd(sp.csr_matrix(np.zeros((3, 3))), np.ones(3))


def test_reusable_solver_recycles_factorization(rng):
    fe = fe_data(generate_unit_square(4))
    base = fe.p2_stiffness + fe.p2_weighted_mass(np.ones_like(fe.W))
    s = fem.ReusableSolver(spd=True)
    b = rng.normal(size=fe.n_p2)
    x1 = s.solve(base, b)
    perturbed = base + 0.01 * fe.p2_weighted_mass(np.ones_like(fe.W))
    x2 = s.solve(perturbed, b, x1)
    assert s.factorizations == 1
    assert np.linalg.norm(perturbed @ x2 - b) <= 1e-10 * np.linalg.norm(b)


def test_solve_constrained_satisfies_constraint_and_equation(rng):
    m = generate_unit_square(4)
    fe = fe_data(m)
    op = assemble_b_k(m, rand_u(rng, fe), 0.0)
    rhs = rng.normal(size=m.n_edges)
    x = solve_constrained(m, op, rhs)
    assert fe.divergence_residual(x) <= DIV_TOL
    # op x - rhs is L2-orthogonal to the divergence-free subspace, i.e. it is a gradient
    r = op @ x - rhs
    test = project_div_free(m, rng.normal(size=m.n_edges))
    assert abs(test @ r) <= 1e-9 * np.linalg.norm(rhs) * np.linalg.norm(test)


# ------------------------------------------------------------------ projection


@pytest.mark.parametrize("mesh", [generate_unit_square(6), generate_l_shape(6)], ids=["square", "l_shape"])
def test_projection_annihilates_gradients(mesh, rng):
    B = gradient_field(mesh, rng.normal(size=mesh.n_vertices))
    P = project_div_free(mesh, B)
    assert np.linalg.norm(P) <= 1e-10 * np.linalg.norm(B)


@pytest.mark.parametrize("mesh", [generate_unit_square(6), generate_l_shape(6)], ids=["square", "l_shape"])
def test_projection_idempotent_and_orthogonal(mesh, rng):
    fe = fe_data(mesh)
    B = rng.normal(size=mesh.n_edges)
    P = project_div_free(mesh, B)
    assert fe.divergence_residual(P) <= DIV_TOL
    PP = project_div_free(mesh, P)
    assert np.linalg.norm(PP - P) <= 1e-10 * np.linalg.norm(P)
    # orthogonality against the full P1 gradient basis, via the mixed matrix
    mixed = (fe.gradient.T @ fe.nd_mass).toarray()
    norms = np.sqrt(np.einsum("ij,ji->i", mixed, fe.gradient.toarray()))
    assert np.max(np.abs(mixed @ P) / norms) <= 1e-10 * np.sqrt(P @ fe.nd_mass @ P)


def test_gradients_live_in_nedelec_space(rng):
    m = generate_unit_square(3)
    phi = rng.normal(size=m.n_vertices)
    # the gradient of the P1 function is piecewise constant; its tangential
    # moment on an edge equals the difference of the end values
    fe = fe_data(m)
    B = gradient_field(m, phi)
    direct = phi[m.edges[:, 1]] - phi[m.edges[:, 0]]
    assert np.allclose(B, direct, atol=1e-13)
    g_q = np.einsum("tk,tkd->td", phi[m.triangles], fe.grad_lambda)
    assert np.allclose(fe.eval_nd(B), g_q[:, None, :], atol=1e-12)


# --------------------------------------------------------------- interpolation


def test_interpolate_constant_order():
    m = generate_unit_square(2)
    alpha = (1 + 1j) / np.sqrt(2)
    u = interpolate_order(m, lambda x: np.full(len(x), alpha))
    assert np.all(u == alpha) and len(u) == m.n_vertices + m.n_edges


def test_interpolate_constant_potential():
    m = generate_l_shape(4)
    A = interpolate_potential(m, lambda x: np.tile([1.0, 0.0], (len(x), 1)))
    extent = m.vertices[m.edges[:, 1], 0] - m.vertices[m.edges[:, 0], 0]
    assert np.allclose(A, extent, atol=1e-15)
    fe = fe_data(m)
    assert np.allclose(fe.eval_nd(A), [1.0, 0.0], atol=1e-13)


def test_interpolate_phi2_center():
    m = generate_unit_square(2)
    u = interpolate_order(m, initial_value(2))
    k = np.flatnonzero(np.all(np.isclose(p2_nodes(m), 0.5), axis=1))[0]
    assert u[k] == pytest.approx(1 / (2 * np.sqrt(np.pi)), abs=1e-15)


def test_p2_patch_test(rng):
    m = generate_l_shape(4)
    fe = fe_data(m)
    c = rng.normal(size=6) + 1j * rng.normal(size=6)

    def quad(x):
        x1, x2 = x[..., 0], x[..., 1]
        return c[0] + c[1] * x1 + c[2] * x2 + c[3] * x1**2 + c[4] * x1 * x2 + c[5] * x2**2

    u = interpolate_order(m, quad)
    assert np.abs(fe.eval_p2(u) - quad(fe.qpoints)).max() <= 1e-13


def test_interpolate_p1():
    m = generate_unit_square(2)
    v = interpolate_p1(m, lambda x: x[:, 0] + 2 * x[:, 1])
    assert np.allclose(v, m.vertices @ [1, 2])


@settings(max_examples=10, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_constant_field_moments_property(a, b):
    m = generate_unit_square(2)
    A = interpolate_potential(m, lambda x: np.tile([a, b], (len(x), 1)))
    t = m.vertices[m.edges[:, 1]] - m.vertices[m.edges[:, 0]]
    assert np.allclose(A, t @ [a, b], atol=1e-13)
