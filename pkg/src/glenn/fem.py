"""Finite element spaces, quadrature and sparse assembly on a :class:`Mesh2D`.

Three spaces live on a mesh:

* quadratic Lagrange (P2) for the complex order parameter, DOFs ordered
  vertices first and then edge midpoints;
* lowest-order Nedelec of the first kind for the vector potential, one
  tangential moment per edge;
* linear Lagrange (P1), used only for the discrete divergence constraint.

Complex coefficient vectors are stored as ``complex128`` arrays, whose memory
layout is exactly the interleaved (Re, Im) pairs that the real operators
returned by :func:`assemble_a_k` act on (``u.view(np.float64)``).
"""
from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import roots_jacobi, roots_legendre

from .mesh import Mesh2D

OrderField = np.ndarray  # complex, length V + E
PotentialField = np.ndarray  # real, length E

DIV_TOL = 1e-10


class LinearSolveError(RuntimeError):
    pass


# ---------------------------------------------------------------- quadrature


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (Q, 3) barycentric
    weights: np.ndarray  # (Q,) sum to 1/2
    degree: int


def triangle_quadrature(degree: int = 8) -> QuadratureRule:
    """Collapsed Gauss rule on the reference triangle, exact up to ``degree``.

    Legendre points in the collapsed direction and Gauss-Jacobi(1, 0) points
    in the other absorb the Duffy Jacobian.
    """
    n = degree // 2 + 1
    zs, ws = roots_legendre(n)
    zt, wt = roots_jacobi(n, 1.0, 0.0)
    s = 0.5 * (1.0 + zs)
    t = 0.5 * (1.0 + zt)
    S, T = np.meshgrid(s, t, indexing="ij")
    WS, WT = np.meshgrid(0.5 * ws, 0.25 * wt, indexing="ij")
    x = (S * (1.0 - T)).ravel()
    y = T.ravel()
    pts = np.column_stack([1.0 - x - y, x, y])
    return QuadratureRule(points=pts, weights=(WS * WT).ravel(), degree=2 * n - 1)


def monomial_integral(a: int, b: int) -> float:
    """Exact integral of x^a y^b over the reference triangle."""
    return factorial(a) * factorial(b) / factorial(a + b + 2)


# ------------------------------------------------------------ reference bases


def p2_values(bary):
    """P2 shape functions at barycentric points, shape (Q, 6)."""
    l0, l1, l2 = bary.T
    lam = (l0, l1, l2)
    cols = [li * (2 * li - 1) for li in lam]
    # edge j is opposite vertex j
    cols += [4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1]
    return np.column_stack(cols)


def _p2_bary_derivatives(bary):
    """d phi_l / d lambda_m, shape (Q, 6, 3)."""
    Q = len(bary)
    l0, l1, l2 = bary.T
    D = np.zeros((Q, 6, 3))
    for m, li in enumerate((l0, l1, l2)):
        D[:, m, m] = 4 * li - 1
    D[:, 3, 1], D[:, 3, 2] = 4 * l2, 4 * l1
    D[:, 4, 2], D[:, 4, 0] = 4 * l0, 4 * l2
    D[:, 5, 0], D[:, 5, 1] = 4 * l1, 4 * l0
    return D


class _Pattern:
    """Cached CSR sparsity for element-to-global scatter of (T, k, k) blocks."""

    def __init__(self, rows, cols, shape):
        r = np.repeat(rows[:, :, None], cols.shape[1], axis=2).ravel()
        c = np.repeat(cols[:, None, :], rows.shape[1], axis=1).ravel()
        keys = r.astype(np.int64) * shape[1] + c
        uniq, self.inverse = np.unique(keys, return_inverse=True)
        self.shape = shape
        self.nnz = len(uniq)
        self.indices = (uniq % shape[1]).astype(np.int32)
        urow = uniq // shape[1]
        self.indptr = np.zeros(shape[0] + 1, dtype=np.int32)
        np.cumsum(np.bincount(urow, minlength=shape[0]), out=self.indptr[1:])

    def scatter(self, values):
        v = values.ravel()
        if np.iscomplexobj(v):
            data = np.bincount(self.inverse, v.real, self.nnz) + 1j * np.bincount(
                self.inverse, v.imag, self.nnz
            )
        else:
            data = np.bincount(self.inverse, v, self.nnz)
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)


class FEData:
    """Per-mesh geometric factors, basis tables and constant operators."""

    def __init__(self, mesh: Mesh2D, degree: int = 8):
        self.mesh = mesh
        V, E, T = mesh.n_vertices, mesh.n_edges, mesh.n_triangles
        self.nV, self.nE = V, E
        self.n_p2 = V + E
        self.quad = triangle_quadrature(degree)
        bary = self.quad.points

        p = mesh.vertices[mesh.triangles]  # (T, 3, 2)
        self.area = mesh.areas()
        if np.any(self.area <= 0):
            raise ValueError("mesh has non-positive triangle areas")
        # gradients of barycentric coordinates: rotate opposite edge vectors
        e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
        self.grad_lambda = np.stack([-e[..., 1], e[..., 0]], axis=-1) / (2 * self.area[:, None, None])
        self.W = self.area[:, None] * (2 * self.quad.weights)[None, :]  # (T, Q)
        self.qpoints = np.einsum("qm,tmd->tqd", bary, p)

        self.p1_dofs = mesh.triangles
        self.p2_dofs = np.hstack([mesh.triangles, V + mesh.triangle_edges])
        self.nd_dofs = mesh.triangle_edges

        self.p1_val = bary.copy()
        self.p2_val = p2_values(bary)  # (Q, 6)
        Q = len(bary)
        # d phi_l / d lambda_k at quadrature points, laid out (Q*3, 6)
        dref = _p2_bary_derivatives(bary)
        self._dref = dref
        self._dref_qk_l = dref.transpose(0, 2, 1).reshape(Q * 3, 6)
        self._dref_l_qk = dref.transpose(1, 0, 2).reshape(6, Q * 3)

        # Whitney function of local edge j (a, b) = (j+1, j+2):
        #   sgn_j (lam_a grad lam_b - lam_b grad lam_a) = sum_p lam_p nd_coef[t, j, p]
        g = self.grad_lambda
        sgn = mesh.edge_signs
        nd_coef = np.zeros((T, 3, 3, 2))
        curl = np.empty((T, 3))
        for j in range(3):
            a, b = (j + 1) % 3, (j + 2) % 3
            nd_coef[:, j, a] = sgn[:, j, None] * g[:, b]
            nd_coef[:, j, b] = -sgn[:, j, None] * g[:, a]
            curl[:, j] = 2 * sgn[:, j] * (g[:, a, 0] * g[:, b, 1] - g[:, a, 1] * g[:, b, 0])
        self.nd_coef = nd_coef
        self.nd_curl = curl

        w2 = 2 * self.quad.weights
        self._pp = (self.p2_val[:, :, None] * self.p2_val[:, None, :]).reshape(Q, 36)
        self._ll = (bary[:, :, None] * bary[:, None, :]).reshape(Q, 9)
        # R[p, k, l, m] = sum_q 2 w_q phi_l lam_p dphi_m/dlam_k
        self._adv_ref = np.einsum("q,ql,qp,qmk->pklm", w2, self.p2_val, bary, dref).reshape(9, 36)

        self.p2_pattern = _Pattern(self.p2_dofs, self.p2_dofs, (self.n_p2, self.n_p2))
        self.nd_pattern = _Pattern(self.nd_dofs, self.nd_dofs, (E, E))

        p2_grad = self.p2_basis_gradients()
        self.p2_stiffness = self.p2_pattern.scatter(
            np.einsum("tq,tqld,tqmd->tlm", self.W, p2_grad, p2_grad, optimize=True)
        )
        self.nd_curlcurl = self.nd_pattern.scatter(
            self.area[:, None, None] * curl[:, :, None] * curl[:, None, :]
        )
        self.nd_mass = self.nd_weighted_mass(np.ones_like(self.W))

        edges = mesh.edges
        self.gradient = sp.csr_matrix(
            (
                np.concatenate([-np.ones(E), np.ones(E)]),
                (np.concatenate([np.arange(E)] * 2), np.concatenate([edges[:, 0], edges[:, 1]])),
            ),
            shape=(E, V),
        )
        # rows of (B, grad phi_i) over all P1 basis functions
        self.div_operator = (self.gradient.T @ self.nd_mass).tocsr()
        self.p1_laplacian = (self.div_operator @ self.gradient).tocsr()
        self._laplace_lu = spla.splu(self.p1_laplacian[1:, 1:].tocsc())
        self._p1_grad_norms = np.sqrt(self.p1_laplacian.diagonal())

    # -- basis tables (for checks; the kernels below avoid materializing them)

    def p2_basis_gradients(self):
        """Gradients of the local P2 basis, shape (T, Q, 6, 2)."""
        return np.einsum("qlk,tkd->tqld", self._dref, self.grad_lambda)

    def nd_basis_values(self):
        """Values of the local signed Whitney basis, shape (T, Q, 3, 2)."""
        return np.einsum("qp,tjpd->tqjd", self.quad.points, self.nd_coef)

    # -- field evaluation at quadrature points

    def eval_p2(self, coeffs):
        return coeffs[self.p2_dofs] @ self.p2_val.T

    def eval_p2_grad(self, coeffs):
        T = len(self.p2_dofs)
        s = (coeffs[self.p2_dofs] @ self._dref_l_qk).reshape(T, -1, 3)
        return s @ self.grad_lambda

    def _nd_vertex_vectors(self, coeffs):
        return np.einsum("tj,tjpd->tpd", coeffs[self.nd_dofs], self.nd_coef)

    def eval_nd(self, coeffs):
        return np.matmul(self.quad.points, self._nd_vertex_vectors(coeffs))

    def eval_nd_curl(self, coeffs):
        return np.einsum("tl,tl->t", coeffs[self.nd_dofs], self.nd_curl)

    # -- weighted matrices and load vectors

    def p2_weighted_mass(self, coef):
        T = len(self.W)
        return self.p2_pattern.scatter(((self.W * coef) @ self._pp).reshape(T, 6, 6))

    def nd_weighted_mass(self, coef):
        T = len(self.W)
        lm = ((self.W * coef) @ self._ll).reshape(T, 3, 3)  # int coef lam_p lam_r
        X = np.einsum("tpr,tlpd->tlrd", lm, self.nd_coef).reshape(T, 3, 6)
        Y = self.nd_coef.reshape(T, 3, 6).transpose(0, 2, 1)
        return self.nd_pattern.scatter(X @ Y)

    def p2_advection(self, coeffs_A):
        """Matrix of int phi_l (A . grad phi_m) for an edge field A."""
        T = len(self.W)
        v = self._nd_vertex_vectors(coeffs_A)
        vg = (v @ self.grad_lambda.transpose(0, 2, 1)).reshape(T, 9)
        return self.p2_pattern.scatter((self.area[:, None] * (vg @ self._adv_ref)).reshape(T, 6, 6))

    def p2_load(self, f_q):
        """Vector of sum_q W f phi_l, for f of shape (T, Q), real or complex."""
        loc = (self.W * f_q) @ self.p2_val
        return _scatter_vector(self.p2_dofs, loc, self.n_p2)

    def p2_grad_load(self, F_q):
        """Vector of sum_q W F . grad phi_l, for F of shape (T, Q, 2)."""
        T = len(self.W)
        Fg = (F_q @ self.grad_lambda.transpose(0, 2, 1)) * self.W[..., None]
        loc = Fg.reshape(T, -1) @ self._dref_qk_l
        return _scatter_vector(self.p2_dofs, loc, self.n_p2)

    def nd_load(self, F_q):
        G = np.matmul(self.quad.points.T, self.W[..., None] * F_q)  # (T, 3, 2)
        loc = np.einsum("tpd,tlpd->tl", G, self.nd_coef)
        return _scatter_vector(self.nd_dofs, loc, self.nE)

    def nd_curl_load(self, c_t):
        """Vector of integral c curl N_l for an elementwise quadrature field."""
        loc = np.einsum("tq,tq->t", self.W, c_t)[:, None] * self.nd_curl
        return _scatter_vector(self.nd_dofs, loc, self.nE)

    # -- discrete divergence

    def divergence_residual(self, B) -> float:
        """max_i |(B, grad phi_i)| / (||B|| ||grad phi_i||) over P1 basis functions."""
        norm = np.sqrt(max(B @ (self.nd_mass @ B), 0.0))
        if norm == 0.0:
            return 0.0
        return float(np.max(np.abs(self.div_operator @ B) / self._p1_grad_norms) / norm)

    def solve_laplace(self, rhs):
        p = np.zeros(self.nV)
        p[1:] = self._laplace_lu.solve(rhs[1:])
        return p


def _scatter_vector(dofs, loc, n):
    idx = dofs.ravel()
    v = loc.ravel()
    if np.iscomplexobj(v):
        return np.bincount(idx, v.real, n) + 1j * np.bincount(idx, v.imag, n)
    return np.bincount(idx, v, n)


def fe_data(mesh: Mesh2D) -> FEData:
    data = mesh._cache.get("fe")
    if data is None:
        data = mesh._cache["fe"] = FEData(mesh)
    return data


# ------------------------------------------------------------------ operators


def complex_to_real_operator(M):
    """Real symmetric operator acting on interleaved (Re, Im) coefficient pairs."""
    M = sp.csr_matrix(M)
    P = M.real
    Q = M.imag
    J = sp.csr_matrix(np.array([[0.0, -1.0], [1.0, 0.0]]))
    return (sp.kron(P, sp.identity(2), format="csr") + sp.kron(Q, J, format="csr")).tocsr()


def assemble_a_k_complex(mesh, u, A, kappa, beta=0.0):
    """Hermitian matrix M with a_k(v, w) = Re(w^H M v)."""
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    fe = fe_data(mesh)
    uq = fe.eval_p2(u)
    Aq = fe.eval_nd(A)
    A2 = np.sum(Aq**2, axis=-1)
    # |A|^2 enters once from the magnetic gradient and once from the mass weight
    coef = beta + np.abs(uq) ** 2 + 2.0 * A2
    C = fe.p2_advection(A)
    mass = fe.p2_weighted_mass(coef)
    return fe.p2_stiffness / kappa**2 + (1j / kappa) * (C - C.T) + mass


def assemble_a_k(mesh, u, A, kappa, beta=0.0):
    """Real symmetric matrix of a_k over interleaved (Re, Im) P2 coefficients."""
    return complex_to_real_operator(assemble_a_k_complex(mesh, u, A, kappa, beta))


def assemble_b_k(mesh, u, beta=0.0):
    """Matrix of b_k(B, C) = (curl B, curl C) + ((beta + |u|^2) B, C) on edge DOFs."""
    fe = fe_data(mesh)
    coef = beta + np.abs(fe.eval_p2(u)) ** 2
    return (fe.nd_curlcurl + fe.nd_weighted_mass(coef)).tocsr()


def solve_spd(op, rhs, rtol=1e-10, solver=None, x0=None):
    """Solve a symmetric positive definite system to relative residual ``rtol``.

    Pass a :class:`ReusableSolver` to recycle its factorization across calls.
    """
    rhs = np.asarray(rhs, dtype=float)
    if op.shape[0] != len(rhs):
        raise ValueError("operator and right-hand side sizes differ")
    solver = solver or ReusableSolver(spd=True, rtol=rtol)
    return solver.solve(op, rhs, x0)


def solve_constrained(mesh, op, rhs, solver=None):
    """Solve op x = rhs on the discretely divergence-free subspace.

    Saddle-point system with the constraint rows (x, grad phi_i) = 0; the
    constant P1 function is dropped since its gradient vanishes.
    """
    K, b = saddle_system(mesh, op, rhs)
    solver = solver or ReusableSolver(spd=False)
    return solver.solve(K, b)[: op.shape[0]]


class ReusableSolver:
    """Solver for a sequence of slowly changing sparse systems.

    The last LU factorization preconditions a Krylov solve of the next system
    (CG when ``spd``, GMRES otherwise); the matrix is refactorized only when
    that fails to reach ``rtol`` within ``max_inner`` iterations.
    """

    def __init__(self, spd=True, rtol=1e-10, max_inner=30):
        self.spd = spd
        self.rtol = rtol
        self.max_inner = max_inner
        self.lu = None
        self.factorizations = 0
        self.krylov_iterations = 0

    def _factor(self, op):
        try:
            self.lu = spla.splu(op, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise LinearSolveError(f"factorization failed: {exc}") from exc
        self.factorizations += 1

    def solve(self, op, rhs, x0=None):
        op = sp.csc_matrix(op)
        bnorm = np.linalg.norm(rhs)
        if bnorm == 0.0:
            return np.zeros(op.shape[0])
        if self.lu is not None:
            prec = spla.LinearOperator(op.shape, matvec=self.lu.solve, dtype=float)
            count = [0]

            def cb(*_):
                count[0] += 1

            if self.spd:
                x, info = spla.cg(op, rhs, x0=x0, rtol=self.rtol, atol=0.0, maxiter=self.max_inner, M=prec, callback=cb)
            else:
                x, info = spla.gmres(
                    op, rhs, x0=x0, rtol=self.rtol, atol=0.0, restart=self.max_inner,
                    maxiter=1, M=prec, callback=cb, callback_type="pr_norm",
                )
            self.krylov_iterations += count[0]
            if info == 0 and np.linalg.norm(rhs - op @ x) <= self.rtol * bnorm:
                return x
        self._factor(op)
        x = self.lu.solve(rhs)
        for _ in range(3):
            r = rhs - op @ x
            if np.linalg.norm(r) <= self.rtol * bnorm:
                return x
            x = x + self.lu.solve(r)
        raise LinearSolveError(f"residual {np.linalg.norm(r) / bnorm:.2e} above {self.rtol:.0e} after refinement")


def saddle_system(mesh, op, rhs):
    """Saddle-point matrix and right-hand side enforcing (x, grad phi_i) = 0."""
    fe = fe_data(mesh)
    C = fe.div_operator[1:, :]
    K = sp.bmat([[op, C.T], [C, None]], format="csc")
    return K, np.concatenate([rhs, np.zeros(C.shape[0])])


def project_div_free(mesh, B):
    """Remove the discrete gradient part of an edge field.

    Returns ``B - grad p`` where p in P1 solves the Neumann problem
    (grad p, grad q) = (B, grad q) for all q. The gradient of a P1 function
    is an exact Nedelec field, so the result satisfies (B', grad q) = 0.
    """
    fe = fe_data(mesh)
    p = fe.solve_laplace(fe.div_operator @ B)
    out = B - fe.gradient @ p
    # one correction sweep sharpens the constraint to round-off level
    p2 = fe.solve_laplace(fe.div_operator @ out)
    return out - fe.gradient @ p2


def gradient_field(mesh, phi):
    """Edge coefficients of grad phi for a P1 coefficient vector phi."""
    return fe_data(mesh).gradient @ phi


# -------------------------------------------------------------- interpolation


def p2_nodes(mesh):
    return np.vstack([mesh.vertices, mesh.edge_midpoints()])


def interpolate_order(mesh, f) -> OrderField:
    """Nodal P2 interpolant of a complex callable ``f(points) -> values``."""
    vals = np.asarray(f(p2_nodes(mesh)), dtype=complex)
    return np.broadcast_to(vals, (mesh.n_vertices + mesh.n_edges,)).copy()


_GAUSS2 = 0.5 * (1.0 + np.array([-1.0, 1.0]) / np.sqrt(3.0))


def edge_gauss_points(mesh):
    """Two Gauss points per edge, shape (E, 2, 2), and edge vectors (E, 2)."""
    p0 = mesh.vertices[mesh.edges[:, 0]]
    p1 = mesh.vertices[mesh.edges[:, 1]]
    pts = p0[:, None, :] + _GAUSS2[None, :, None] * (p1 - p0)[:, None, :]
    return pts, p1 - p0


def moments_from_values(values, tangents):
    """Tangential moments from field values at the edge Gauss points."""
    return 0.5 * np.einsum("egd,ed->e", values, tangents)


def interpolate_potential(mesh, F) -> PotentialField:
    """Tangential edge moments of a vector callable ``F(points) -> (..., 2)``."""
    pts, tang = edge_gauss_points(mesh)
    vals = np.asarray(F(pts.reshape(-1, 2)), dtype=float).reshape(-1, 2, 2)
    return moments_from_values(vals, tang)


def interpolate_p1(mesh, f):
    return np.asarray(f(mesh.vertices), dtype=float)


def l2_norm_order(mesh, u) -> float:
    fe = fe_data(mesh)
    return float(np.sqrt(np.sum(fe.W * np.abs(fe.eval_p2(u)) ** 2)))
