"""Nonlinear conjugate Sobolev gradient descent for discrete GL minimizers.

Each iteration solves two elliptic problems in the iterate-dependent metric
``a_k + b_k``, conjugates the resulting Sobolev gradient with the previous
direction (Polak-Ribiere, clipped at zero), projects the potential direction
onto discretely divergence-free fields and takes the exact minimizer of the
quartic energy along the ray.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import fem
from .fem import fe_data
from .gl import (
    GLState,
    LineSearchError,
    ProblemSpec,
    compute_energy,
    line_search_quartic,
    minimize_quartic,
    with_energy,
)

log = logging.getLogger(__name__)

SMALL_U = 1e-8


@dataclass
class SolverConfig:
    beta: float = 0.0
    tol: float = 1e-12
    max_iter: int = 10000
    record_history: bool = True
    freeze_potential: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


@dataclass
class SolveReport:
    final_state: GLState
    energies: List[float]
    iterations: int
    converged: bool
    gamma_history: List[float] = field(default_factory=list)
    tau_history: List[float] = field(default_factory=list)
    divergence_history: List[float] = field(default_factory=list)
    message: str = ""

    @property
    def energy(self) -> float:
        return self.energies[-1]


@dataclass
class _Memory:
    """What the conjugation step carries from one iterate to the next."""

    g_u: Optional[np.ndarray] = None
    g_A: Optional[np.ndarray] = None
    g_norm2: Optional[float] = None  # (g, g) measured in the metric it was computed in
    d: Optional[np.ndarray] = None
    D: Optional[np.ndarray] = None


@dataclass
class _Gradient:
    g_u: np.ndarray
    g_A: Optional[np.ndarray]
    a_op: object
    b_op: object

    def metric(self, v_u, w_u, v_A=None, w_A=None) -> float:
        val = float(v_u.view(np.float64) @ (self.a_op @ w_u.view(np.float64)))
        if self.b_op is not None and v_A is not None:
            val += float(v_A @ (self.b_op @ w_A))
        return val


def _updates_potential(spec, config):
    return not spec.reduced and not config.freeze_potential


@dataclass
class Workspace:
    """Linear solvers and warm starts shared by consecutive iterations."""

    a_solver: fem.ReusableSolver = field(default_factory=lambda: fem.ReusableSolver(spd=True))
    b_solver: fem.ReusableSolver = field(default_factory=lambda: fem.ReusableSolver(spd=False))
    delta: Optional[np.ndarray] = None


def sobolev_gradient(mesh, state: GLState, spec: ProblemSpec, beta=0.0, update_potential=None, workspace=None):
    """Solve for (delta, Delta); the Sobolev gradient is (u - delta, A - Delta).

    ``Delta`` is ``None`` when the potential is not an unknown.
    """
    fe = fe_data(mesh)
    ws = workspace or Workspace()
    if update_potential is None:
        update_potential = not spec.reduced
    kappa = state.kappa
    if fem.l2_norm_order(mesh, state.u) < SMALL_U and beta == 0.0:
        beta = 1.0
    uq = fe.eval_p2(state.u)
    Aq = fe.eval_nd(state.A)
    a_op = fem.assemble_a_k(mesh, state.u, state.A, kappa, beta)
    rhs_u = fe.p2_load((1.0 + beta + np.sum(Aq**2, axis=-1)) * uq)
    x0 = None if ws.delta is None else ws.delta.view(np.float64)
    delta = fem.solve_spd(a_op, rhs_u.view(np.float64), solver=ws.a_solver, x0=x0).view(np.complex128)
    ws.delta = delta
    if not update_potential:
        return delta, None, a_op, None

    b_op = fem.assemble_b_k(mesh, state.u, beta)
    guq = fe.eval_p2_grad(state.u)
    a, b = uq.real, uq.imag
    # (1/kappa) Re(i conj(u) grad u) = (b grad a - a grad b) / kappa
    current = (b[..., None] * guq.real - a[..., None] * guq.imag) / kappa
    h = spec.h_ext(fe.qpoints)
    rhs_A = fe.nd_load(beta * Aq - current) + fe.nd_curl_load(h)
    Delta = fem.solve_constrained(mesh, b_op, rhs_A, solver=ws.b_solver)
    return delta, Delta, a_op, b_op


def _gradient(mesh, state, spec, config, workspace):
    update = _updates_potential(spec, config)
    delta, Delta, a_op, b_op = sobolev_gradient(mesh, state, spec, config.beta, update, workspace)
    g_A = state.A - Delta if update else None
    return _Gradient(g_u=state.u - delta, g_A=g_A, a_op=a_op, b_op=b_op)


def polak_ribiere(grad: _Gradient, memory: _Memory) -> float:
    """max(0, (g_k, g_k - g_{k-1})_{X^k} / (g_{k-1}, g_{k-1})_{X^{k-1}})."""
    if memory.g_u is None or not memory.g_norm2:
        return 0.0
    diff_A = None if grad.g_A is None else grad.g_A - memory.g_A
    num = grad.metric(grad.g_u, grad.g_u - memory.g_u, grad.g_A, diff_A)
    return max(0.0, num / memory.g_norm2)


def descent_step(mesh, state: GLState, memory: _Memory, spec: ProblemSpec, config: SolverConfig, workspace=None):
    """One conjugate Sobolev gradient iteration.

    Returns ``(new_state, gamma, tau, quartic, memory)``; ``new_state`` is
    ``None`` when no descent is possible (zero gradient or non-descent even
    after a steepest-descent restart).
    """
    grad = _gradient(mesh, state, spec, config, workspace or Workspace())
    gamma = polak_ribiere(grad, memory)
    update = grad.g_A is not None

    def direction(gam):
        d = -grad.g_u
        D = -grad.g_A if update else None
        if gam > 0.0:
            d = d + gam * memory.d
            if update:
                D = D + gam * memory.D
        if update:
            D = fem.project_div_free(mesh, D)
        return d, D

    d, D = direction(gamma)
    q = line_search_quartic(mesh, state, (d, D), spec)
    if q.c1 >= 0.0 and gamma > 0.0:
        log.debug("non-descent conjugate direction, restarting with gamma = 0")
        gamma = 0.0
        d, D = direction(0.0)
        q = line_search_quartic(mesh, state, (d, D), spec)

    g_norm2 = grad.metric(grad.g_u, grad.g_u, grad.g_A, grad.g_A)
    new_memory = _Memory(g_u=grad.g_u, g_A=grad.g_A, g_norm2=g_norm2, d=d, D=D)
    if q.c1 >= 0.0:
        return None, gamma, 0.0, q, new_memory
    try:
        tau = minimize_quartic(q)
    except LineSearchError:
        return None, gamma, 0.0, q, new_memory
    new_u = state.u + tau * d
    new_A = state.A + tau * D if update else state.A
    return state.replace(u=new_u, A=new_A), gamma, tau, q, new_memory


def solve(mesh, initial: GLState, spec: ProblemSpec, config: Optional[SolverConfig] = None) -> SolveReport:
    """Iterate until the energy decrease drops below ``config.tol``."""
    config = config or SolverConfig()
    if fem.l2_norm_order(mesh, initial.u) == 0.0:
        raise ValueError("initial order parameter must be non-zero")
    state = initial
    update = _updates_potential(spec, config)
    if update:
        state = state.replace(A=fem.project_div_free(mesh, state.A))
    state = with_energy(mesh, state, spec)
    fe = fe_data(mesh)

    energies = [state.energy_cache]
    gammas, taus = [], []
    divs = [fe.divergence_residual(state.A)] if update else []
    memory = _Memory()
    workspace = Workspace()
    converged = False
    message = "maximum number of iterations reached"
    k = 0
    while k < config.max_iter:
        new_state, gamma, tau, q, memory = descent_step(mesh, state, memory, spec, config, workspace)
        if new_state is None:
            converged = True
            message = "no descent direction left (critical point)"
            break
        new_state = with_energy(mesh, new_state, spec)
        e_old, e_new = energies[-1], new_state.energy_cache
        if e_new > e_old:
            # round-off level increase: keep the previous iterate
            converged = e_old - q(tau) < config.tol
            message = "energy increase at round-off level; step rejected"
            break
        k += 1
        state = new_state
        if config.record_history:
            energies.append(e_new)
            gammas.append(gamma)
            taus.append(tau)
            if update:
                divs.append(fe.divergence_residual(state.A))
        else:
            energies = [energies[0], e_new]
        if e_old - e_new < config.tol:
            converged = True
            message = "energy decrease below tolerance"
            break
        if k % 50 == 0:
            log.info("iter %d  E = %.10f  gamma = %.3f  tau = %.3f", k, e_new, gamma, tau)

    return SolveReport(
        final_state=state,
        energies=energies,
        iterations=k,
        converged=converged,
        gamma_history=gammas,
        tau_history=taus,
        divergence_history=divs,
        message=message,
    )
