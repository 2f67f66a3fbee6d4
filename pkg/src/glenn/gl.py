"""Ginzburg-Landau energy, its first derivative and the exact line-search quartic.

All integrals use the degree-8 rule of :mod:`glenn.fem`, so the quartic well
of a P2 order parameter is integrated exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import fem
from .fem import fe_data

SQRT2 = np.sqrt(2.0)
ALPHA = (1.0 + 1.0j) / SQRT2


# ---------------------------------------------------------------- reference data


def standard_h_ext(x):
    """External field 2 sqrt(2) pi sin(pi x1) sin(pi x2)."""
    x = np.asarray(x)
    return 2 * SQRT2 * np.pi * np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])


def standard_fixed_A(x):
    """Divergence-free potential whose curl is :func:`standard_h_ext`."""
    x = np.asarray(x)
    s1, c1 = np.sin(np.pi * x[..., 0]), np.cos(np.pi * x[..., 0])
    s2, c2 = np.sin(np.pi * x[..., 1]), np.cos(np.pi * x[..., 1])
    return SQRT2 * np.stack([s1 * c2, -c1 * s2], axis=-1)


def zero_field(x):
    return np.zeros(np.shape(x)[:-1])


def _chi(x):
    x = np.asarray(x, dtype=float)
    return 2 * x[..., 0] - 1, 2 * x[..., 1] - 1


def _psi1(y1, y2):
    return ALPHA * np.exp(-(y1**2 + y2**2))


def _psi2(y1, y2):
    return (2.0 / 3.0 * (y1 + 1j * y2) + 0.5) * np.exp(-(y1**2 + y2**2)) / np.sqrt(np.pi)


def _psi3(y1, y2):
    return ALPHA * np.exp(10j * (y1**2 + y2**2))


def _psi4(y1, y2):
    return ALPHA * (y1 + 1j * y2) * np.exp(10j * (y1**2 + y2**2))


def _psi5(y1, y2):
    return ALPHA * np.ones_like(y1, dtype=complex)


_PSI = {1: _psi1, 2: _psi2, 3: _psi3, 4: _psi4, 5: _psi5}


def initial_value(j: int, domain: str = "unit_square") -> Callable:
    """Heuristic starting order parameter phi_j = psi_j(2x - 1).

    On the L-shape the same formula is simply restricted to the domain.
    """
    if j not in _PSI:
        raise ValueError(f"initial value index must be in 1..5, got {j}")
    if domain not in ("unit_square", "l_shape"):
        raise ValueError(f"unknown domain {domain!r}")
    psi = _PSI[j]

    def phi(x):
        return psi(*_chi(x))

    phi.__name__ = f"phi_{j}"
    return phi


# ------------------------------------------------------------------- problem


@dataclass(frozen=True)
class ProblemSpec:
    model: str = "full"  # "full" or "reduced"
    domain: str = "unit_square"
    h_ext: Callable = standard_h_ext
    fixed_A: Optional[Callable] = None

    def __post_init__(self):
        if self.model not in ("full", "reduced"):
            raise ValueError(f"model must be 'full' or 'reduced', got {self.model!r}")
        if self.domain not in ("unit_square", "l_shape"):
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.model == "reduced" and self.fixed_A is None:
            raise ValueError("the reduced model needs a prescribed potential fixed_A")

    @property
    def reduced(self) -> bool:
        return self.model == "reduced"


def standard_problem(model="reduced", domain="unit_square") -> ProblemSpec:
    """The benchmark setting: sinusoidal field, and its potential for the reduced model."""
    return ProblemSpec(
        model=model,
        domain=domain,
        h_ext=standard_h_ext,
        fixed_A=standard_fixed_A if model == "reduced" else None,
    )


@dataclass(frozen=True)
class GLState:
    """An iterate (u, A, kappa). ``energy_cache`` is dropped by :meth:`replace`."""

    u: np.ndarray
    A: np.ndarray
    kappa: float
    energy_cache: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")

    def replace(self, **changes) -> "GLState":
        changes.setdefault("energy_cache", None)
        return replace(self, **changes)


def make_state(mesh, u, spec: ProblemSpec, kappa, A=None) -> GLState:
    """Build a state; the reduced model always carries the interpolated fixed potential."""
    if spec.reduced:
        A = fem.interpolate_potential(mesh, spec.fixed_A)
    elif A is None:
        A = np.zeros(mesh.n_edges)
    return GLState(u=np.asarray(u, dtype=complex), A=np.asarray(A, dtype=float), kappa=float(kappa))


def _check(mesh, state):
    fe = fe_data(mesh)
    if state.u.shape != (fe.n_p2,) or state.A.shape != (fe.nE,):
        raise ValueError("state does not match the mesh")
    return fe


def _h_at_quadrature(fe, spec):
    return spec.h_ext(fe.qpoints)


def _energy_density(kappa, uq, guq, Aq, curl_minus_h):
    w = 1j / kappa * guq + Aq * uq[..., None]
    kinetic = np.sum(np.abs(w) ** 2, axis=-1)
    well = 0.5 * (1.0 - np.abs(uq) ** 2) ** 2
    dens = kinetic + well
    if curl_minus_h is not None:
        dens = dens + curl_minus_h**2
    return 0.5 * dens


def compute_energy(mesh, state: GLState, spec: ProblemSpec) -> float:
    """GL free energy of a discrete state (reduced energy drops the field term)."""
    if state.energy_cache is not None:
        return state.energy_cache
    fe = _check(mesh, state)
    kappa = state.kappa
    uq = fe.eval_p2(state.u)
    guq = fe.eval_p2_grad(state.u)
    Aq = fe.eval_nd(state.A)
    mag = None
    if not spec.reduced:
        mag = fe.eval_nd_curl(state.A)[:, None] - _h_at_quadrature(fe, spec)
    return float(np.sum(fe.W * _energy_density(kappa, uq, guq, Aq, mag)))


def with_energy(mesh, state, spec) -> GLState:
    return replace(state, energy_cache=compute_energy(mesh, state.replace(), spec))


@dataclass(frozen=True)
class AnalyticFields:
    """Continuous fields given by callables on arrays of points (..., 2)."""

    u: Callable
    grad_u: Callable
    A: Callable
    curl_A: Callable


def compute_energy_analytic(fields: AnalyticFields, kappa, spec: ProblemSpec, mesh) -> float:
    """Same integrand as :func:`compute_energy`, sampled from callables on ``mesh``'s quadrature."""
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    fe = fe_data(mesh)
    x = fe.qpoints
    mag = None
    if not spec.reduced:
        mag = fields.curl_A(x) - spec.h_ext(x)
    dens = _energy_density(kappa, fields.u(x), fields.grad_u(x), fields.A(x), mag)
    return float(np.sum(fe.W * dens))


def gauge_transform(fields: AnalyticFields, phi: Callable, grad_phi: Callable, kappa) -> AnalyticFields:
    """(u, A) -> (exp(i kappa phi) u, A + grad phi); curl A is unchanged."""

    def u(x):
        return np.exp(1j * kappa * phi(x)) * fields.u(x)

    def grad_u(x):
        ph = np.exp(1j * kappa * phi(x))[..., None]
        return ph * (1j * kappa * grad_phi(x) * fields.u(x)[..., None] + fields.grad_u(x))

    def A(x):
        return fields.A(x) + grad_phi(x)

    return AnalyticFields(u=u, grad_u=grad_u, A=A, curl_A=fields.curl_A)


# ----------------------------------------------------------------- derivative


def residual(mesh, state: GLState, spec: ProblemSpec):
    """Load vectors of the Frechet derivative over all basis functions.

    Returns ``(r_u, r_A)``. ``r_u`` is complex with ``Re r_u[j] = <dE/du, phi_j>``
    and ``Im r_u[j] = <dE/du, i phi_j>``, so that the directional derivative
    along v is ``Re(conj(r_u) @ v)``. ``r_A`` is ``None`` for the reduced model.
    """
    fe = _check(mesh, state)
    kappa = state.kappa
    uq = fe.eval_p2(state.u)
    guq = fe.eval_p2_grad(state.u)
    Aq = fe.eval_nd(state.A)
    w = 1j / kappa * guq + Aq * uq[..., None]

    # w . conj(i/k grad phi + A phi) = -i/k w . grad phi + (w . A) phi
    r_u = fe.p2_grad_load(-1j / kappa * w) + fe.p2_load(np.sum(w * Aq, axis=-1) + (np.abs(uq) ** 2 - 1) * uq)
    if spec.reduced:
        return r_u, None

    a, b = uq.real, uq.imag
    ga, gb = guq.real, guq.imag
    current = np.abs(uq)[..., None] ** 2 * Aq + (b[..., None] * ga - a[..., None] * gb) / kappa
    mag = fe.eval_nd_curl(state.A)[:, None] - _h_at_quadrature(fe, spec)
    r_A = fe.nd_load(current) + fe.nd_curl_load(mag)
    return r_u, r_A


def directional_derivative(residuals, d, D=None) -> float:
    r_u, r_A = residuals
    val = float(np.real(np.vdot(r_u, d)))
    if r_A is not None and D is not None:
        val += float(r_A @ D)
    return val


# ----------------------------------------------------------------- line search


@dataclass(frozen=True)
class Quartic:
    """p(t) = c0 + c1 t + c2 t^2 + c3 t^3 + c4 t^4."""

    c0: float
    c1: float
    c2: float
    c3: float
    c4: float

    @property
    def coefficients(self):
        return np.array([self.c0, self.c1, self.c2, self.c3, self.c4])

    def __call__(self, t):
        return np.polynomial.polynomial.polyval(t, self.coefficients)

    def derivative(self, t):
        c = self.coefficients
        return np.polynomial.polynomial.polyval(t, c[1:] * np.arange(1, 5))


def line_search_quartic(mesh, state: GLState, direction, spec: ProblemSpec) -> Quartic:
    """Exact coefficients of t -> E(state + t * direction)."""
    fe = _check(mesh, state)
    d, D = direction
    reduced = spec.reduced or D is None
    k = state.kappa
    uq, guq = fe.eval_p2(state.u), fe.eval_p2_grad(state.u)
    dq, gdq = fe.eval_p2(d), fe.eval_p2_grad(d)
    Aq = fe.eval_nd(state.A)

    w0 = 1j / k * guq + Aq * uq[..., None]
    w1 = 1j / k * gdq + Aq * dq[..., None]
    if not reduced:
        Dq = fe.eval_nd(D)
        w1 = w1 + Dq * uq[..., None]
        w2 = Dq * dq[..., None]
    else:
        w2 = np.zeros_like(w0)

    def rdot(p, q):
        return np.sum((p * np.conj(q)).real, axis=-1)

    e = [rdot(w0, w0), 2 * rdot(w0, w1), rdot(w1, w1) + 2 * rdot(w0, w2), 2 * rdot(w1, w2), rdot(w2, w2)]

    s0 = np.abs(uq) ** 2
    s1 = 2 * (uq * np.conj(dq)).real
    s2 = np.abs(dq) ** 2
    r = 1.0 - s0
    well = [r**2, -2 * r * s1, s1**2 - 2 * r * s2, 2 * s1 * s2, s2**2]

    dens = [e[i] + 0.5 * well[i] for i in range(5)]
    if not spec.reduced:
        m0 = fe.eval_nd_curl(state.A)[:, None] - _h_at_quadrature(fe, spec)
        m1 = fe.eval_nd_curl(D)[:, None] if not reduced else np.zeros_like(m0)
        dens[0] = dens[0] + m0**2
        dens[1] = dens[1] + 2 * m0 * m1
        dens[2] = dens[2] + m1**2
    c = [0.5 * float(np.sum(fe.W * di)) for di in dens]
    return Quartic(*c)


class LineSearchError(RuntimeError):
    pass


TAU_MAX = 10.0


def golden_section(f, lo, hi, tol=1e-12, max_iter=200):
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) <= tol * (1.0 + abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def minimize_quartic(q: Quartic, tau_max: float = TAU_MAX) -> float:
    """Smallest-value positive local minimizer of a quartic with c4 >= 0.

    Uses the real roots of p' when the quartic term is significant and falls
    back to golden-section search on [0, tau_max] when it is negligible.
    """
    c = q.coefficients
    if c[4] < 0:
        raise ValueError(f"leading coefficient must be non-negative, got {c[4]}")
    scale = np.max(np.abs(c[1:]))
    if scale == 0.0:
        raise LineSearchError("zero search direction")
    if c[4] > 1e-14 * scale:
        dp = c[1:] * np.arange(1, 5)
        roots = np.roots(dp[::-1])
        cands = []
        for z in roots:
            if abs(z.imag) > 1e-8 * (1.0 + abs(z.real)):
                continue
            t = z.real
            # one Newton polish on p'
            d2 = 2 * c[2] + 6 * c[3] * t + 12 * c[4] * t**2
            if d2 > 0:
                t = t - q.derivative(t) / d2
            if t > 0 and d2 >= 0:
                cands.append(t)
        cands = [t for t in cands if q(t) < q(0.0)]
        if not cands:
            raise LineSearchError("no positive minimizer: p does not decrease for t > 0")
        return float(min(cands, key=q))
    t = golden_section(q, 0.0, tau_max)
    if not q(t) < q(0.0):
        raise LineSearchError("no positive minimizer: p does not decrease for t > 0")
    return float(t)
