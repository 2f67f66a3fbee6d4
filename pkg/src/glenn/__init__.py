"""Ginzburg-Landau energy minimizers by conjugate Sobolev gradients and deep Ritz networks."""
from .mesh import Mesh2D, generate_l_shape, generate_mesh, generate_unit_square, refine_uniform
from .gl import GLState, ProblemSpec, compute_energy, initial_value, make_state, standard_problem
from .minimizer import SolveReport, SolverConfig, solve

__version__ = "0.1.0"

__all__ = [
    "Mesh2D",
    "generate_unit_square",
    "generate_l_shape",
    "generate_mesh",
    "refine_uniform",
    "GLState",
    "ProblemSpec",
    "standard_problem",
    "make_state",
    "initial_value",
    "compute_energy",
    "SolverConfig",
    "SolveReport",
    "solve",
]
