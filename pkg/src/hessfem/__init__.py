"""Hessian-vector products of PDE-constrained objectives by implicit differentiation."""
from .ad import DEFAULT_MODE, MODES, KernelFunction, compose_second_order, jvp, vjp
from .bench import BENCHMARKS, BenchmarkSpec, make_benchmark
from .fem import FemObjective, FemResidual, Mesh, WeakForm, build_unit_square_mesh
from .implicit import (ImplicitProblem, full_hessian, gradient, hvp, objective, solve_adjoint,
                       solve_forward)
from .optimize import OptimizeSettings, minimize_lbfgs, minimize_newton_cg
from .sparse import Factorization, SparseMatrix, factorize, from_triplets, solve, solve_transpose

__all__ = [
    "DEFAULT_MODE", "MODES", "KernelFunction", "compose_second_order", "jvp", "vjp",
    "BENCHMARKS", "BenchmarkSpec", "make_benchmark",
    "FemObjective", "FemResidual", "Mesh", "WeakForm", "build_unit_square_mesh",
    "ImplicitProblem", "full_hessian", "gradient", "hvp", "objective", "solve_adjoint",
    "solve_forward",
    "OptimizeSettings", "minimize_lbfgs", "minimize_newton_cg",
    "Factorization", "SparseMatrix", "factorize", "from_triplets", "solve", "solve_transpose",
]
