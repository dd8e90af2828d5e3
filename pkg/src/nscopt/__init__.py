"""Nonsmooth constrained optimization with built-in reverse-mode autodiff.

Define named tensor variables and one callback returning the objective and
constraint expressions; the quasi-Newton exact-penalty driver does the
rest. See :mod:`nscopt.gallery` for worked constrained examples.
"""

from .autodiff import Node, Tape, concat, dot, maximum, relu
from .errors import (ConfigError, ContractError, DomainError, NumericalError,
                     QPSolveError, ShapeError)
from .problem import (EvalRecord, ProblemDefinition, VariableSpec, evaluate,
                      evaluate_penalty)
from .qp import (QPData, QPSolution, QPStatus, min_norm_in_hull, solve_qp,
                 steering_direction)
from .solver import (IterateRecord, Solution, SolverOptions, TerminationCode,
                     bfgs_update, solve, weak_wolfe_linesearch)

__all__ = [
    "Node", "Tape", "concat", "dot", "maximum", "relu",
    "ConfigError", "ContractError", "DomainError", "NumericalError",
    "QPSolveError", "ShapeError",
    "EvalRecord", "ProblemDefinition", "VariableSpec", "evaluate",
    "evaluate_penalty",
    "QPData", "QPSolution", "QPStatus", "min_norm_in_hull", "solve_qp",
    "steering_direction",
    "IterateRecord", "Solution", "SolverOptions", "TerminationCode",
    "bfgs_update", "solve", "weak_wolfe_linesearch",
]

__version__ = "0.1.0"
