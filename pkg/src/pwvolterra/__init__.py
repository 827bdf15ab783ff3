"""Linear Volterra equations of the first kind with piecewise continuous kernels."""

from .errors import VolterraError
from .expr import differentiate, evaluate, parse
from .model import Problem, load_problem, problem_from_dict, validate

__version__ = "0.1.0"

__all__ = [
    "VolterraError",
    "Problem",
    "differentiate",
    "evaluate",
    "load_problem",
    "parse",
    "problem_from_dict",
    "validate",
]
