"""Turnpike-structured long-horizon optimal control toolkit."""

from .errors import *  # noqa: F401,F403
from .problems import Fixed, Free, ProblemDef, TerminalSpec, eval_rhs, make_problem, problem_names

__version__ = "0.1.0"
