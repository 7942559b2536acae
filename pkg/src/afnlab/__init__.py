"""Numerical laboratory for operator renewal theory on intermittent interval maps."""

from .afn_map import Branch, MapParams, deriv, eval_map, invert_branch, iterate, solve_e0

__version__ = "0.1.0"

__all__ = ["Branch", "MapParams", "deriv", "eval_map", "invert_branch", "iterate", "solve_e0"]
