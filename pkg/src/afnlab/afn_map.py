"""Evaluation, derivatives and branch inverses of f(x) = x(1 + b x^alpha) mod 1.

The map has an indifferent fixed point at 0 and a single wrap point e0 with
e0 (1 + b e0^alpha) = 1.  The left branch is [0, e0) and the right branch is
[e0, 1]; f(e0) = 0 and f(1) = (1 + b) mod 1.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "MapParams",
    "Branch",
    "DomainError",
    "NoPreimageError",
    "eval_map",
    "deriv",
    "solve_e0",
    "invert_branch",
    "iterate",
    "step_offset",
    "invert_offset",
]

_DOMAIN_TOL = 1e-12


class DomainError(ValueError):
    """Argument outside [0, 1]."""


class NoPreimageError(ValueError):
    """Target value not in the image of the requested branch."""


class Branch(enum.Enum):
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class MapParams:
    """Parameters (alpha, b) of the map family."""

    alpha: float
    b: float

    def __post_init__(self):
        a, b = float(self.alpha), float(self.b)
        if not (math.isfinite(a) and a > 0):
            raise ValueError(f"alpha must be positive, got {self.alpha!r}")
        if not (0 < b <= 1):
            raise ValueError(f"b must lie in (0, 1], got {self.b!r}")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "b", b)

    @property
    def beta(self) -> float:
        return 1.0 / self.alpha

    @property
    def finite_measure(self) -> bool:
        return self.alpha < 1

    @cached_property
    def e0(self) -> float:
        return solve_e0(self)


def _check_unit(x):
    x = np.asarray(x, dtype=float)
    if np.any(x < -_DOMAIN_TOL) or np.any(x > 1 + _DOMAIN_TOL) or np.any(np.isnan(x)):
        raise DomainError("argument outside [0, 1]")
    return np.clip(x, 0.0, 1.0)


def _pow(x, p):
    # x**p with 0**p = 0 for p > 0
    with np.errstate(divide="ignore"):
        return np.where(x > 0, np.exp(p * np.log(np.where(x > 0, x, 1.0))), 0.0)


def _lift(params: MapParams, x):
    """Unreduced value x (1 + b x^alpha)."""
    return x + params.b * _pow(x, 1.0 + params.alpha)


def _scalar_or_array(value, like):
    if np.ndim(like) == 0:
        return float(value)
    return value


def eval_map(params: MapParams, x):
    """Evaluate f at x (scalar or array)."""
    xa = _check_unit(x)
    right = xa >= params.e0
    # e0 > 1/2, so x - 1 is exact on the right branch and 1 + b never rounds up
    out = np.where(right, (xa - 1.0) + params.b * _pow(xa, 1.0 + params.alpha), _lift(params, xa))
    # (1 + b) mod 1 = 0 for b = 1: the only point wrapping twice
    out = np.where(out >= 1.0, out - 1.0, out)
    # e0 is the rounded root of the lift, f(e0) = 0 by definition
    out = np.where(xa == params.e0, 0.0, np.clip(out, 0.0, 1.0))
    return _scalar_or_array(out, x)


def deriv(params: MapParams, x):
    """Derivative 1 + b (1 + alpha) x^alpha, identical on both branches."""
    xa = _check_unit(x)
    out = 1.0 + params.b * (1.0 + params.alpha) * _pow(xa, params.alpha)
    return _scalar_or_array(out, x)


def solve_e0(params: MapParams) -> float:
    """Root of e (1 + b e^alpha) = 1 in (0, 1), safeguarded Newton."""
    a, b = params.alpha, params.b
    lo, hi = 0.0, 1.0
    e = 1.0 / (1.0 + b)
    for _ in range(200):
        ea = e ** a
        g = e + b * e * ea - 1.0
        if g > 0:
            hi = e
        else:
            lo = e
        dg = 1.0 + b * (1.0 + a) * ea
        step = g / dg
        e_new = e - step
        if not (lo < e_new < hi):
            e_new = 0.5 * (lo + hi)
        if abs(e_new - e) <= 1e-16 * max(1.0, e) or hi - lo < 4e-16:
            e = e_new
            break
        e = e_new
    else:  # pragma: no cover - bisection guarantees convergence
        raise RuntimeError("e0 iteration did not converge")
    # polish: pick the neighbouring double with the smallest residual
    cands = [math.nextafter(e, 0.0), e, math.nextafter(e, 1.0)]
    return min(cands, key=lambda t: abs(t + b * t ** (1.0 + a) - 1.0))


def _solve_lift(params, target, lo, hi, tol=1e-15, maxiter=100):
    """Vectorised solve of x + b x^(1+alpha) = target for x in [lo, hi]."""
    a, b = params.alpha, params.b
    target = np.asarray(target, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), target.shape).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), target.shape).copy()
    x = target / (1.0 + b * _pow(np.clip(target, 0.0, None), a))
    x = np.clip(x, lo, hi)
    for _ in range(maxiter):
        xa = _pow(x, a)
        g = x + b * x * xa - target
        lo = np.where(g <= 0, x, lo)
        hi = np.where(g >= 0, x, hi)
        x_new = x - g / (1.0 + b * (1.0 + a) * xa)
        bad = ~((x_new >= lo) & (x_new <= hi))
        x_new = np.where(bad, 0.5 * (lo + hi), x_new)
        done = np.abs(x_new - x) <= tol * np.maximum(np.abs(x_new), 1e-300)
        x = x_new
        if np.all(done | (hi - lo <= tol * np.abs(x))):
            break
    return x


def invert_branch(params: MapParams, branch: Branch, z):
    """Preimage of z under the given branch.

    Left maps [0, e0) onto [0, 1); right maps [e0, 1] onto [0, b].
    """
    za = np.asarray(z, dtype=float)
    if np.any(za < -_DOMAIN_TOL) or np.any(za > 1 + _DOMAIN_TOL):
        raise DomainError("argument outside [0, 1]")
    za = np.clip(za, 0.0, 1.0)
    e0 = params.e0
    if branch is Branch.LEFT:
        out = _solve_lift(params, za, 0.0, e0)
        out = np.where(za == 0.0, 0.0, out)
    elif branch is Branch.RIGHT:
        if np.any(za > params.b + _DOMAIN_TOL):
            raise NoPreimageError(f"right branch image is [0, {params.b}]")
        out = _solve_lift(params, 1.0 + za, e0, 1.0)
        out = np.where(za == 0.0, e0, out)
    else:
        raise TypeError(f"unknown branch {branch!r}")
    return _scalar_or_array(out, z)


def iterate(params: MapParams, x, n: int, record: bool = False):
    """n-fold composition of f.

    With ``record=True`` also returns the boolean visit sequence
    ``[f^i(x) in Y for i in range(n + 1)]`` where Y = [e0, 1].
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    cur = _check_unit(x)
    visits = [cur >= params.e0] if record else None
    for _ in range(n):
        cur = np.asarray(eval_map(params, cur))
        if record:
            visits.append(cur >= params.e0)
    out = _scalar_or_array(cur, x)
    if record:
        return out, np.array(visits)
    return out


def step_offset(params: MapParams, base, d):
    """f(base + d) - f(base) on the branch containing [base, base + d].

    Computed as d + b base^(1+alpha) expm1((1+alpha) log1p(d / base)), which
    keeps full relative accuracy for tiny offsets.
    """
    base = np.asarray(base, dtype=float)
    d = np.asarray(d, dtype=float)
    p = 1.0 + params.alpha
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        safe = np.where(base > 0, base, 1.0)
        ratio = d / safe
        grow = params.b * _pow(base, p) * np.expm1(p * np.log1p(ratio))
        # offsets far above the base lose nothing to cancellation
        direct = params.b * (_pow(np.abs(base + d), p) - _pow(base, p))
        inner = np.where((base > 0) & (ratio < 1e6), grow, direct)
    return d + inner


def invert_offset(params: MapParams, base, target, maxiter=60):
    """Solve step_offset(base, d) = target for d >= 0 (vectorised)."""
    base = np.asarray(base, dtype=float)
    target = np.asarray(target, dtype=float)
    a = params.alpha
    d = target / (1.0 + params.b * (1.0 + a) * _pow(base, a))
    lo = np.zeros_like(d + base)
    hi = np.broadcast_to(target, lo.shape).copy()
    d = np.broadcast_to(d, lo.shape).copy()
    for _ in range(maxiter):
        g = step_offset(params, base, d) - target
        lo = np.where(g <= 0, d, lo)
        hi = np.where(g >= 0, d, hi)
        dp = 1.0 + params.b * (1.0 + a) * _pow(base + d, a)
        d_new = d - g / dp
        bad = ~((d_new >= lo) & (d_new <= hi))
        d_new = np.where(bad, 0.5 * (lo + hi), d_new)
        if np.all(np.abs(d_new - d) <= 1e-15 * np.abs(d_new)):
            d = d_new
            break
        d = d_new
    return d
