import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afnlab.afn_map import (
    Branch,
    DomainError,
    MapParams,
    NoPreimageError,
    deriv,
    eval_map,
    invert_branch,
    invert_offset,
    iterate,
    solve_e0,
    step_offset,
)

P11 = MapParams(1.0, 1.0)
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0

alphas = st.floats(0.2, 3.0)
bs = st.floats(0.05, 1.0)
unit = st.floats(0.0, 1.0)


def test_params_derived_fields():
    p = MapParams(0.5, 0.5)
    assert p.beta == 2.0
    assert p.finite_measure
    assert not MapParams(1.5, 0.5).finite_measure
    assert not MapParams(1.0, 0.5).finite_measure


@pytest.mark.parametrize("alpha,b", [(0.0, 0.5), (-1.0, 0.5), (float("nan"), 0.5), (1.0, 0.0), (1.0, 1.5)])
def test_params_reject_invalid(alpha, b):
    with pytest.raises(ValueError):
        MapParams(alpha, b)


@pytest.mark.parametrize("x,want", [(0.0, 0.0), (0.5, 0.75), (1.0, 0.0), (0.75, 0.3125)])
def test_eval_arithmetic(x, want):
    assert eval_map(P11, x) == pytest.approx(want, abs=1e-15)


def test_eval_domain_error():
    with pytest.raises(DomainError):
        eval_map(P11, 1.1)
    with pytest.raises(DomainError):
        eval_map(P11, np.array([0.2, -0.01]))
    assert eval_map(P11, 1.0 + 1e-13) == 0.0


def test_eval_vectorised_matches_scalar():
    p = MapParams(0.7, 0.3)
    x = np.linspace(0, 1, 101)
    assert np.array_equal(eval_map(p, x), np.array([eval_map(p, t) for t in x]))


@pytest.mark.parametrize("params,x,want", [(P11, 0.0, 1.0), (P11, 1.0, 3.0), (MapParams(0.5, 1.0), 0.25, 1.75)])
def test_deriv_values(params, x, want):
    assert deriv(params, x) == pytest.approx(want, abs=1e-15)


def test_e0_closed_forms():
    assert abs(P11.e0 - GOLDEN) <= 1e-14
    assert abs(MapParams(1.0, 0.5).e0 - (math.sqrt(3.0) - 1.0)) <= 1e-14


@pytest.mark.parametrize("alpha,b", [(0.5, 0.5), (1.5, 0.5), (0.3, 0.9), (2.5, 0.1)])
def test_e0_against_extended_precision(alpha, b):
    mp.mp.dps = 40
    root = mp.findroot(lambda e: e * (1 + b * e ** alpha) - 1, 0.7)
    assert abs(solve_e0(MapParams(alpha, b)) - float(root)) <= 1e-15


def test_left_inverse_first_lattice_point():
    # x(1 + x) = e0 by the quadratic formula
    x1 = (-1.0 + math.sqrt(1.0 + 4.0 * GOLDEN)) / 2.0
    assert invert_branch(P11, Branch.LEFT, P11.e0) == pytest.approx(x1, abs=1e-14)
    assert x1 == pytest.approx(0.4316834166, abs=1e-10)


def test_inverse_endpoints_and_errors():
    assert invert_branch(P11, Branch.LEFT, 0.0) == 0.0
    assert invert_branch(P11, Branch.RIGHT, 0.0) == P11.e0
    p = MapParams(0.5, 0.5)
    with pytest.raises(NoPreimageError):
        invert_branch(p, Branch.RIGHT, 0.6)
    with pytest.raises(DomainError):
        invert_branch(p, Branch.LEFT, 1.5)
    with pytest.raises(TypeError):
        invert_branch(p, "left", 0.3)


def test_iterate_identities():
    assert iterate(P11, 0.3, 0) == 0.3
    assert iterate(P11, 0.75, 1) == pytest.approx(0.3125)
    assert iterate(P11, P11.e0, 2) == 0.0
    with pytest.raises(ValueError):
        iterate(P11, 0.3, -1)


def test_iterate_records_visits():
    p = MapParams(0.5, 0.5)
    x, visits = iterate(p, 0.9, 5, record=True)
    orbit = [0.9]
    for _ in range(5):
        orbit.append(eval_map(p, orbit[-1]))
    assert x == orbit[-1]
    assert list(visits) == [t >= p.e0 for t in orbit]


@settings(max_examples=200, deadline=None)
@given(alphas, bs, unit)
def test_left_branch_round_trip(alpha, b, u):
    p = MapParams(alpha, b)
    x = u * p.e0 * (1 - 1e-9)
    assert abs(invert_branch(p, Branch.LEFT, eval_map(p, x)) - x) <= 1e-10


@settings(max_examples=200, deadline=None)
@given(alphas, bs, unit)
def test_right_branch_round_trip(alpha, b, u):
    p = MapParams(alpha, b)
    x = p.e0 + u * (1 - p.e0)
    if b == 1.0 and x == 1.0:
        return
    assert abs(invert_branch(p, Branch.RIGHT, eval_map(p, x)) - x) <= 1e-10


@settings(max_examples=200, deadline=None)
@given(alphas, bs, unit, unit)
def test_monotone_on_each_branch(alpha, b, u, v):
    p = MapParams(alpha, b)
    lo, hi = sorted((u, v))
    if hi - lo < 1e-9 or (b == 1.0 and hi == 1.0):
        return  # f(1) = 0 when b = 1 wraps twice
    if hi < p.e0 or lo >= p.e0:
        assert eval_map(p, lo) < eval_map(p, hi)


@settings(max_examples=200, deadline=None)
@given(alphas, bs, st.floats(1e-6, 1.0))
def test_repulsion_and_expansion(alpha, b, u):
    p = MapParams(alpha, b)
    x = u * p.e0 * (1 - 1e-9)
    fx = eval_map(p, x)
    assert fx >= x
    if b * x ** alpha > 1e-15:
        assert fx > x
        assert deriv(p, x) > 1.0
    assert deriv(p, 0.0) == 1.0


@settings(max_examples=100, deadline=None)
@given(alphas, bs, unit, st.floats(1e-14, 1e-2))
def test_offsets_round_trip(alpha, b, u, d):
    p = MapParams(alpha, b)
    base = u * 0.9
    step = step_offset(p, base, d)
    assert float(invert_offset(p, base, step)) == pytest.approx(d, rel=1e-12)


@pytest.mark.parametrize("base,d", [(0.3, 1e-12), (0.61, 1e-3), (0.0, 1e-5)])
def test_step_offset_extended_precision(base, d):
    p = MapParams(0.5, 0.5)
    mp.mp.dps = 50
    lift = lambda x: x * (1 + mp.mpf(p.b) * x ** mp.mpf(p.alpha))
    want = lift(mp.mpf(base) + mp.mpf(d)) - lift(mp.mpf(base))
    assert float(step_offset(p, base, d)) == pytest.approx(float(want), rel=1e-13)


def test_right_branch_near_unit_b():
    # 1 + b rounds to 2 in double for b = 1 - 2^-53; f(1) must still equal b
    p = MapParams(1.0, 1.0 - 2.0 ** -53)
    assert eval_map(p, 1.0) == p.b
    assert eval_map(p, p.e0) == 0.0
