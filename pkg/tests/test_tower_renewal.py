import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afnlab.tower_renewal import (
    QuadratureError,
    TowerState,
    base_renewal,
    build_tower,
    check_decomposition,
    check_renewal,
    coefficient_extract,
    export_residuals,
    operator_family,
    scalar_renewal,
    tower_step,
)

from conftest import make_experiment


@pytest.fixture(scope="module")
def coarse():
    """alpha = 0.5 on a 128-cell base grid."""
    return make_experiment({"alpha": 0.5, "b": 0.5, "grid_cells": 128, "j_max": 40})


@pytest.fixture(scope="module")
def family(coarse):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return operator_family(coarse.tower, 30)


def test_height_zero_tower(coarse):
    op, h = coarse.induced
    tw = build_tower(coarse.schedule, h, 0, bank=op.bank)
    assert tw.level_totals.shape == (1,)
    assert tw.level_totals[0] == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        build_tower(coarse.schedule, h, -1, bank=op.bank)


def test_truncated_mass_approaches_mean(coarse):
    op, h = coarse.induced
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tw = build_tower(coarse.schedule, h, 1400, bank=op.bank)
    assert tw.truncated_mass <= coarse.means.phi_bar * (1 + 1e-9)
    assert tw.truncated_mass == pytest.approx(coarse.means.phi_bar, rel=0.02)


def test_truncation_warning(coarse):
    op, h = coarse.induced
    with pytest.warns(UserWarning, match="truncation height"):
        build_tower(coarse.schedule, h, 5, bank=op.bank)


def test_levels_nested(coarse):
    tw = coarse.tower
    for j in range(0, 30, 3):
        assert set(tw.level(j + 1)) <= set(tw.level(j))
    assert len(tw.level(0)) == tw.n_sub


def test_return_operators_sparsity_and_sum(coarse, family):
    tw = coarse.tower
    for n in (1, 2, 5, 17):
        rows = set(np.nonzero(np.asarray(abs(family.R[n]).sum(axis=1)).ravel())[0])
        assert rows <= set(tw.row[tw.phi == n])
    bank = tw.bank
    total = np.zeros((tw.cells, tw.cells))
    for n in np.unique(bank.phi):
        total += bank.weight_matrix(bank.phi == n) @ bank.table
    assert np.abs(total - coarse.induced[0].raw).max() <= 1e-10


def test_renewal_identity(family):
    assert np.array_equal(family.T[0], np.eye(family.tower.cells))
    res = check_renewal(family)
    assert res.max() <= 1e-8


def test_base_renewal_matches_family(coarse, family):
    rng = np.random.default_rng(3)
    u = rng.random(coarse.tower.cells)
    b = np.zeros((31, coarse.tower.cells))
    b[0] = u
    s = base_renewal(coarse.tower, b, 30)
    for n in (0, 1, 7, 30):
        assert np.allclose(s[n], u @ family.T[n], atol=1e-13)
    with pytest.raises(ValueError):
        base_renewal(coarse.tower, b[:5], 30)


def test_decomposition_trivial_cases(coarse, family):
    tw = coarse.tower
    zero = TowerState.zeros(tw, 35)
    res, lost = check_decomposition(tw, family, zero, 10)
    assert res.max() == 0.0
    states = coarse.decomposition_states(35)
    for name in ("base", "whole"):
        res, lost = check_decomposition(tw, family, states[name], 20)
        assert res[0] <= 1e-10
        assert np.all(res - lost <= 1e-8)
    with pytest.raises(ValueError):
        check_decomposition(tw, family, zero, 31)


def test_tower_step_conserves_mass(coarse):
    tw = coarse.tower
    st_ = coarse.decomposition_states(35)["whole"]
    total = st_.norm1()
    # base mass on the uncovered part of a grid cell has no branch to follow
    uncovered = 1.0 - tw.bank.covered_fraction()
    lost = 0.0
    for _ in range(12):
        lost += float(st_.base @ uncovered)
        st_, dl = tower_step(tw, st_)
        lost += dl
    assert st_.norm1() + lost == pytest.approx(total, rel=1e-12)


def test_scalar_renewal_deterministic_return():
    r = scalar_renewal(np.r_[0.0, 1.0], 50)
    assert np.all(r.u == 1.0)
    assert r.mean == 1.0


def test_scalar_renewal_geometric():
    r = scalar_renewal(0.5 ** np.arange(1001), 1000)
    assert r.u[0] == 1.0
    assert r.u[1:4].tolist() == [0.5, 0.5, 0.5]
    assert np.abs(r.u[1:] - 0.5).max() <= 1e-12


def test_scalar_renewal_rejects_bad_input():
    with pytest.raises(ValueError):
        scalar_renewal(np.r_[0.0, 0.7, 0.7])
    with pytest.raises(ValueError):
        scalar_renewal(np.r_[0.0, -0.1, 0.5])


def test_kac_limit():
    k = np.arange(1, 100001, dtype=float)
    p = k ** -3.0 / np.sum(k ** -3.0)
    m = float(np.dot(k, p))
    r = scalar_renewal(np.r_[0.0, p[:1000]], 1000)
    assert r.u[1000] == pytest.approx(1.0 / m, rel=0.01)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=6), st.integers(1, 40))
def test_scalar_renewal_against_generating_function(weights, n):
    w = np.asarray(weights)
    if w.sum() == 0:
        return
    p = np.r_[0.0, 0.9 * w / w.sum()]  # defective, so 1/(1 - P) is analytic on the unit disc
    r = scalar_renewal(p, n)
    gen = lambda z: 1.0 / (1.0 - np.polyval(p[::-1], z))
    assert coefficient_extract(gen, n) == pytest.approx(r.u[n], abs=1e-10)


def test_coefficient_families():
    assert coefficient_extract(lambda z: 1.0 / (1.0 - z), 10) == pytest.approx(1.0, abs=1e-8)
    k = np.arange(1, 4001, dtype=float)
    zeta2 = lambda z: np.polyval(np.r_[1.0 / k[::-1] ** 2, 0.0], z)
    assert coefficient_extract(zeta2, 25) == pytest.approx(1.0 / 625.0, abs=1e-8)
    for n in range(0, 12):
        assert coefficient_extract(lambda z: z ** 5, n) == pytest.approx(float(n == 5), abs=1e-10)


def test_coefficient_errors():
    with pytest.raises(ValueError):
        coefficient_extract(lambda z: z, -1)
    rng = np.random.default_rng(0)
    with pytest.raises(QuadratureError):
        coefficient_extract(lambda z: rng.random(len(z)), 4)


def test_export_residuals(tmp_path):
    export_residuals(tmp_path / "r.csv", np.array([0.0, 1e-17]), np.array([0.0, 0.5]))
    assert (tmp_path / "r.csv").read_text() == "n,residual,truncation_budget\n0,0.0,0.0\n1,1e-17,0.5\n"
