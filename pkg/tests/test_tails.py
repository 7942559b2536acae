import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afnlab.tails import (
    CoverageError,
    InducedMeasure,
    TailKind,
    TailSeries,
    _zeta_tail,
    check_H1,
    compare_returns,
    corollary_bound,
    fit_tail,
    mean_data,
    tail_phi,
    tail_tau,
)
from afnlab.ulam import assemble_map_operator, invariant_density


def synthetic(c, beta, gamma, a, N=2000):
    n = np.arange(N + 1, dtype=float)
    n[0] = 1.0
    v = c * n ** -beta * (1.0 + a * n ** -gamma)
    return TailSeries(values=v, kind=TailKind.PHI0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.5, 50.0), st.floats(0.55, 2.5), st.floats(0.5, 1.5), st.floats(-0.5, 0.5))
def test_fit_recovers_synthetic_tail(c, beta, gamma, a):
    fit = fit_tail(synthetic(c, beta, gamma, a), (20, 500), beta_ref=beta)
    # a two-term power law is inside the stage-2 model, so c is exact
    assert fit.c_hat == pytest.approx(c, rel=1e-6)
    assert abs(fit.beta_hat - beta) <= 1.2 * abs(a) * 20.0 ** -gamma + 1e-9
    if abs(a) > 1e-3:
        assert fit.residual_exponent == pytest.approx(beta + gamma, abs=2e-3)


def test_fit_pure_power_law():
    fit = fit_tail(synthetic(3.0, 2.0, 1.0, 0.0), (20, 500))
    assert fit.beta_hat == pytest.approx(2.0, abs=1e-12)
    assert fit.c_loglog == pytest.approx(3.0, rel=1e-10)
    assert json.loads(fit.to_json())["window"] == [20, 500]


@pytest.mark.parametrize("window", [(0, 100), (20, 3000), (20, 22)])
def test_fit_rejects_bad_windows(window):
    with pytest.raises(ValueError):
        fit_tail(synthetic(1.0, 2.0, 1.0, 0.1), window)


def test_fit_rejects_nonpositive_values():
    s = TailSeries(values=np.r_[np.ones(50), np.zeros(60)], kind=TailKind.PHI0)
    with pytest.raises(ValueError):
        fit_tail(s, (20, 100))


@pytest.mark.parametrize("beta,N", [(2.0, 100), (1.5, 1000), (3.0, 20)])
def test_zeta_tail_against_direct_sum(beta, N):
    m = np.arange(N + 1, 4_000_001, dtype=float)
    direct = np.sum((N / m) ** beta) + N ** beta * 4_000_000 ** (1 - beta) / (beta - 1)
    assert _zeta_tail(1.0, N, beta) == pytest.approx(direct, rel=1e-8)
    assert _zeta_tail(1.0, N, 0.9) == np.inf


def test_series_validity_and_export(tmp_path):
    assert synthetic(1.0, 2.0, 1.0, 0.0, N=10).is_valid()
    assert not TailSeries(values=np.r_[1.0, -0.5], kind=TailKind.PHI0).is_valid()
    good = TailSeries(values=np.r_[1.0, 0.5, 0.25, 0.25], kind=TailKind.TAUTAU)
    assert good.is_valid()
    assert not TailSeries(values=np.r_[1.0, 0.5, 0.6], kind=TailKind.TAUTAU).is_valid()
    path = tmp_path / "t.csv"
    good.export_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "n,value,lower_bracket,upper_bracket"
    assert lines[2] == "1,0.5,0.5,0.5"


def test_tail_phi_shape(finite):
    t = finite.tail_phi
    assert t.values[0] == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.diff(t.values) <= 1e-15)
    assert np.all(t.lower <= t.upper)
    with pytest.raises(CoverageError):
        tail_phi(finite.schedule, finite.mu0, finite.schedule.phi_cap + 1)


def test_tail_tau_shape(finite):
    t = finite.tail_tau
    lat = finite.lattice
    assert t.is_valid()
    # b = 0.5 sends Y below e0, so no point returns before sigma_1
    assert np.allclose(t.values[: lat.sigma[1]], 1.0, atol=1e-12, rtol=0)
    with pytest.raises(CoverageError):
        tail_tau(finite.params, lat, finite.mu_tau, lat.depth_n + 1)


def test_induced_measure_bookkeeping(finite):
    meas = InducedMeasure(finite.schedule, finite.mu0)
    assert meas.total == pytest.approx(1.0, abs=1e-12)
    assert meas.mass_above[0] == pytest.approx(meas.total)
    with pytest.raises(CoverageError):
        meas.level_window(0, 0, finite.schedule.phi_cap + 10)


def test_kac_against_whole_interval_density(finite):
    # tau_bar = 1 / mu(Y) for the invariant probability mu on [0, 1]
    g = finite.params
    from afnlab.cli import _map_grid_with_knots

    op = assemble_map_operator(g, _map_grid_with_knots(g, 8192))
    h = invariant_density(op)
    mu_y = float(h.mass(g.e0, 1.0))
    assert finite.means.tau_bar == pytest.approx(1.0 / mu_y, rel=0.01)


def test_means_identity_and_brackets(finite):
    md = finite.means
    assert md.identity_gap < 1e-4
    assert md.phi_bar_bracket[0] <= md.phi_bar <= md.phi_bar_bracket[1]
    assert md.rho_bar_bracket[0] <= md.rho_bar_bracket[1]
    assert md.rho_bar >= 1.0


def test_means_infinite_raise(small_infinite):
    e = small_infinite
    with pytest.raises(ValueError):
        mean_data(e.schedule, e.mu0, e.lattice, e.mu_tau)


def test_h1_ratio_at_least_one(finite):
    rep = check_H1(finite.schedule, finite.mu0, 1000)
    assert np.nanmin(rep.ratios) >= 1.0
    assert rep.exhausted_from is None
    assert rep.sup == pytest.approx(np.nanmax(rep.ratios))
    with pytest.raises(CoverageError):
        check_H1(finite.schedule, finite.mu0, finite.schedule.phi_cap + 1)


def test_return_comparison_at_zero(finite):
    cmp = compare_returns(finite.schedule, finite.lattice, finite.mu0, finite.mu_tau, None, 30)
    assert cmp.lhs[0] == pytest.approx(1.0 / cmp.rho_bar - 1.0, abs=1e-12)
    assert np.all(cmp.truncation >= 0)


def test_leading_term_bound_needs_first_return_density(finite):
    md = finite.means
    with pytest.raises(ValueError):
        corollary_bound(finite.schedule, finite.mu0, md.phi_bar, md.tau_bar, 50)
    rec = corollary_bound(finite.schedule, finite.mu0, md.phi_bar, md.tau_bar, 50,
                          mu_tau=finite.mu_tau, lattice=finite.lattice)
    assert np.all(np.diff(rec.rhs_bound) <= 1e-18)
