import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afnlab.afn_map import MapParams, eval_map, iterate
from afnlab.inducing import (
    DepthUnreachable,
    LatticeDepthExceeded,
    build_lattice,
    build_schedule,
    certify_gibbs_markov,
    first_return_time,
    first_return_time_direct,
)

P11 = MapParams(1.0, 1.0)


@pytest.fixture(scope="module")
def lat11():
    return build_lattice(P11, 2000, 6)


@pytest.fixture(scope="module")
def sched11(lat11):
    return build_schedule(P11, lat11, 1000)


def test_first_lattice_point(lat11):
    e0 = (math.sqrt(5.0) - 1.0) / 2.0
    assert lat11.x[1] == pytest.approx((-1.0 + math.sqrt(1.0 + 4.0 * e0)) / 2.0, abs=1e-14)
    assert lat11.x[0] == lat11.e0


@pytest.mark.parametrize("fixture", ["lat11", "finite"])
def test_lattice_orderings(fixture, request):
    obj = request.getfixturevalue(fixture)
    lat = obj if fixture == "lat11" else obj.lattice
    assert np.all(np.diff(lat.x) < 0)
    assert np.all(np.diff(lat.e) > 0)
    # y_j is pinned at 1 until the first branch of the orbit of 1, where it meets e_1
    s1 = int(lat.sigma[1])
    assert np.all(lat.y[:s1] == 1.0)
    assert lat.y[s1] == pytest.approx(lat.e[1], abs=1e-15)
    assert np.all(np.diff(lat.y[s1 - 1 :]) < 0)
    assert np.array_equal(lat.tau_at_1, np.cumsum(lat.sigma))


def test_lattice_forward_relations(finite):
    fc = finite.lattice.forward_check()
    assert fc["x"] <= 1e-10
    assert fc["y"] <= 1e-10
    assert fc["e_extended"] <= 1e-30
    lam = finite.lattice.lam[1 : finite.lattice.depth_k + 1]
    ok = lam * np.finfo(float).eps <= 1e-8
    assert np.all(fc["e_double"][ok] <= 1e-8)


def test_e1_is_rightmost_preimage(lat11):
    # the first level point returns to e0 after sigma_1 steps, and points just
    # to its right stay off e0 (f^sigma_1 is increasing there)
    k1 = int(lat11.tau_at_1[1])
    assert abs(iterate(P11, lat11.e[1], k1) - lat11.e0) <= 1e-8
    assert iterate(P11, lat11.e[1] + 1e-6, k1) > lat11.e0


def test_lambda_matches_chain_rule_in_extended_precision(finite):
    lat = finite.lattice
    p = lat.params
    mp.mp.dps = 60
    for k in (1, 2, 3):
        z = lat.e_mp[k]
        prod = mp.mpf(1)
        for _ in range(int(lat.tau_at_1[k]) + 1):
            prod *= 1 + p.b * (1 + p.alpha) * z ** p.alpha
            z = z * (1 + p.b * z ** p.alpha)
            if z >= 1:
                z -= 1
        assert float(prod) == pytest.approx(lat.lam[k], rel=1e-8)


def test_tau_over_lambda_summable(finite):
    lat = finite.lattice
    q = lat.tau_at_1[1 : len(lat.lam)] / lat.lam[1:]
    assert np.all(np.diff(q[2:]) < 0)
    assert q[-1] < 1e-6


def test_lattice_decay_exponent():
    lat = build_lattice(MapParams(0.5, 1.0), 10000, 4)
    n = np.arange(100, 10001)
    slope = np.polyfit(np.log(n), np.log(lat.x[n]), 1)[0]
    assert abs(slope + 2.0) <= 0.05
    c = n ** 2.0 * lat.x[n]
    assert abs(c[-1] / c[len(c) // 2] - 1.0) < 0.01


def test_depth_unreachable():
    with pytest.raises(DepthUnreachable):
        build_lattice(P11, 100, 40)


def test_first_return_on_y_levels(finite):
    lat = finite.lattice
    j = np.arange(int(lat.sigma[1]) + 1, 200)
    mids = 0.5 * (lat.y[j] + lat.y[j - 1])
    assert np.array_equal(first_return_time(lat.params, lat, mids), j)
    # b = 0.5 maps Y below e0, so immediate returns need b = 1
    lat11 = build_lattice(P11, 50, 2)
    assert first_return_time(P11, lat11, 0.95) == 1


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 1.0))
def test_first_return_matches_iteration(u):
    lat = _LAT05
    y = lat.e0 + u * (1.0 - lat.e0)
    if eval_map(lat.params, y) < lat.x[-1]:
        return
    assert first_return_time(lat.params, lat, y) == first_return_time_direct(lat.params, y)


_LAT05 = build_lattice(MapParams(0.5, 0.5), 3000, 4)


def test_first_return_errors():
    lat = _LAT05
    with pytest.raises(ValueError):
        first_return_time(lat.params, lat, 0.1)
    with pytest.raises(LatticeDepthExceeded):
        first_return_time(lat.params, lat, lat.e0 + 1e-14)


def test_schedule_partition(sched11):
    s = sched11
    width_y = 1.0 - s.lattice.e0
    assert abs(s.width.sum() + s.uncovered - width_y) <= 1e-10
    order = np.argsort(s.left)
    assert np.all(s.left[order][1:] >= s.right[order][:-1] - 1e-15)


def test_schedule_levels_nest(finite):
    s = finite.schedule
    e = s.lattice.e
    k = s.level
    assert np.all(s.left >= e[k] - 1e-15)
    assert np.all(s.right <= e[k + 1] + 1e-15)
    assert np.all(s.phi <= s.phi_cap)


def test_schedule_tau_sequences(finite):
    s = finite.schedule
    for c in range(0, len(s), 97):
        seq = s.tau_seq(c)
        assert len(seq) == s.rho[c]
        assert seq[-1] == s.phi[c]
        assert all(a < b for a, b in zip(seq, seq[1:]))


def test_level_zero_is_first_return(finite):
    s = finite.schedule
    lat = s.lattice
    base = np.nonzero(s.level == 0)[0][:300]
    mids = 0.5 * (s.left[base] + s.right[base])
    assert np.array_equal(first_return_time(lat.params, lat, mids), s.phi[base])


def test_visits_match_tau_sequence(sched11):
    s = sched11
    for c in range(0, len(s), 211):
        y = 0.5 * (s.left[c] + s.right[c])
        if s.phi[c] > 40:
            continue
        _, visits = iterate(P11, y, int(s.phi[c]), record=True)
        assert tuple(np.nonzero(visits[1:])[0] + 1) == s.tau_seq(c)


def _circle(a, b):
    d = abs(a - b) % 1.0
    return min(d, 1.0 - d)


def test_onto_branches(sched11):
    s = sched11
    e0 = s.lattice.e0
    for c in np.nonzero(s.phi <= 25)[0]:
        ends = [iterate(P11, s.left[c], int(s.phi[c])), iterate(P11, s.right[c], int(s.phi[c]))]
        # one endpoint lands on e0, the other on 1 (= 0 on the circle)
        assert min(_circle(ends[0], e0), _circle(ends[1], e0)) <= 1e-8
        assert min(_circle(ends[0], 1.0), _circle(ends[1], 1.0)) <= 1e-8


def test_lebesgue_tail_exponent(finite):
    s = finite.schedule
    leb = np.bincount(s.phi, weights=s.width, minlength=s.phi_cap + 2)
    tail = np.cumsum(leb[::-1])[::-1] + s.uncovered
    n = np.arange(20, 501)
    slope = np.polyfit(np.log(n), np.log(tail[n + 1]), 1)[0]
    assert abs(-slope - 2.0) <= 0.2


def test_locate(sched11):
    s = sched11
    c = np.arange(0, len(s), 37)
    assert np.array_equal(s.locate(0.5 * (s.left[c] + s.right[c])), c)
    assert s.locate(np.array([1.0 - 1e-15]))[0] == -1


def test_schedule_requires_depth(lat11):
    with pytest.raises(LatticeDepthExceeded):
        build_schedule(P11, lat11, 5000)
    with pytest.raises(ValueError):
        build_schedule(MapParams(0.5, 0.5), lat11, 100)


def test_gibbs_markov_certificate(sched11):
    small = certify_gibbs_markov(P11, sched11, 40)
    big = certify_gibbs_markov(P11, sched11, 120, seed=1)
    assert np.isfinite(small.distortion_C)
    assert big.distortion_C <= 2.0 * small.distortion_C
    assert 0 < small.theta < 1
    assert small.min_image_measure == pytest.approx(1.0 - sched11.lattice.e0)
