import warnings

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from afnlab.afn_map import MapParams
from afnlab.cli import _map_grid_with_knots
from afnlab.ulam import (
    CoverageError,
    DensityVector,
    Grid,
    UlamOperator,
    assemble_first_return_operator,
    assemble_induced_operator,
    assemble_map_operator,
    duality_residual,
    induced_pieces,
    invariant_density,
    map_grid,
    map_pieces,
    pushup_measure,
    return_grid,
)

P05 = MapParams(0.5, 0.5)


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid(np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(ValueError):
        Grid(np.array([0.0]))
    g = Grid.uniform(0.2, 1.0, 8)
    assert g.domain == (0.2, 1.0)
    assert g.cells == 8
    assert np.allclose(g.widths, 0.1)


def test_grid_knots_and_locate():
    g = Grid.uniform(0.0, 1.0, 10).with_knots([0.33, 0.0, 1.5])
    assert 0.33 in g.breakpoints
    assert g.cells == 10
    assert g.locate(np.array([0.0, 0.329, 0.33, 1.0])).tolist() == [0, 2, 3, 9]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=8))
def test_cell_average_exact_for_polynomials(coef):
    g = Grid.uniform(-1.0, 2.0, 7)
    nodes = 4  # exact through degree 7
    avg = g.cell_average(lambda x: np.polyval(coef, x), nodes=nodes)
    anti = np.polyint(coef)
    exact = np.diff(np.polyval(anti, g.breakpoints)) / g.widths
    assert np.allclose(avg, exact, atol=1e-11)


def test_map_grid_refines():
    coarse, fine = map_grid(512).breakpoints, map_grid(1024).breakpoints
    assert np.array_equal(fine[::2], coarse)
    assert fine[1] < 1e-10


def test_doubling_map_control():
    # x -> 2x mod 1 preserves Lebesgue measure: the Ulam density is flat
    M = 64
    rows = np.repeat(np.arange(M), 2)
    cols = np.concatenate([[(2 * i) % M, (2 * i + 1) % M] for i in range(M)])
    P = sp.csr_matrix((np.full(2 * M, 0.5), (rows, cols)), shape=(M, M))
    op = UlamOperator(grid=Grid.uniform(0.0, 1.0, M), matrix=P, kind="control")
    h = invariant_density(op)
    assert np.allclose(h.weights, 1.0, atol=1e-12)
    lead, second, gap = op.spectral_gap()
    assert abs(lead - 1.0) < 1e-12
    assert gap > 0.99


@pytest.fixture(scope="module")
def map_ops():
    out = {}
    for cells in (4096, 8192):
        op = assemble_map_operator(P05, _map_grid_with_knots(P05, cells))
        out[cells] = (op, invariant_density(op))
    return out


def test_map_operator_stochastic(map_ops):
    op, h = map_ops[4096]
    assert np.allclose(op.row_sums(), 1.0, atol=1e-12)
    assert op.kind == "MapF"
    m = h.cell_mass
    assert np.isclose(op.push(m).sum(), 1.0, atol=1e-12)
    assert np.allclose(op.push(m), m, atol=1e-12)
    with pytest.raises(ValueError):
        assemble_map_operator(P05, Grid.uniform(0.0, 0.9, 10))


def test_map_density_grid_refinement(map_ops):
    h4, h8 = map_ops[4096][1], map_ops[8192][1]
    # both densities as masses on the coarse grid
    coarse = h4.grid.breakpoints
    m8 = np.diff(h8.cumulative(coarse))
    assert np.abs(m8 - h4.cell_mass).sum() < 1e-2


def test_map_density_shape(map_ops):
    h = map_ops[8192][1]
    # the density blows up like x^-alpha at the neutral point
    x = np.array([1e-6, 1e-4])
    ratio = h(x[0]) / h(x[1])
    assert ratio == pytest.approx(100.0 ** 0.5, rel=0.15)


def test_map_duality_shrinks(map_ops):
    v = lambda x: np.cos(2.0 * x) + x
    w = lambda x: np.sin(5.0 * x)
    pcs = map_pieces(P05)
    r = [duality_residual(assemble_map_operator(P05, _map_grid_with_knots(P05, c)), v, w, pcs)
         for c in (1024, 2048)]
    assert r[0] >= 1.5 * r[1]
    assert r[1] < 1e-6


def test_induced_operator(finite):
    op, h = finite.induced
    assert op.kind == "InducedF"
    assert np.allclose(op.row_sums(), 1.0, atol=1e-12)
    # uncovered share as a fraction of the total Lebesgue mass of Y
    frac = float(op.remainder @ op.grid.widths) / (1.0 - finite.params.e0)
    assert frac < 1e-3
    assert h.weights.min() > 0
    assert h.weights.max() / h.weights.min() < 10.0
    lead, second, gap = op.spectral_gap()
    assert abs(lead - 1.0) < 1e-8 and gap > 0


def test_induced_density_refines(finite):
    h1 = finite.mu0
    h2 = finite._induced(2048)[1]
    m2 = np.diff(h2.cumulative(h1.grid.breakpoints))
    assert np.abs(m2 - h1.cell_mass).sum() < 5e-3


def test_induced_duality(finite):
    rows = finite.check_spectra()
    assert rows[2]["coarse"] < 1e-6


def test_induced_coverage_error(small_infinite):
    s = small_infinite.schedule
    with pytest.raises(CoverageError):
        assemble_induced_operator(s, small_infinite.return_grid(), max_uncovered=1e-9)


def test_first_return_operator(finite):
    op, h = finite.first_return
    assert op.kind == "FirstReturn"
    assert np.allclose(op.row_sums(), 1.0, atol=1e-12)
    assert np.allclose(op.push(h.cell_mass), h.cell_mass, atol=1e-12)
    with pytest.raises(ValueError):
        assemble_first_return_operator(finite.lattice, finite.return_grid(), finite.lattice.depth_n + 1)


def test_return_grid_knots(finite):
    g = return_grid(finite.lattice, 256)
    assert g.domain[0] == finite.lattice.e0
    for p in finite.lattice.orbit_of_1[1:4]:
        assert np.min(np.abs(g.breakpoints - p)) == 0.0


def test_density_vector_masses(finite):
    h = finite.mu0
    a, b = h.grid.breakpoints[3] + 1e-5, h.grid.breakpoints[40] - 1e-6
    assert h.mass(a, b) == pytest.approx(h.cumulative(b) - h.cumulative(a))
    lo, hi = np.array([0.0, 1e-9]), np.array([1e-12, 0.2])
    direct = h.mass(a + lo, a + hi)
    assert np.allclose(h.mass_offsets(a, lo, hi), direct, rtol=1e-3, atol=1e-16)
    assert h.cumulative(1.0) == pytest.approx(1.0)


def test_exports(tmp_path, finite):
    h = finite.mu0
    h.export_csv(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "cell_left,cell_right,weight"
    assert len(lines) == h.grid.cells + 1
    float(lines[1].split(",")[2])
    op = assemble_map_operator(P05, map_grid(32))
    op.export_coo(tmp_path / "p.csv")
    body = (tmp_path / "p.csv").read_text().splitlines()
    assert body[0] == "row,col,value"
    assert len(body) == op.matrix.nnz + 1


def test_pushup_finite_mass(finite):
    lm = pushup_measure(finite.schedule, finite.mu0, 1400)
    assert lm.totals[0] == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.diff(lm.totals) <= 1e-15)
    assert lm.partial_sums[-1] == pytest.approx(finite.means.phi_bar, rel=0.02)


def test_pushup_infinite_growth(infinite):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lm = pushup_measure(infinite.schedule, infinite.mu0, 170000)
    J = np.arange(1000, 170001)
    slope = np.polyfit(np.log(J), np.log(lm.partial_sums[J]), 1)[0]
    assert abs(slope - 1.0 / 3.0) <= 0.05


def test_manual_density_normalisation():
    g = Grid.uniform(0.0, 2.0, 4)
    d = DensityVector(grid=g, weights=np.array([0.5, 0.5, 0.25, 0.25]))
    assert d.cell_mass.sum() == pytest.approx(0.75)
    assert d(np.array([0.1, 1.9])).tolist() == [0.5, 0.25]
