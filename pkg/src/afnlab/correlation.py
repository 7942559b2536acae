"""Correlation functions of f, weighted observable norms and decay predictions.

Finite case (alpha < 1): rho_n(v, w) = int v . w o f^n dmu from the Ulam matrix
of f, cross-checked by a seeded Monte Carlo time average.  Infinite case
(1 < alpha < 2): for observables supported on Y the correlation is carried by
the first-return tower over Y, whose base renewal sequence s_n = sum_j s_{n-j} R_j
is iterated in the time domain.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .afn_map import Branch, MapParams, eval_map, invert_branch, invert_offset
from .inducing import OrbitLattice
from .ulam import DensityVector, Grid, UlamOperator, _overlaps

__all__ = [
    "Support",
    "Observable",
    "named_observable",
    "NormConfig",
    "NormReport",
    "TauStarField",
    "RejectedObservable",
    "weighted_norms",
    "CorrelationSeries",
    "correlation_operator",
    "MonteCarloSeries",
    "correlation_montecarlo",
    "DecayPrediction",
    "predict_finite",
    "predict_infinite",
    "q_formula",
    "error_case",
    "ReturnRenewal",
    "build_return_renewal",
    "InfiniteCorrelation",
    "correlation_infinite",
    "loglog_slope",
    "export_results",
]


class RejectedObservable(ValueError):
    """Observable failed the weighted-norm test."""


# observables ---------------------------------------------------------------------

class Support(enum.Enum):
    WHOLE_SPACE = "whole_space"
    BASE_ONLY = "base_only"


@dataclass(frozen=True, eq=False)
class Observable:
    """Vectorised function on [0, 1] with an optional support promise.

    ``grid_trace`` caches cell averages for one grid; :meth:`trace` recomputes
    them for any other grid.
    """

    evaluator: Callable
    support_hint: Support = Support.WHOLE_SPACE
    name: str = "v"
    grid_trace: np.ndarray | None = None

    def __call__(self, x):
        return np.asarray(self.evaluator(np.asarray(x, dtype=float)), dtype=float)

    def trace(self, grid: Grid, nodes: int = 6) -> np.ndarray:
        if self.grid_trace is not None and len(self.grid_trace) == grid.cells:
            return np.asarray(self.grid_trace, dtype=float)
        return grid.cell_average(self.__call__, nodes=nodes)

    def with_trace(self, grid: Grid, nodes: int = 6) -> "Observable":
        return Observable(self.evaluator, self.support_hint, self.name, self.trace(grid, nodes))

    def check_support(self, params: MapParams, samples: int = 4096) -> bool:
        """For BASE_ONLY observables, test that v vanishes on [0, e0)."""
        if self.support_hint is Support.WHOLE_SPACE:
            return True
        e0 = params.e0
        x = np.concatenate([e0 * np.arange(samples) / samples, e0 * np.logspace(-12, 0, 64, endpoint=False)])
        return bool(np.all(self(x) == 0.0))


def named_observable(name: str, params: MapParams) -> Observable:
    """Observables by name.

    ``one``, ``indicator_Y`` (1 on Y), ``bump_Y`` ((x - e0)(1 - x) on Y),
    ``ramp_Y`` ((x - e0)_+) and ``power:q`` (x^q).
    """
    e0 = params.e0
    if name == "one":
        return Observable(lambda x: np.ones_like(x), Support.WHOLE_SPACE, name)
    if name == "indicator_Y":
        return Observable(lambda x: (x >= e0).astype(float), Support.BASE_ONLY, name)
    if name == "bump_Y":
        return Observable(lambda x: np.where(x >= e0, (x - e0) * (1.0 - x), 0.0), Support.BASE_ONLY, name)
    if name == "ramp_Y":
        return Observable(lambda x: np.clip(x - e0, 0.0, None), Support.BASE_ONLY, name)
    if name.startswith("power:"):
        q = float(name.split(":", 1)[1])
        if not q > 0:
            raise ValueError("power observable needs q > 0")
        return Observable(lambda x: np.power(x, q), Support.WHOLE_SPACE, name)
    raise ValueError(f"unknown observable {name!r}")


# weighted norms --------------------------------------------------------------------

@dataclass(frozen=True)
class NormConfig:
    epsilon: float = 0.1
    theta: float = 0.5
    tau_star_cap: int = 10 ** 4

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie in (0, 1)")
        if self.tau_star_cap < 1:
            raise ValueError("tau_star_cap must be positive")


@dataclass(frozen=True, eq=False)
class TauStarField:
    """tau*(x) = 1 + min{i >= 0 : f^i(x) in Y}, read off the lattice.

    On [x_n, x_{n-1}) the hitting time is n, so tau* = n + 1; points left of
    the deepest lattice point get the cap.
    """

    lattice: OrbitLattice
    cap: int

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        # number of lattice points x_1.. strictly above x, plus one when x < e0
        neg = -self.lattice.x
        n = np.searchsorted(neg, -x, side="left")
        return np.minimum(1 + n, self.cap).astype(np.int64)

    def on_grid(self, grid: Grid) -> np.ndarray:
        """Per-cell supremum, attained at the left endpoint."""
        return self(grid.breakpoints[:-1])

    @property
    def resolved_from(self) -> float:
        """Points at or above this value have an uncapped tau*."""
        N = min(self.lattice.depth_n, self.cap - 1)
        return float(self.lattice.x[N])


@dataclass(frozen=True)
class NormReport:
    sup_star: float
    lip_star: float
    sup_reformulated: float
    sup_half_depth: float
    depth: int
    bounded: bool


def _partition_index(lattice: OrbitLattice, x):
    """Elements of the hitting partition: lattice intervals left of e0 (negative
    labels) and first-return cylinders [y_j, y_{j-1}) of Y (positive labels)."""
    x = np.asarray(x, dtype=float)
    n = np.searchsorted(-lattice.x, -x, side="left")
    yo = lattice.y_offset
    j = np.searchsorted(-(lattice.e0 + yo), -x, side="left")
    return np.where(x < lattice.e0, -n, j)


def weighted_norms(v: Observable, cfg: NormConfig, lattice: OrbitLattice, per_interval: int = 6,
                   growth_tol: float = 1.05) -> NormReport:
    """Sampled estimates of sup |v| tau*^{1+eps} and of the weighted Lipschitz seminorm.

    Samples sit at the endpoints and interior points of every lattice
    interval [x_n, x_{n-1}), n <= N, and on a uniform net of Y.  The sup is a
    lower bracket; it is recomputed at depth N/2 and the observable is
    declared unbounded when the sup grows by more than ``growth_tol``.

    The seminorm uses pairs of neighbouring samples inside one partition
    element, separation times from joint forward iteration (capped at 50),
    metric theta^s and weight tau*(a)^{1+eps} of the element.
    """
    params = lattice.params
    eps = cfg.epsilon
    N = min(lattice.depth_n, cfg.tau_star_cap - 1)
    field_ = TauStarField(lattice, cfg.tau_star_cap)
    t = np.linspace(0.0, 1.0, per_interval, endpoint=False)
    lo = lattice.x[1 : N + 1]
    hi = lattice.x[:N]
    left = (lo[:, None] + (hi - lo)[:, None] * t[None, :]).ravel()
    ynet = lattice.e0 + (1.0 - lattice.e0) * np.linspace(0.0, 1.0, 64 * per_interval)
    x = np.concatenate([left, ynet])
    vals = np.abs(v(x))
    ts = field_(x).astype(float)
    weighted = vals * ts ** (1.0 + eps)
    sup_star = float(weighted.max())
    half = x >= lattice.x[max(N // 2, 1)]
    sup_half = float(weighted[half].max())
    with np.errstate(divide="ignore"):
        ref = np.where(x > 0, vals * np.power(np.where(x > 0, x, 1.0), -(1.0 + eps) / params.beta), 0.0)
    sup_ref = float(ref.max())

    # separation-time quotients for neighbouring samples in one element
    a, b_ = x[:-1], x[1:]
    same = _partition_index(lattice, a) == _partition_index(lattice, b_)
    a, b_ = a[same], b_[same]
    s = np.zeros(len(a), dtype=np.int64)
    alive = np.ones(len(a), bool)
    pa, pb = a.copy(), b_.copy()
    for step in range(1, 51):
        pa = np.asarray(eval_map(params, pa))
        pb = np.asarray(eval_map(params, pb))
        sep = _partition_index(lattice, pa) != _partition_index(lattice, pb)
        newly = alive & sep
        s[newly] = step
        alive &= ~sep
        if not alive.any():
            break
    s[alive] = 50
    dv = np.abs(v(a) - v(b_))
    w = field_(a).astype(float) ** (1.0 + eps)
    quot = dv * w / cfg.theta ** s
    lip_star = float(quot.max()) if len(quot) else 0.0
    bounded = sup_star <= growth_tol * max(sup_half, 1e-300) or sup_star == 0.0
    return NormReport(sup_star=sup_star, lip_star=lip_star, sup_reformulated=sup_ref,
                      sup_half_depth=sup_half, depth=int(N), bounded=bool(bounded))


# operator route (finite case) -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CorrelationSeries:
    """rho_n = int v . w o f^n dmu for n = 0..n_max and the two means."""

    rho: np.ndarray
    mean_v: float
    mean_w: float

    @property
    def n(self) -> np.ndarray:
        return np.arange(len(self.rho))

    @property
    def centered(self) -> np.ndarray:
        return self.rho - self.mean_v * self.mean_w


def correlation_operator(op: UlamOperator, v: Observable, w: Observable | list,
                         mu_density: DensityVector, n_max: int):
    """Correlations from the Ulam matrix: push v mu forward, pair with cell averages of w.

    ``w`` may be a list; then one series per entry is returned, all from the
    same iteration.
    """
    grid = op.grid
    if mu_density.grid is not grid and not np.array_equal(mu_density.grid.breakpoints, grid.breakpoints):
        raise ValueError("density and operator use different grids")
    ws = list(w) if isinstance(w, (list, tuple)) else [w]
    pi = mu_density.cell_mass / mu_density.cell_mass.sum()
    vt = v.trace(grid)
    W = np.column_stack([u.trace(grid) for u in ws])
    m = vt * pi
    out = np.empty((n_max + 1, len(ws)))
    out[0] = m @ W
    for n in range(1, n_max + 1):
        m = op.push(m)
        out[n] = m @ W
    mv = float(vt @ pi)
    mws = pi @ W
    series = [CorrelationSeries(out[:, i].copy(), mv, float(mws[i])) for i in range(len(ws))]
    return series if isinstance(w, (list, tuple)) else series[0]


# Monte Carlo route ------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MonteCarloSeries:
    lags: np.ndarray
    rho: np.ndarray
    rho_stderr: np.ndarray
    centered: np.ndarray
    centered_stderr: np.ndarray
    chains: int
    samples_per_chain: int


def _fast_step(x, b, p, e0):
    y = x + b * x ** p
    y = np.where(x >= e0, y - 1.0, y)
    y = np.where(y >= 1.0, y - 1.0, y)
    return np.abs(y)


def correlation_montecarlo(params: MapParams, v: Observable, w: Observable, n_max: int,
                           samples: int = 50_000, burn_in: int = 10_000, seed: int = 0,
                           chains: int = 256, block: int = 4096) -> MonteCarloSeries:
    """Time averages (1/T) sum_t v(x_t) w(x_{t+n}) over independent chains.

    Each chain draws its start from its own stream (spawned from ``seed``),
    discards ``burn_in`` steps and records ``samples`` products per lag.
    Lagged sums are accumulated block by block with FFT cross-correlation.
    Standard errors are the spread across chains.
    """
    if params.alpha >= 1:
        raise ValueError("Monte Carlo estimator needs a finite invariant measure (alpha < 1)")
    if chains < 2:
        raise ValueError("need at least two chains for a standard error")
    streams = np.random.SeedSequence(seed).spawn(chains)
    x = np.array([np.random.default_rng(s).uniform(0.0, 1.0) for s in streams])
    b, p, e0 = params.b, 1.0 + params.alpha, params.e0
    for _ in range(burn_in):
        x = _fast_step(x, b, p, e0)
    T = int(samples)
    total = T + n_max
    L = n_max + 1
    acc = np.zeros((chains, L))
    sum_v = np.zeros(chains)
    sum_w = np.zeros(chains)
    # w values of the trajectory, produced ahead of the v window by n_max
    wbuf = np.empty((0, chains))
    vbuf = np.empty((0, chains))
    produced = 0
    done = 0
    while done < T:
        need = min(block, T - done)
        while produced < done + need + n_max and produced < total:
            k = min(block, total - produced)
            xs = np.empty((k, chains))
            for i in range(k):
                xs[i] = x
                x = _fast_step(x, b, p, e0)
            vbuf = np.concatenate([vbuf, v(xs)])
            wbuf = np.concatenate([wbuf, w(xs)])
            produced += k
        vv = vbuf[:need]
        ww = wbuf[: need + n_max]
        nfft = 1 << int(math.ceil(math.log2(need + n_max + L)))
        fv = np.fft.rfft(vv, nfft, axis=0)
        fw = np.fft.rfft(ww, nfft, axis=0)
        cc = np.fft.irfft(np.conj(fv) * fw, nfft, axis=0)[:L]
        acc += cc.T
        sum_v += vv.sum(axis=0)
        sum_w += ww[:need].sum(axis=0)
        vbuf = vbuf[need:]
        wbuf = wbuf[need:]
        done += need
    r = acc / T
    mv = sum_v / T
    mw = sum_w / T
    cen = r - (mv * mw)[:, None]
    sq = math.sqrt(chains)
    return MonteCarloSeries(
        lags=np.arange(L),
        rho=r.mean(axis=0),
        rho_stderr=r.std(axis=0, ddof=1) / sq,
        centered=cen.mean(axis=0),
        centered_stderr=cen.std(axis=0, ddof=1) / sq,
        chains=int(chains),
        samples_per_chain=T,
    )


# predictions ---------------------------------------------------------------------------

def error_case(beta: float) -> tuple:
    """(exponent, label) of the error term in the finite-measure expansion."""
    if beta <= 1:
        raise ValueError("finite-measure error table needs beta > 1")
    if math.isclose(beta, 2.0, rel_tol=0, abs_tol=1e-12):
        return 2.0, "n^-2 log n"
    if beta > 2:
        return float(beta), "n^-beta"
    return float(2 * beta - 2), "n^-(2beta-2)"


def q_formula(beta) -> int:
    """q = max{j >= 0 : 2(j+1) beta > 2j + 1}, evaluated in exact arithmetic.

    The condition reads j (2 - 2 beta) < 2 beta - 1, so q is the largest
    integer strictly below (2 beta - 1) / (2 - 2 beta).  Defined for
    1/2 < beta < 1; floats are taken at their exact binary value.
    """
    b = beta if isinstance(beta, Fraction) else Fraction(beta)
    if not (Fraction(1, 2) < b < 1):
        raise ValueError("q is defined for 1/2 < beta < 1")
    bound = (2 * b - 1) / (2 - 2 * b)
    return int(math.ceil(bound)) - 1


@dataclass(frozen=True, eq=False)
class DecayPrediction:
    mode: str
    n: np.ndarray
    leading: np.ndarray
    error_exponent: float
    error_label: str
    q: int | None = None
    d0: float | None = None
    higher_terms: tuple = ()
    lower: np.ndarray = None
    upper: np.ndarray = None


def _tail_sums(values: np.ndarray, beta: float) -> tuple:
    """S_n = sum_{j > n} values[j] for n = 0..N-1, plus the power-law extrapolation past N."""
    from scipy.special import zeta

    N = len(values) - 1
    rev = np.cumsum(values[::-1])[::-1]
    inner = rev[1:] - 0.0  # sum_{j >= n+1} up to N
    ext = values[N] * N ** beta * zeta(beta, N + 1) if beta > 1 else np.inf
    return inner, float(ext)


def predict_finite(tails_phi, phi_bar: float, beta: float, v_int: float, w_int: float,
                   norms: tuple | None = None) -> DecayPrediction:
    """Leading term (1/phi_bar) sum_{j>n} mu_0(phi > j) int v int w, n = 0..N-1.

    The sum over j > N is extrapolated as a power tail and is the upper
    bracket; the lower bracket stops at N.  ``norms`` takes the
    :class:`NormReport` of v and w; an unbounded one rejects the pair.
    """
    if norms is not None:
        for rep in norms:
            if rep is not None and not rep.bounded:
                raise RejectedObservable("observable has an unbounded weighted norm")
    vals = np.asarray(tails_phi.values, dtype=float)
    lo_vals = np.asarray(tails_phi.lower, dtype=float)
    inner, ext = _tail_sums(vals, beta)
    inner_lo, _ = _tail_sums(lo_vals, beta)
    k = v_int * w_int / phi_bar
    lead = (inner + ext) * k
    lower = inner_lo * k
    upper = lead
    expo, label = error_case(beta)
    n = np.arange(len(inner))
    return DecayPrediction("Finite", n, lead, expo, label, lower=np.minimum(lower, upper),
                           upper=np.maximum(lower, upper))


def predict_infinite(beta: float, c: float, v_int: float, w_int: float, n) -> DecayPrediction:
    """First-order term (d0 / c) n^{beta-1} int v int w with d0 = sin(pi beta) / pi.

    ``c`` is the tail constant of the base measure, mu(return > n) ~ c n^{-beta};
    the higher coefficients d_1.. stay as unknown slots.
    """
    if not 0.5 < beta < 1:
        raise ValueError("infinite-measure prediction needs 1/2 < beta < 1")
    if not c > 0:
        raise ValueError("tail constant must be positive")
    n = np.asarray(n, dtype=float)
    d0 = math.sin(math.pi * beta) / math.pi
    q = q_formula(beta)
    lead = d0 / c * n ** (beta - 1.0) * v_int * w_int
    return DecayPrediction("Infinite", n, lead, float(beta - 0.5), "n^-(beta-1/2)", q=q, d0=d0,
                           higher_terms=tuple([None] * max(q - 1, 0)), lower=lead, upper=lead)


# first-return tower (infinite case) -----------------------------------------------------

@dataclass(eq=False)
class ReturnRenewal:
    """Branches of the first-return map on a grid of Y, cut into subcells.

    Subcell p lies in grid cell ``row[p]``, has Lebesgue length ``leb[p]``,
    return time ``tau[p]`` and image profile ``table[qrow[p]]`` (fractions of
    its mass landing in each grid cell).  Branches longer than
    ``profile_cap`` reuse the normalised pullback shape of the capped branch.
    """

    lattice: OrbitLattice
    grid: Grid
    tau_max: int
    profile_cap: int
    row: np.ndarray = field(init=False)
    leb: np.ndarray = field(init=False)
    tau: np.ndarray = field(init=False)
    qrow: np.ndarray = field(init=False)
    table: np.ndarray = field(init=False)

    def __post_init__(self):
        lat, grid = self.lattice, self.grid
        params = lat.params
        e0 = lat.e0
        if abs(grid.domain[0] - e0) > 1e-15 or grid.domain[1] != 1.0:
            raise ValueError("grid must cover Y = [e0, 1]")
        if self.tau_max > lat.depth_n:
            raise ValueError("tau_max exceeds lattice depth")
        bp = grid.breakpoints
        M = grid.cells
        goff = bp - e0
        goff[0] = 0.0
        s1 = int(lat.sigma[1])
        p1 = float(lat.orbit_of_1[1])
        rows, lebs, taus, qrows = [], [], [], []
        table = []
        z = bp.copy()
        z[0] = e0
        shape = None
        cap = min(self.profile_cap, self.tau_max)

        def add_branch(jj, pts, own_profile):
            # pts: increasing offsets of the pullback of the grid, pts[0] = lo, pts[-1] = hi
            lo, hi = pts[0], pts[-1]
            ia = int(grid.locate(e0 + lo))
            ib = int(grid.locate(np.nextafter(e0 + hi, -np.inf)))
            if ia == ib and own_profile is not None:
                rows.append(ia)
                lebs.append(hi - lo)
                taus.append(jj)
                qrows.append(own_profile)
                return
            if ia == ib:
                table.append(np.diff(pts) / (hi - lo))
                rows.append(ia)
                lebs.append(hi - lo)
                taus.append(jj)
                qrows.append(len(table) - 1)
                return
            gpts = np.concatenate([[lo], goff[ia + 1 : ib + 1], [hi]])
            gi, pi, ln = _overlaps(gpts, pts)
            for g in np.unique(gi):
                msk = gi == g
                prof = np.zeros(M)
                np.add.at(prof, np.minimum(pi[msk], M - 1), ln[msk])
                tot = prof.sum()
                table.append(prof / tot)
                rows.append(ia + int(g))
                lebs.append(tot)
                taus.append(jj)
                qrows.append(len(table) - 1)

        shared_q = None
        for jj in range(1, self.tau_max + 1):
            if jj <= cap and jj > 1:
                z = np.asarray(invert_branch(params, Branch.LEFT, z))
            if jj < s1:
                continue
            if jj == s1:
                tgt = np.concatenate([bp[bp < p1], [p1]])
                zt = tgt.copy()
                zt[0] = e0
                for _ in range(jj - 1):
                    zt = np.asarray(invert_branch(params, Branch.LEFT, zt))
                pts = invert_offset(params, e0, np.minimum(zt, params.b))
                pts[0] = lat.y_offset[jj]
                pts[-1] = 1.0 - e0
                add_branch(jj, pts, None)
                continue
            if jj <= cap:
                pts = invert_offset(params, e0, z)
                pts[0] = lat.y_offset[jj]
                pts[-1] = lat.y_offset[jj - 1]
                add_branch(jj, pts, None)
                if jj == cap:
                    shape = (pts - pts[0]) / (pts[-1] - pts[0])
                    table.append(np.diff(shape))
                    shared_q = len(table) - 1
                continue
            lo, hi = lat.y_offset[jj], lat.y_offset[jj - 1]
            add_branch(jj, lo + (hi - lo) * shape, shared_q)
        self.row = np.array(rows, dtype=np.int64)
        self.leb = np.array(lebs)
        self.tau = np.array(taus, dtype=np.int64)
        self.qrow = np.array(qrows, dtype=np.int64)
        self.table = np.array(table)
        self.frac = self.leb / grid.widths[self.row]

    @property
    def uncovered(self) -> float:
        """Lebesgue length of [e0, y_tau_max), the points returning after tau_max."""
        return float(self.lattice.y_offset[self.tau_max])

    def renew(self, s0: np.ndarray, n_max: int) -> np.ndarray:
        """Base masses s_n = sum_{j=1}^n s_{n-j} R_j, n = 0..n_max, from s_0.

        ``s0`` may have shape (cells,) or (k, cells) for k initial vectors.
        """
        if n_max > self.tau_max:
            raise ValueError("n_max exceeds tau_max")
        s0 = np.asarray(s0, dtype=float)
        single = s0.ndim == 1
        S0 = s0[None, :] if single else s0
        k, M = S0.shape
        sel = np.nonzero(self.tau <= n_max)[0]
        sel = sel[np.argsort(self.tau[sel], kind="stable")]
        tau = self.tau[sel]
        row = self.row[sel]
        frac = self.frac[sel]
        qs, qinv = np.unique(self.qrow[sel], return_inverse=True)
        table = self.table[qs]
        nq = len(qs)
        counts = np.searchsorted(tau, np.arange(n_max + 1), side="right")
        s = np.zeros((n_max + 1, k, M))
        s[0] = S0
        offs = (np.arange(k) * nq)[:, None]
        for m in range(1, n_max + 1):
            c = counts[m]
            if not c:
                continue
            vals = s[m - tau[:c], :, row[:c]] * frac[:c, None]  # (c, k)
            coef = np.bincount((qinv[:c][None, :] + offs).ravel(), weights=vals.T.ravel(),
                               minlength=k * nq).reshape(k, nq)
            s[m] = coef @ table
        return s[:, 0, :] if single else s


def build_return_renewal(lattice: OrbitLattice, grid: Grid, tau_max: int,
                         profile_cap: int = 400) -> ReturnRenewal:
    return ReturnRenewal(lattice=lattice, grid=grid, tau_max=int(tau_max), profile_cap=int(profile_cap))


@dataclass(frozen=True, eq=False)
class InfiniteCorrelation:
    """rho_n w.r.t. mu_X normalised by mu_X|_Y = scale * mu_tau.

    ``v_int`` and ``w_int`` are the mu_X integrals under the same scale, so
    rho / (v_int w_int) does not depend on it.
    """

    rho: np.ndarray
    v_int: float
    w_int: float
    scale: float
    budget: np.ndarray | None = None

    @property
    def n(self) -> np.ndarray:
        return np.arange(len(self.rho))

    @property
    def normalized(self) -> np.ndarray:
        return self.rho / (self.v_int * self.w_int)

    @property
    def truncation_dominated(self) -> np.ndarray | None:
        if self.budget is None:
            return None
        return self.budget > 0.2 * np.abs(self.rho)


def correlation_infinite(renewal: ReturnRenewal, mu_tau: DensityVector, v: Observable, w: Observable,
                         n_max: int, scale: float = 1.0, coarse: ReturnRenewal | None = None,
                         mu_tau_coarse: DensityVector | None = None) -> InfiniteCorrelation:
    """rho_n = int v . w o f^n dmu_X for observables supported on Y.

    Mass starting on Y visits Y again exactly at the return times, so
    rho_n = scale * <s_n, w> with s_0 = v mu_tau and the base renewal of the
    first-return tower.  All branches with tau <= n_max are resolved, so
    nothing is truncated; ``coarse`` (a renewal on a grid of half the
    resolution) gives a grid-halving error budget.
    """
    for u in (v, w):
        if u.support_hint is not Support.BASE_ONLY or not u.check_support(renewal.lattice.params):
            raise RejectedObservable(f"observable {u.name!r} is not supported on Y")

    def run(ren, mu):
        g = ren.grid
        pi = mu.cell_mass / mu.cell_mass.sum()
        vt, wt = v.trace(g), w.trace(g)
        s = ren.renew(vt * pi, n_max)
        return s @ wt, float(vt @ pi), float(wt @ pi)

    rho, vi, wi = run(renewal, mu_tau)
    budget = None
    if coarse is not None:
        if mu_tau_coarse is None:
            raise ValueError("coarse renewal needs its own density")
        rc, _, _ = run(coarse, mu_tau_coarse)
        budget = scale * np.abs(rho - rc)
    res = InfiniteCorrelation(rho=scale * rho, v_int=scale * vi, w_int=scale * wi, scale=scale, budget=budget)
    flag = res.truncation_dominated
    if flag is not None and flag[1:].any():
        warnings.warn(f"grid budget exceeds 20% of the signal at {int(flag[1:].sum())} lags")
    return res


# helpers -------------------------------------------------------------------------------

def loglog_slope(n, values, window) -> float:
    """Least-squares slope of log |values| on log n over the inclusive window."""
    n = np.asarray(n, dtype=float)
    values = np.asarray(values, dtype=float)
    sel = (n >= window[0]) & (n <= window[1]) & (np.abs(values) > 0)
    return float(np.polyfit(np.log(n[sel]), np.log(np.abs(values[sel])), 1)[0])


def export_results(path, n, rho, leading, residual, budget) -> None:
    """Results CSV with columns n, rho, leading, residual, budget."""
    with open(path, "w", newline="\n") as fh:
        fh.write("n,rho,leading,residual,budget\n")
        for row in zip(n, rho, leading, residual, budget):
            fh.write(f"{int(row[0])}," + ",".join(repr(float(x)) for x in row[1:]) + "\n")
