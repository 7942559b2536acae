"""Tail sequences mu_0(phi > n), mu_tau(tau > n) and the checks built on them.

Masses come from piecewise-constant densities on Y.  The schedule leaves three
kinds of set unresolved: the phi-tail of each level (an interval [e_k, e_k + u)
with known reinduce time k + 1), and the top piece [e_K, 1) whose reinduce
time is only bounded below.  Quantities touching the top piece carry a
bracket.
"""

from __future__ import annotations

import enum
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import zeta

from .inducing import OrbitLattice, ReturnSchedule
from .ulam import DensityVector

__all__ = [
    "TailKind",
    "TailSeries",
    "TailFit",
    "MeanData",
    "InducedMeasure",
    "H1Report",
    "ReturnComparison",
    "CorollaryRecord",
    "CoverageError",
    "tail_phi",
    "tail_tau",
    "fit_tail",
    "check_H1",
    "compare_returns",
    "identity_budget",
    "corollary_bound",
    "mean_data",
]


class CoverageError(ValueError):
    """Requested range reaches past what the schedule or lattice resolves."""


class TailKind(enum.Enum):
    PHI0 = "Phi0"
    TAUTAU = "TauTau"
    CUSTOM = "Custom"


@dataclass(frozen=True, eq=False)
class TailSeries:
    """values[n] for n = 0..len-1 with lower/upper brackets."""

    values: np.ndarray
    kind: TailKind
    normalization: float = 1.0
    provenance: dict = field(default_factory=dict)
    lower: np.ndarray = None
    upper: np.ndarray = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        lo = v if self.lower is None else np.asarray(self.lower, dtype=float)
        hi = v if self.upper is None else np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def n(self) -> np.ndarray:
        return np.arange(len(self.values))

    def is_valid(self, tol: float = 1e-12) -> bool:
        v = self.values
        return bool(
            np.all(v >= -tol)
            and np.all(np.diff(v) <= tol)
            and v[0] <= self.normalization + tol
        )

    def export_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write("n,value,lower_bracket,upper_bracket\n")
            for i in range(len(self.values)):
                fh.write(f"{i},{float(self.values[i])!r},{float(self.lower[i])!r},{float(self.upper[i])!r}\n")


@dataclass(frozen=True)
class TailFit:
    beta_hat: float
    c_hat: float
    residual_exponent: float
    window: tuple
    beta_ref: float
    c_loglog: float

    def to_json(self) -> str:
        d = {
            "beta_hat": self.beta_hat,
            "c_hat": self.c_hat,
            "residual_exponent": self.residual_exponent,
            "window": list(self.window),
        }
        return json.dumps(d)


@dataclass(frozen=True)
class MeanData:
    phi_bar: float
    tau_bar: float
    rho_bar: float
    phi_bar_bracket: tuple
    tau_bar_bracket: tuple
    rho_bar_bracket: tuple

    @property
    def identity_gap(self) -> float:
        """Relative gap |phi_bar - rho_bar tau_bar| / phi_bar."""
        return abs(self.phi_bar - self.rho_bar * self.tau_bar) / self.phi_bar


# mu_0 bookkeeping on the schedule -----------------------------------------------

class InducedMeasure:
    """Masses of schedule cells and uncovered pieces under a density on Y.

    ``level_mass[k][i]`` is the mass of the level-k cell with index
    j = ``level_j0[k] + i``; ``tail_mass[k]`` is the mass of the uncovered
    phi-tail of level k and ``top_mass`` that of [e_K, 1).
    """

    def __init__(self, schedule: ReturnSchedule, density: DensityVector):
        self.schedule = schedule
        self.density = density
        lat = schedule.lattice
        K = lat.depth_k
        self.depth = K
        self.cell_mass = density.mass_offsets(schedule.anchor, schedule.off_left, schedule.off_right)
        self.tail_mass = density.mass_offsets(lat.e[:K], np.zeros(K), schedule.uncovered_levels)
        self.top_mass = float(density.mass_offsets(np.array([lat.e[K]]), np.zeros(1),
                                                   np.array([lat.one_minus_e[K]]))[0])
        self.total = float(self.cell_mass.sum() + self.tail_mass.sum() + self.top_mass)
        self.level_j0 = []
        self.level_mass = []
        for k in range(K):
            sel = schedule.level == k
            jj = schedule.j[sel]
            j0 = int(lat.sigma[k + 1]) + 1
            arr = np.zeros(int(jj.max()) - j0 + 1 if len(jj) else 0)
            arr[jj - j0] = self.cell_mass[sel]
            self.level_j0.append(j0)
            self.level_mass.append(arr)
        # mass of [e_k, 1) for k = 0..K
        above = np.zeros(K + 1)
        above[K] = self.top_mass
        for k in range(K - 1, -1, -1):
            above[k] = above[k + 1] + self.level_mass[k].sum() + self.tail_mass[k]
        self.mass_above = above

    def level_window(self, k: int, a: int, b: int) -> float:
        """Mass of level-k cells with first-return index j in (a, b]."""
        j0 = self.level_j0[k]
        arr = self.level_mass[k]
        jmax = j0 + len(arr) - 1
        if b > jmax and b > max(a, j0 - 1):
            raise CoverageError(f"window ({a}, {b}] reaches the uncovered tail of level {k}")
        lo = max(a + 1, j0)
        return float(arr[lo - j0 : b - j0 + 1].sum()) if b >= lo else 0.0

    def rho_bar(self) -> tuple:
        """Estimate and bracket of the integral of rho."""
        lat = self.schedule.lattice
        K = self.depth
        base = float((self.cell_mass * self.schedule.rho).sum()
                     + (self.tail_mass * np.arange(1, K + 1)).sum())
        lo = (base + self.top_mass * (K + 1)) / self.total
        # rho on [e_K, 1) is unbounded near 1 but its mass decays like 1/lambda_k
        growth = float(lat.one_minus_e[K] / lat.one_minus_e[K - 1]) if K >= 1 else 0.5
        extra = self.top_mass * growth / (1.0 - growth) ** 2 if growth < 1 else np.inf
        return lo, lo + extra / self.total


# tail sequences --------------------------------------------------------------------

def _zeta_tail(last_value: float, N: int, beta: float) -> float:
    """sum_{n > N} last_value (N / n)^beta for beta > 1."""
    if beta <= 1:
        return np.inf
    return float(last_value * N ** beta * zeta(beta, N + 1))


def tail_phi(schedule: ReturnSchedule, mu0: DensityVector, n_max: int) -> TailSeries:
    """mu_0(phi > n) for n = 0..n_max.

    Uncovered level tails have phi > phi_cap and are counted in full; the top
    piece [e_K, 1) has phi >= tau_{K+1}, so it is certain below that and
    bracketed above.
    """
    if n_max > schedule.phi_cap:
        raise CoverageError(f"n_max {n_max} exceeds phi_cap {schedule.phi_cap}")
    meas = InducedMeasure(schedule, mu0)
    lat = schedule.lattice
    counts = np.bincount(schedule.phi, weights=meas.cell_mass, minlength=schedule.phi_cap + 2)
    tail = np.cumsum(counts[::-1])[::-1]  # tail[m] = sum over phi >= m
    n = np.arange(n_max + 1)
    core = tail[n + 1] + meas.tail_mass.sum()
    top_floor = int(lat.tau_at_1[lat.depth_k])
    upper = (core + meas.top_mass) / meas.total
    lower = (core + np.where(n < top_floor, meas.top_mass, 0.0)) / meas.total
    values = upper.copy()
    return TailSeries(
        values=values,
        kind=TailKind.PHI0,
        normalization=1.0,
        provenance={
            "route": "InducedF Ulam density on schedule cells",
            "phi_cap": int(schedule.phi_cap),
            "grid_cells": int(mu0.grid.cells),
            "uncovered_mass": float(meas.tail_mass.sum() + meas.top_mass),
        },
        lower=lower,
        upper=upper,
    )


def tail_tau(params, lattice: OrbitLattice, mu_tau: DensityVector, n_max: int) -> TailSeries:
    """mu_tau(tau > n) = mu_tau([e0, y_n)) for n = 0..n_max."""
    if n_max > lattice.depth_n:
        raise CoverageError(f"n_max {n_max} exceeds lattice depth {lattice.depth_n}")
    if lattice.params != params:
        raise ValueError("lattice built for different parameters")
    n = np.arange(n_max + 1)
    u = lattice.y_offset[n]
    vals = mu_tau.mass_offsets(np.full(len(n), lattice.e0), np.zeros(len(n)), u)
    total = float(mu_tau.cell_mass.sum())
    vals = vals / total
    vals[0] = 1.0
    vals = np.minimum.accumulate(vals)
    return TailSeries(
        values=vals,
        kind=TailKind.TAUTAU,
        normalization=1.0,
        provenance={"route": "FirstReturn Ulam density", "lattice_depth": int(lattice.depth_n),
                    "grid_cells": int(mu_tau.grid.cells)},
    )


# fitting -------------------------------------------------------------------------------

def fit_tail(series: TailSeries, window=(20, 500), beta_ref: float | None = None,
             gamma_range=(0.2, 3.0), gamma_step: float = 1e-3) -> TailFit:
    """Two-stage fit of values[n] ~ c n^{-beta}.

    Stage 1 is least squares of log values on log n over the window, giving
    ``beta_hat``.  Stage 2 holds beta at ``beta_ref`` (the exponent under
    test; ``beta_hat`` if omitted) and fits
    n^beta values[n] = c + n^{-gamma} (A log n + B), profiling gamma on a grid
    and solving the linear part in relative least squares.  The residual
    |values - c n^{-beta}| then decays like n^{-(beta + gamma)} up to the log.
    """
    lo, hi = int(window[0]), int(window[1])
    if hi >= len(series.values) or lo < 1 or hi <= lo + 4:
        raise ValueError(f"window {window} outside the series")
    n = np.arange(lo, hi + 1, dtype=float)
    v = series.values[lo : hi + 1]
    if np.any(v <= 0):
        raise ValueError("non-positive tail values in window")
    slope, icpt = np.polyfit(np.log(n), np.log(v), 1)
    beta_hat = -float(slope)
    beta = beta_hat if beta_ref is None else float(beta_ref)
    y = v * n ** beta
    best = None
    logn = np.log(n)
    for g in np.arange(gamma_range[0], gamma_range[1] + gamma_step / 2, gamma_step):
        ng = n ** -g
        X = np.column_stack([np.ones_like(n), ng * logn, ng]) / y[:, None]
        coef, *_ = np.linalg.lstsq(X, np.ones_like(n), rcond=None)
        r = float(np.sum((X @ coef - 1.0) ** 2))
        if best is None or r < best[0]:
            best = (r, g, coef)
    _, gamma, coef = best
    return TailFit(
        beta_hat=beta_hat,
        c_hat=float(coef[0]),
        residual_exponent=float(beta + gamma),
        window=(lo, hi),
        beta_ref=beta,
        c_loglog=float(np.exp(icpt)),
    )


# (H1) -------------------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class H1Report:
    ratios: np.ndarray
    sup: float
    trend_slope: float
    window: tuple
    exhausted_from: int | None


def check_H1(schedule: ReturnSchedule, mu0: DensityVector, n_max: int,
             window: tuple | None = None) -> H1Report:
    """r_n = (integral of rho over {phi > n}) / mu_0(phi > n), n = 0..n_max.

    The trend slope regresses log r_n on log n over ``window`` (default
    [20, n_max]).
    """
    if n_max > schedule.phi_cap:
        raise CoverageError(f"n_max {n_max} exceeds phi_cap {schedule.phi_cap}")
    meas = InducedMeasure(schedule, mu0)
    K = meas.depth
    cap = schedule.phi_cap + 2
    m0 = np.bincount(schedule.phi, weights=meas.cell_mass, minlength=cap)
    m1 = np.bincount(schedule.phi, weights=meas.cell_mass * schedule.rho, minlength=cap)
    t0 = np.cumsum(m0[::-1])[::-1]
    t1 = np.cumsum(m1[::-1])[::-1]
    extra0 = meas.tail_mass.sum() + meas.top_mass
    extra1 = (meas.tail_mass * np.arange(1, K + 1)).sum() + meas.top_mass * (K + 1)
    n = np.arange(n_max + 1)
    den = t0[n + 1] + extra0
    num = t1[n + 1] + extra1
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(den > 0, num / den, np.nan)
    bad = np.nonzero(~(den > 0))[0]
    exhausted = int(bad[0]) if len(bad) else None
    lo, hi = window if window is not None else (min(20, n_max // 2), n_max)
    sel = np.arange(max(lo, 1), hi + 1)
    sel = sel[np.isfinite(r[sel])]
    slope = float(np.polyfit(np.log(sel), np.log(r[sel]), 1)[0]) if len(sel) > 2 else np.nan
    return H1Report(ratios=r, sup=float(np.nanmax(r)), trend_slope=slope, window=(lo, hi),
                    exhausted_from=exhausted)


# first versus general returns -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReturnComparison:
    j: np.ndarray
    lhs: np.ndarray
    rhs_sum1: np.ndarray
    rhs_sum2: np.ndarray
    truncation: np.ndarray
    rho_bar: float

    @property
    def rhs(self) -> np.ndarray:
        return self.rhs_sum1 - self.rhs_sum2

    @property
    def residual(self) -> np.ndarray:
        return np.abs(self.lhs - self.rhs)


def compare_returns(schedule: ReturnSchedule, lattice: OrbitLattice, mu0: DensityVector,
                    mu_tau: DensityVector, rho_bar: float | None, n_max: int) -> ReturnComparison:
    """Both sides of the first/general return identity for j = 0..n_max.

    lhs = mu_0(phi > j) / rho_bar - mu_tau(tau > j).  The right side sums, per
    level k, the mass of level-k cells whose first-return index lies in
    (j - tau_k, j] minus, when sigma_{k+1} > j, the mass of [e_{k+1}, 1).
    ``truncation`` bounds the contribution of levels k >= K.
    """
    if lattice is not schedule.lattice and lattice.params != schedule.params:
        raise ValueError("lattice and schedule disagree")
    meas = InducedMeasure(schedule, mu0)
    if rho_bar is None:
        rho_bar = meas.rho_bar()[0]
    K = meas.depth
    phi_t = tail_phi(schedule, mu0, n_max)
    tau_t = tail_tau(schedule.params, lattice, mu_tau, n_max)
    js = np.arange(n_max + 1)
    taus = lattice.tau_at_1
    s1 = np.zeros(len(js))
    s2 = np.zeros(len(js))
    trunc = np.zeros(len(js))
    for i, j in enumerate(js):
        acc1 = 0.0
        acc2 = 0.0
        for k in range(K):
            tk = int(taus[k])
            if tk > 0:
                acc1 += meas.level_window(k, j - tk, j)
            if int(lattice.sigma[k + 1]) > j:
                acc2 += meas.mass_above[k + 1]
        s1[i] = acc1 / meas.total
        s2[i] = acc2 / meas.total
        # omitted levels live inside [e_K, 1)
        trunc[i] = meas.top_mass / meas.total
    if meas.top_mass / meas.total > 1e-8:
        warnings.warn(f"omitted levels carry mass {meas.top_mass / meas.total:.2e}")
    lhs = phi_t.values / rho_bar - tau_t.values
    return ReturnComparison(j=js, lhs=lhs, rhs_sum1=s1 / rho_bar, rhs_sum2=s2 / rho_bar,
                            truncation=trunc / rho_bar, rho_bar=float(rho_bar))


def identity_budget(fine: ReturnComparison, coarse: ReturnComparison, floor: float = 1e-12) -> np.ndarray:
    """Error budget for |lhs - rhs| from two grids, one refining the other.

    The Ulam error is first order in the mesh, so the change between the
    coarse and fine estimates bounds the fine-grid error of each side.  The
    truncation bracket and a rounding floor are added.
    """
    n = min(len(fine.j), len(coarse.j))
    dl = np.abs(fine.lhs[:n] - coarse.lhs[:n])
    dr = np.abs(fine.rhs[:n] - coarse.rhs[:n])
    return dl + dr + fine.truncation[:n] + floor


@dataclass(frozen=True, eq=False)
class CorollaryRecord:
    n: np.ndarray
    lhs_sum: np.ndarray
    rhs_bound: np.ndarray
    lhs_bracket: np.ndarray

    @property
    def margin(self) -> np.ndarray:
        return self.rhs_bound - self.lhs_sum


def corollary_bound(schedule: ReturnSchedule, mu0: DensityVector, phi_bar: float, tau_bar: float,
                    n_max: int, mu_tau: DensityVector | None = None, lattice: OrbitLattice | None = None,
                    n_sum: int | None = None) -> CorollaryRecord:
    """Compare the first-return and general-return correlation leading terms.

    lhs_sum(n) = |sum_{j >= n} mu_0(phi > j) / phi_bar - mu_tau(tau > j) / tau_bar|
    with both tails summed to ``n_sum`` and extrapolated as c j^{-beta} beyond;
    ``lhs_bracket`` is the size of the extrapolated part.
    rhs_bound(n) = (1 / phi_bar) sum_{k >= 1} tau_k mu_0(level-k cells with phi > n).
    """
    lat = lattice if lattice is not None else schedule.lattice
    meas = InducedMeasure(schedule, mu0)
    K = meas.depth
    beta = schedule.params.beta
    ns = np.arange(n_max + 1)
    taus = lat.tau_at_1
    # rhs: level-k cells with phi = tau_k + j > n, tails included
    rhs = np.zeros(len(ns))
    for k in range(1, K):
        arr = meas.level_mass[k]
        j0 = meas.level_j0[k]
        phis = taus[k] + j0 + np.arange(len(arr))
        cum = np.concatenate([np.cumsum(arr[::-1])[::-1], [0.0]])
        pos = np.searchsorted(phis, ns, side="right")
        rhs += taus[k] * (cum[pos] + meas.tail_mass[k])
    rhs += taus[K] * meas.top_mass
    rhs /= meas.total * phi_bar
    if mu_tau is None:
        raise ValueError("mu_tau density required for the left side")
    N = n_sum if n_sum is not None else min(schedule.phi_cap, lat.depth_n)
    pt = tail_phi(schedule, mu0, N).values
    tt = tail_tau(schedule.params, lat, mu_tau, N).values
    d = pt / phi_bar - tt / tau_bar
    ext_p = _zeta_tail(pt[N], N, beta) / phi_bar
    ext_t = _zeta_tail(tt[N], N, beta) / tau_bar
    tail_sum = np.cumsum(d[::-1])[::-1]  # sum_{j >= n}^{N}
    lhs = np.abs(tail_sum[ns] + ext_p - ext_t)
    bracket = np.full(len(ns), abs(ext_p - ext_t))
    return CorollaryRecord(n=ns, lhs_sum=lhs, rhs_bound=rhs, lhs_bracket=bracket)


def mean_data(schedule: ReturnSchedule, mu0: DensityVector, lattice: OrbitLattice,
              mu_tau: DensityVector, n_sum: int | None = None) -> MeanData:
    """phi_bar, tau_bar and rho_bar from the two densities.

    phi_bar and tau_bar sum the tails to ``n_sum`` and extrapolate the rest as
    c n^{-beta}; the extrapolated part is the bracket width.
    """
    beta = schedule.params.beta
    if beta <= 1:
        raise ValueError("means are infinite for beta <= 1")
    meas = InducedMeasure(schedule, mu0)
    N = n_sum if n_sum is not None else min(schedule.phi_cap, lattice.depth_n)
    pt = tail_phi(schedule, mu0, N).values
    tt = tail_tau(schedule.params, lattice, mu_tau, N).values
    ext_p = _zeta_tail(pt[N], N, beta)
    ext_t = _zeta_tail(tt[N], N, beta)
    phi_bar = float(pt.sum() + ext_p)
    tau_bar = float(tt.sum() + ext_t)
    r_lo, r_hi = meas.rho_bar()
    return MeanData(
        phi_bar=phi_bar,
        tau_bar=tau_bar,
        rho_bar=r_lo,
        phi_bar_bracket=(float(pt.sum()), phi_bar + ext_p),
        tau_bar_bracket=(float(tt.sum()), tau_bar + ext_t),
        rho_bar_bracket=(r_lo, r_hi),
    )
