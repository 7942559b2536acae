"""Inducing scheme on Y = [e0, 1]: orbit lattice, first return, general return.

Points near e0 and near e_k are stored as offsets (y - e0, y - e_k) so that
cells far out in the tail keep their relative width exactly.  The orbit of 1
and the points e_k are computed in extended precision with mpmath.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import mpmath
import numpy as np

from .afn_map import MapParams, deriv, eval_map, invert_offset, step_offset

__all__ = [
    "DepthUnreachable",
    "LatticeDepthExceeded",
    "OrbitLattice",
    "Cell",
    "ReturnSchedule",
    "GibbsMarkovCertificate",
    "build_lattice",
    "max_depth",
    "first_return_time",
    "first_return_time_direct",
    "build_schedule",
    "certify_gibbs_markov",
]

_DPS = 60
_EPS = np.finfo(float).eps


class DepthUnreachable(ValueError):
    """Requested e_k whose cells are narrower than double precision resolves."""


class LatticeDepthExceeded(ValueError):
    """Point falls below the deepest stored x_n."""


# extended precision helpers -------------------------------------------------

class _MP:
    def __init__(self, params: MapParams, dps=_DPS):
        self.ctx = mpmath.MPContext()
        self.ctx.dps = dps
        mp = self.ctx
        self.a = mp.mpf(params.alpha)
        self.b = mp.mpf(params.b)
        e = mp.mpf(params.e0)
        for _ in range(100):
            g = e + self.b * e ** (1 + self.a) - 1
            e_new = e - g / self.dlift(e)
            if abs(e_new - e) < mp.mpf(10) ** (-dps + 5):
                e = e_new
                break
            e = e_new
        self.e0 = e

    def lift(self, x):
        return x + self.b * x ** (1 + self.a) if x > 0 else self.ctx.mpf(0)

    def dlift(self, x):
        return 1 + self.b * (1 + self.a) * x ** self.a if x > 0 else self.ctx.mpf(1)

    def f(self, x):
        # left limit at the wrap point, so f(1) = b on the lifted right branch
        y = self.lift(x)
        return y - 1 if x >= self.e0 else y

    def solve(self, target, guess):
        mp = self.ctx
        x = mp.mpf(guess)
        tol = mp.mpf(10) ** (-mp.dps + 5)
        for _ in range(200):
            dx = (self.lift(x) - target) / self.dlift(x)
            x -= dx
            if abs(dx) <= tol * abs(x):
                break
        return x

    def inv_left(self, z):
        if z == 0:
            return self.ctx.mpf(0)
        z_f = float(z)
        guess = z_f / (1.0 + float(self.b) * z_f ** float(self.a))
        return self.solve(z, guess)

    def inv_right(self, z):
        return self.solve(1 + z, float(self.e0) + float(z) / float(self.dlift(self.e0)))

    def inv_tau_branch(self, sigma, z):
        """Inverse of f^sigma on [y_sigma, y_{sigma-1})."""
        for _ in range(sigma - 1):
            z = self.inv_left(z)
        return self.inv_right(z)


# lattice ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OrbitLattice:
    """Points and integer data of the inducing scheme.

    Arrays are indexed so that ``x[n]`` is x_n (``x[0] = e0``), ``y[j]`` is
    y_j with the convention y_0 = 1, ``e[k]`` is e_k, ``sigma[k]`` is
    sigma_k (``sigma[0] = 0``), ``tau_at_1[k]`` is tau_k and ``lam[k]`` is
    Df^(tau_k + 1)(e_k).  ``sigma`` and ``tau_at_1`` carry one extra entry
    (index depth_k + 1) needed to refine the deepest level.
    """

    params: MapParams
    e0: float
    x: np.ndarray
    y_offset: np.ndarray
    e: np.ndarray
    one_minus_e: np.ndarray
    sigma: np.ndarray
    tau_at_1: np.ndarray
    lam: np.ndarray
    orbit_of_1: np.ndarray
    e_orbits: tuple = field(repr=False)
    e_mp: tuple = field(repr=False)
    forward_residual_mp: np.ndarray = field(repr=False)

    @property
    def y(self) -> np.ndarray:
        return self.e0 + self.y_offset

    @property
    def depth_n(self) -> int:
        return len(self.x) - 1

    @property
    def depth_k(self) -> int:
        return len(self.e) - 1

    def pullback_offset(self, k: int, s):
        """G_k^{-1}(e0 + s) - e_k for offsets s >= 0, where G_k = f^tau_k on [e_k, 1).

        Computed by propagating the offset backwards along the orbit of e_k,
        each step solving f(o_i + d) - f(o_i) = d_next for d.
        """
        s = np.asarray(s, dtype=float)
        if k == 0:
            return s.copy()
        orbit = self.e_orbits[k]
        d = s
        for i in range(len(orbit) - 2, -1, -1):
            d = invert_offset(self.params, orbit[i], d)
        return d

    def pullback_derivative(self, k: int, s):
        """Derivative of s -> G_k^{-1}(e0 + s), along the same backward orbit."""
        s = np.asarray(s, dtype=float)
        out = np.ones_like(s)
        if k == 0:
            return out
        orbit = self.e_orbits[k]
        d = s
        for i in range(len(orbit) - 2, -1, -1):
            d = invert_offset(self.params, orbit[i], d)
            out = out / deriv(self.params, np.clip(orbit[i] + d, 0.0, 1.0))
        return out

    def forward_check(self) -> dict:
        """Residuals of the defining relations f(x_n) = x_{n-1}, f(y_j) = x_{j-1}
        and f^tau_k(e_k) = e0."""
        p = self.params
        rx = np.abs(eval_map(p, self.x[1:]) - self.x[:-1])
        jj = np.arange(1, len(self.y_offset))
        valid = self.x[jj - 1] <= p.b
        fy = step_offset(p, self.e0, self.y_offset[jj][valid])
        ry = np.abs(fy - self.x[jj - 1][valid])
        double_res = []
        for k in range(1, self.depth_k + 1):
            z = float(self.e[k])
            z = float(iterate_plain(p, z, int(self.tau_at_1[k])))
            double_res.append(abs(z - self.e0))
        return {
            "x": float(rx.max(initial=0.0)),
            "y": float(ry.max(initial=0.0)),
            "e_extended": float(np.max(self.forward_residual_mp, initial=0.0)),
            "e_double": np.array(double_res),
        }


def iterate_plain(params, x, n):
    for _ in range(n):
        x = eval_map(params, x)
    return x


def _x_lattice(params: MapParams, depth_n: int) -> np.ndarray:
    a, b = params.alpha, params.b
    x = np.empty(depth_n + 1)
    x[0] = params.e0
    cur = params.e0
    for n in range(1, depth_n + 1):
        z = cur
        t = z / (1.0 + b * z ** a)
        for _ in range(60):
            ta = t ** a
            dt = (t + b * t * ta - z) / (1.0 + b * (1.0 + a) * ta)
            t -= dt
            if abs(dt) <= 1e-16 * t:
                break
        x[n] = cur = t
    return x


def _orbit_data(params: MapParams, mp: _MP, depth_k: int):
    """sigma_k, orbit points p_k = f^tau_k(1), and e_k in extended precision."""
    ctx = mp.ctx
    p = ctx.mpf(1)
    sigmas = [0]
    points = [p]
    for _ in range(depth_k + 1):
        t = 0
        cur = p
        while True:
            cur = mp.f(cur)
            t += 1
            if cur >= mp.e0:
                break
            if t > 10 ** 7:
                raise RuntimeError("orbit of 1 does not return to Y")
        sigmas.append(t)
        points.append(cur)
        p = cur
    e_list = [mp.e0]
    for k in range(1, depth_k + 1):
        z = mp.e0
        for s in reversed(sigmas[1 : k + 1]):
            z = mp.inv_tau_branch(s, z)
        e_list.append(z)
    return sigmas, points, e_list


def max_depth(params: MapParams, limit: int = 200) -> int:
    """Largest k with lambda_k below 1/eps (deepest representable e_k)."""
    k = 1
    while k < limit:
        try:
            build_lattice(params, 1, k + 1)
        except DepthUnreachable:
            return k
        k += 1
    return limit


def build_lattice(params: MapParams, depth_n: int, depth_k: int) -> OrbitLattice:
    """Build x_0..x_depth_n, y_0..y_depth_n and e_0..e_depth_k."""
    if depth_n < 1 or depth_k < 0:
        raise ValueError("depth_n must be >= 1 and depth_k >= 0")
    e0 = params.e0
    x = _x_lattice(params, depth_n)
    # y_j with f(y_j) = x_{j-1}; clamp to 1 when x_{j-1} exceeds the right image
    y_off = np.full(depth_n + 1, 1.0 - e0)
    jj = np.arange(1, depth_n + 1)
    ok = x[jj - 1] <= params.b
    y_off[jj[ok]] = np.minimum(invert_offset(params, e0, x[jj - 1][ok]), 1.0 - e0)

    mp = _MP(params)
    ctx = mp.ctx
    sigmas, points, e_list = _orbit_data(params, mp, depth_k)
    taus = np.cumsum(sigmas)

    e = np.empty(depth_k + 1)
    ome = np.empty(depth_k + 1)
    lam = np.empty(depth_k + 1)
    orbits = []
    resid = np.zeros(depth_k + 1)
    for k, ek in enumerate(e_list):
        orb = [ek]
        cur = ek
        for _ in range(int(taus[k])):
            cur = mp.f(cur)
            orb.append(cur)
        resid[k] = float(abs(orb[-1] - mp.e0))
        dlog = ctx.fsum(ctx.log(mp.dlift(o)) for o in orb)
        lam[k] = float(ctx.exp(dlog))
        e[k] = float(ek)
        ome[k] = float(1 - ek)
        orbits.append(np.array([float(o) for o in orb]))
        if lam[k] > 1.0 / _EPS:
            raise DepthUnreachable(
                f"lambda_{k} = {lam[k]:.3g} exceeds 1/eps; lower depth_k below {k}"
            )
    return OrbitLattice(
        params=params,
        e0=e0,
        x=x,
        y_offset=y_off,
        e=e,
        one_minus_e=ome,
        sigma=np.array(sigmas, dtype=np.int64),
        tau_at_1=taus.astype(np.int64),
        lam=lam,
        orbit_of_1=np.array([float(p) for p in points]),
        e_orbits=tuple(orbits),
        e_mp=tuple(e_list),
        forward_residual_mp=resid,
    )


def first_return_time(params: MapParams, lattice: OrbitLattice, y) -> np.ndarray | int:
    """tau(y) = 1 + n where f(y) lies in [x_n, x_{n-1}), or 1 if f(y) is in Y."""
    ya = np.asarray(y, dtype=float)
    if np.any(ya < lattice.e0) or np.any(ya > 1):
        raise ValueError("y must lie in Y = [e0, 1]")
    fy = np.asarray(eval_map(params, ya))
    # x is decreasing; n = number of x_m (m >= 1) strictly above f(y)...
    # f(y) in [x_n, x_{n-1}) <=> n = #{m >= 0 : x_m > f(y)}
    neg = -lattice.x
    n = np.searchsorted(neg, -fy, side="left")
    if np.any((fy < lattice.x[-1]) & (fy < lattice.e0)):
        raise LatticeDepthExceeded("f(y) lies below the deepest stored x_n")
    out = np.where(fy >= lattice.e0, 1, 1 + n)
    return int(out) if np.ndim(y) == 0 else out


def first_return_time_direct(params: MapParams, y, cap: int = 10 ** 6) -> int:
    """Brute-force first return by iterating f."""
    e0 = params.e0
    cur = float(y)
    for t in range(1, cap + 1):
        cur = eval_map(params, cur)
        if cur >= e0:
            return t
    raise RuntimeError("no return within cap")


# schedule --------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    left: float
    right: float
    rho: int
    phi: int
    tau_seq: tuple


@dataclass(frozen=True, eq=False)
class ReturnSchedule:
    """Cylinders of F = f^phi with phi <= phi_cap.

    Cell c sits on level ``level[c]`` (rho = level + 1) and is
    G_k^{-1}([y_j, y_{j-1})) with j = ``j[c]``; its endpoints are stored as
    offsets from the anchor e_level so widths keep full relative accuracy.
    """

    lattice: OrbitLattice
    phi_cap: int
    level: np.ndarray
    j: np.ndarray
    off_left: np.ndarray
    off_right: np.ndarray
    uncovered_levels: np.ndarray
    uncovered_top: float

    @property
    def params(self) -> MapParams:
        return self.lattice.params

    @property
    def n_levels(self) -> int:
        return int(self.level.max()) + 1 if len(self.level) else 0

    @property
    def anchor(self) -> np.ndarray:
        return self.lattice.e[self.level]

    @property
    def left(self) -> np.ndarray:
        return self.anchor + self.off_left

    @property
    def right(self) -> np.ndarray:
        return self.anchor + self.off_right

    @property
    def width(self) -> np.ndarray:
        return self.off_right - self.off_left

    @property
    def rho(self) -> np.ndarray:
        return self.level + 1

    @property
    def phi(self) -> np.ndarray:
        return self.lattice.tau_at_1[self.level] + self.j

    @property
    def uncovered(self) -> float:
        """Lebesgue measure of {phi > phi_cap} (plus the unrefined top piece)."""
        return float(self.uncovered_levels.sum() + self.uncovered_top)

    def tau_seq(self, c: int) -> tuple:
        k = int(self.level[c])
        taus = self.lattice.tau_at_1
        return tuple(int(t) for t in taus[1 : k + 1]) + (int(taus[k] + self.j[c]),)

    def cells(self):
        left, right = self.left, self.right
        for c in range(len(self.level)):
            yield Cell(float(left[c]), float(right[c]), int(self.level[c]) + 1,
                       int(self.phi[c]), self.tau_seq(c))

    def __len__(self):
        return len(self.level)

    def locate(self, y) -> np.ndarray:
        """Index of the cell containing each y (-1 if uncovered)."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        order = np.lexsort((self.off_left, self.level))
        lefts = self.left[order]
        # cells of a level are contiguous in y; sort all by left endpoint
        srt = np.argsort(lefts, kind="stable")
        lefts = lefts[srt]
        idx = np.searchsorted(lefts, y, side="right") - 1
        out = np.full(y.shape, -1, dtype=np.int64)
        good = idx >= 0
        cand = order[srt[np.clip(idx, 0, None)]]
        inside = good & (y < self.right[cand])
        out[inside] = cand[inside]
        return out

    def branch_image(self, c: int, t):
        """Points F_c^{-1}(e0 + t) - anchor for offsets t in [0, 1 - e0]."""
        lat = self.lattice
        k, j = int(self.level[c]), int(self.j[c])
        s = tau_branch_inverse_offset(lat, j, np.asarray(t, dtype=float))
        return lat.pullback_offset(k, s)


def tau_branch_inverse_offset(lattice: OrbitLattice, j: int, t):
    """Offset u with f^j(e0 + u) = e0 + t on the first-return branch [y_j, y_{j-1})."""
    p = lattice.params
    z = lattice.e0 + np.asarray(t, dtype=float)
    for _ in range(j - 1):
        z = _left_inverse(p, z)
    return invert_offset(p, lattice.e0, np.minimum(z, p.b))


def _left_inverse(params, z):
    from .afn_map import Branch, invert_branch

    return np.asarray(invert_branch(params, Branch.LEFT, np.clip(z, 0.0, 1.0)))


def build_schedule(params: MapParams, lattice: OrbitLattice, phi_cap: int) -> ReturnSchedule:
    """Enumerate the cylinders of f^phi with phi <= phi_cap."""
    if lattice.params != params:
        raise ValueError("lattice built for different parameters")
    K = lattice.depth_k
    taus, sig = lattice.tau_at_1, lattice.sigma
    levels, js, lo, hi = [], [], [], []
    unc = np.zeros(K)
    u = lattice.y_offset
    for k in range(K):
        j_lo = int(sig[k + 1]) + 1
        j_hi = int(phi_cap - taus[k])
        if j_hi > lattice.depth_n:
            raise LatticeDepthExceeded(
                f"phi_cap {phi_cap} needs depth_n >= {j_hi} at level {k}"
            )
        top = float(lattice.pullback_offset(k, u[j_lo - 1])) if k else u[j_lo - 1]
        if j_hi < j_lo:
            unc[k] = top
            continue
        jj = np.arange(j_lo, j_hi + 1)
        ends = lattice.pullback_offset(k, u[j_lo - 1 : j_hi + 1])
        levels.append(np.full(len(jj), k))
        js.append(jj)
        hi.append(ends[:-1])
        lo.append(ends[1:])
        unc[k] = ends[-1]
    return ReturnSchedule(
        lattice=lattice,
        phi_cap=int(phi_cap),
        level=np.concatenate(levels).astype(np.int64) if levels else np.zeros(0, np.int64),
        j=np.concatenate(js).astype(np.int64) if js else np.zeros(0, np.int64),
        off_left=np.concatenate(lo) if lo else np.zeros(0),
        off_right=np.concatenate(hi) if hi else np.zeros(0),
        uncovered_levels=unc,
        uncovered_top=float(lattice.one_minus_e[K]),
    )


# Gibbs-Markov certificate ---------------------------------------------------

@dataclass(frozen=True)
class GibbsMarkovCertificate:
    distortion_C: float
    theta: float
    min_image_measure: float
    max_cylinder_ratio: float


def certify_gibbs_markov(params: MapParams, schedule: ReturnSchedule, sample_budget: int = 2000,
                         seed: int = 0) -> GibbsMarkovCertificate:
    """Empirical distortion, contraction and big-image constants of F = f^phi.

    Pairs are drawn inside cells; for each pair the distortion quotient
    |log DF(y)/DF(x)| / |F(y) - F(x)| is computed through the inverse branch,
    using t = F(.) - e0 as the coordinate.
    """
    rng = np.random.default_rng(seed)
    lat = schedule.lattice
    n = len(schedule)
    if n == 0:
        raise ValueError("empty schedule")
    width_y = 1.0 - lat.e0
    cells = rng.choice(n, size=min(sample_budget, n), replace=False) if sample_budget < n else np.arange(n)
    worst = 0.0
    ratio = 0.0
    for c in cells:
        t = np.sort(rng.uniform(0.0, width_y, size=6))
        t = np.concatenate([[0.0], t, [width_y]])
        pts = schedule.branch_image(int(c), t)
        # inverse-branch derivative by finite ratios of the exact pullback
        dt = np.diff(t)
        dpts = np.diff(pts)
        inv_slope = dpts / dt
        mids = 0.5 * (t[1:] + t[:-1])
        logs = np.log(inv_slope)
        dl = np.abs(logs[:, None] - logs[None, :])
        dm = np.abs(mids[:, None] - mids[None, :])
        mask = dm > 0
        if mask.any():
            worst = max(worst, float((dl[mask] / dm[mask]).max()))
        ratio = max(ratio, float(schedule.width[c] / width_y))
    return GibbsMarkovCertificate(
        distortion_C=worst,
        theta=ratio,
        min_image_measure=width_y,
        max_cylinder_ratio=ratio,
    )
