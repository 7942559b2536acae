"""Ulam discretisations of the transfer operators of f, of F = f^phi and of f^tau.

Matrix entries are Lebesgue fractions P[i, m] = Leb(i & T^{-1} m) / Leb(i),
computed from exact branch-inverse endpoints.  Rows act on mass vectors from
the right (pi P is the pushed-forward mass).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.polynomial import chebyshev as cheb

from .afn_map import Branch, MapParams, invert_branch, invert_offset
from .inducing import OrbitLattice, ReturnSchedule

__all__ = [
    "Grid",
    "UlamOperator",
    "DensityVector",
    "ProfileBank",
    "CoverageError",
    "assemble_map_operator",
    "assemble_induced_operator",
    "assemble_first_return_operator",
    "invariant_density",
    "pushup_measure",
    "map_grid",
    "return_grid",
    "duality_residual",
    "map_pieces",
    "induced_pieces",
]


class CoverageError(ValueError):
    """Schedule leaves more uncovered mass than allowed."""


# grids -----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Grid:
    breakpoints: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        if bp.ndim != 1 or len(bp) < 2 or np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", bp)

    @classmethod
    def uniform(cls, a: float, b: float, cells: int) -> "Grid":
        bp = a + (b - a) * np.arange(cells + 1) / cells
        bp[-1] = b
        return cls(bp)

    def with_knots(self, knots) -> "Grid":
        """Copy with the nearest interior breakpoint moved onto each knot."""
        bp = self.breakpoints.copy()
        for x in np.atleast_1d(np.asarray(knots, dtype=float)):
            if not (bp[0] < x < bp[-1]):
                continue
            i = int(np.clip(np.argmin(np.abs(bp - x)), 1, len(bp) - 2))
            if bp[i - 1] < x < bp[i + 1]:
                bp[i] = x
        return Grid(bp)

    @property
    def domain(self) -> tuple:
        return float(self.breakpoints[0]), float(self.breakpoints[-1])

    @property
    def cells(self) -> int:
        return len(self.breakpoints) - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.breakpoints)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.breakpoints[1:] + self.breakpoints[:-1])

    def locate(self, x) -> np.ndarray:
        """Cell index of x (right endpoint goes to the last cell)."""
        idx = np.searchsorted(self.breakpoints, x, side="right") - 1
        return np.clip(idx, 0, self.cells - 1)

    def cell_average(self, func, nodes: int = 4) -> np.ndarray:
        """Gauss-Legendre cell averages of a vectorised function."""
        t, w = np.polynomial.legendre.leggauss(nodes)
        lo, hi = self.breakpoints[:-1], self.breakpoints[1:]
        pts = 0.5 * (lo + hi)[:, None] + 0.5 * (hi - lo)[:, None] * t[None, :]
        return (func(pts) * w[None, :]).sum(axis=1) / 2.0


def return_grid(lattice: OrbitLattice, cells: int) -> Grid:
    """Uniform grid on Y with breakpoints on the orbit points f^{tau_k}(1).

    The first-return density jumps where the image of the partial top branch
    ends, and at the forward images of that point, which are the orbit
    points of 1.
    """
    return Grid.uniform(lattice.e0, 1.0, cells).with_knots(lattice.orbit_of_1[1:])


def map_grid(cells: int, corner: float = 0.05, corner_share: float = 0.25,
             decades: float = 11.0) -> Grid:
    """Grid on [0, 1], geometric below ``corner`` and uniform above.

    Breakpoints are images of i/cells under a fixed monotone map, so the grid
    with 2n cells refines the grid with n cells.
    """
    s = np.arange(cells + 1) / cells
    lam = decades * np.log(10.0)
    x = np.where(
        s <= corner_share,
        corner * np.exp(-lam * (corner_share - s) / corner_share),
        corner + (s - corner_share) * (1.0 - corner) / (1.0 - corner_share),
    )
    x[0] = 0.0
    x[-1] = 1.0
    return Grid(x)


# operator and density containers --------------------------------------------

@dataclass(frozen=True, eq=False)
class UlamOperator:
    """Row-stochastic Ulam matrix on a grid.

    ``raw`` holds the covered transition fractions; ``remainder`` is the
    uncovered share of each row, which ``matrix`` routes along the limiting
    image profile of long branches.
    """

    grid: Grid
    matrix: object
    kind: str
    raw: object = None
    remainder: np.ndarray = None
    flagged: bool = False

    @property
    def dense(self) -> np.ndarray:
        m = self.matrix
        return m.toarray() if sp.issparse(m) else np.asarray(m)

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def push(self, mass: np.ndarray) -> np.ndarray:
        """Mass vector after one step (mass @ P)."""
        if sp.issparse(self.matrix):
            return self.matrix.T @ mass
        return mass @ self.matrix

    def pull(self, values: np.ndarray) -> np.ndarray:
        """Cell values of w o T (P @ w)."""
        return self.matrix @ values

    def eigenvalues(self, k: int = 4) -> np.ndarray:
        """Leading eigenvalues sorted by decreasing modulus."""
        n = self.grid.cells
        if sp.issparse(self.matrix) and n > 2500:
            vals = spla.eigs(self.matrix.T.tocsc(), k=min(k, n - 2), which="LM",
                             return_eigenvectors=False, tol=1e-12, maxiter=20000)
        else:
            vals = scipy.linalg.eigvals(self.dense)
        vals = vals[np.argsort(-np.abs(vals), kind="stable")]
        return vals[:k]

    def spectral_gap(self) -> tuple:
        """(leading eigenvalue, second modulus, gap = 1 - second modulus)."""
        vals = self.eigenvalues(3)
        lead = vals[0]
        second = float(np.abs(vals[1])) if len(vals) > 1 else 0.0
        return complex(lead), second, 1.0 - second

    def export_coo(self, path) -> None:
        m = sp.coo_matrix(self.matrix)
        order = np.lexsort((m.col, m.row))
        with open(path, "w", newline="\n") as fh:
            fh.write("row,col,value\n")
            for r, c, v in zip(m.row[order], m.col[order], m.data[order]):
                fh.write(f"{int(r)},{int(c)},{float(v)!r}\n")


@dataclass(frozen=True, eq=False)
class DensityVector:
    """Piecewise-constant density: ``weights[i]`` is the value on cell i."""

    grid: Grid
    weights: np.ndarray
    normalization: float = 1.0

    @property
    def cell_mass(self) -> np.ndarray:
        return self.weights * self.grid.widths

    def cumulative(self, x) -> np.ndarray:
        """Mass of [domain left, x]."""
        x = np.asarray(x, dtype=float)
        bp = self.grid.breakpoints
        cm = np.concatenate([[0.0], np.cumsum(self.cell_mass)])
        idx = self.grid.locate(np.clip(x, bp[0], bp[-1]))
        return cm[idx] + self.weights[idx] * (np.clip(x, bp[0], bp[-1]) - bp[idx])

    def mass(self, a, b) -> np.ndarray:
        """Mass of [a, b); a and b may be arrays."""
        return self.cumulative(b) - self.cumulative(a)

    def mass_offsets(self, anchor, lo, hi) -> np.ndarray:
        """Mass of [anchor + lo, anchor + hi) for intervals inside one cell or
        spanning cells; accurate for tiny widths."""
        anchor = np.broadcast_to(np.asarray(anchor, dtype=float), np.shape(lo))
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        ia = self.grid.locate(anchor + lo)
        ib = self.grid.locate(anchor + hi)
        same = ia == ib
        out = np.where(same, self.weights[ia] * (hi - lo), 0.0)
        if np.any(~same):
            out = np.where(same, out, self.mass(anchor + lo, anchor + hi))
        return out

    def __call__(self, x) -> np.ndarray:
        return self.weights[self.grid.locate(x)]

    def export_csv(self, path) -> None:
        bp = self.grid.breakpoints
        with open(path, "w", newline="\n") as fh:
            fh.write("cell_left,cell_right,weight\n")
            for a, b, w in zip(bp[:-1], bp[1:], self.weights):
                fh.write(f"{float(a)!r},{float(b)!r},{float(w)!r}\n")


# merged-breakpoint overlap ------------------------------------------------------

def _overlaps(grid_pts, piece_pts):
    """Overlap lengths of two partitions of a common interval.

    Returns (grid index, piece index, length) for every nonempty segment of
    the common refinement.  Both inputs are increasing arrays with equal
    first and last entries.
    """
    pts = np.union1d(grid_pts, piece_pts)
    lo = max(grid_pts[0], piece_pts[0])
    hi = min(grid_pts[-1], piece_pts[-1])
    pts = pts[(pts >= lo) & (pts <= hi)]
    mids = 0.5 * (pts[1:] + pts[:-1])
    lens = np.diff(pts)
    gi = np.searchsorted(grid_pts, mids, side="right") - 1
    pi = np.searchsorted(piece_pts, mids, side="right") - 1
    keep = lens > 0
    return gi[keep], pi[keep], lens[keep]


# map operator -------------------------------------------------------------------

def assemble_map_operator(params: MapParams, grid: Grid) -> UlamOperator:
    """Ulam matrix of f on a grid of [0, 1]."""
    if grid.domain != (0.0, 1.0):
        raise ValueError("map operator needs a grid on [0, 1]")
    bp = grid.breakpoints
    e0 = params.e0
    M = grid.cells
    rows, cols, vals = [], [], []

    # left branch [0, e0) onto [0, 1)
    pre_left = np.asarray(invert_branch(params, Branch.LEFT, bp))
    pre_left[-1] = e0
    g_left = np.concatenate([bp[bp < e0], [e0]])
    gi, pi, ln = _overlaps(g_left, pre_left)
    rows.append(gi)
    cols.append(pi)
    vals.append(ln)

    # right branch [e0, 1] onto [0, b], in offsets from e0
    targets = bp[bp <= params.b]
    if targets[-1] < params.b:
        targets = np.concatenate([targets, [params.b]])
    pre_right = invert_offset(params, e0, targets)
    pre_right[0] = 0.0
    pre_right[-1] = 1.0 - e0
    i0 = int(np.searchsorted(bp, e0, side="right") - 1)
    g_right = np.concatenate([[0.0], bp[i0 + 1 :] - e0])
    gi, pi, ln = _overlaps(g_right, pre_right)
    rows.append(gi + i0)
    cols.append(np.minimum(pi, M - 1))
    vals.append(ln)
    if params.b == 1.0:
        pass  # f(1) = 0 is a single point and carries no mass

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals) / grid.widths[rows]
    P = sp.csr_matrix((vals, (rows, cols)), shape=(M, M))
    P.sum_duplicates()
    rs = np.asarray(P.sum(axis=1)).ravel()
    P = sp.diags(1.0 / rs) @ P
    return UlamOperator(grid=grid, matrix=P.tocsr(), kind="MapF", raw=P, remainder=1.0 - rs)


# branch profiles for the induced maps ----------------------------------------------

class _LevelMap:
    """Chebyshev interpolant of s -> G_k^{-1}(e0 + s) - e_k = s * g(s)."""

    def __init__(self, lattice: OrbitLattice, k: int, smax: float, deg: int = 24, tol: float = 1e-13):
        self.k = k
        self.smax = smax
        self.lattice = lattice
        self.exact_only = False
        if k == 0:
            return
        slope0 = float(lattice.pullback_derivative(k, np.array([0.0]))[0])
        rng = np.random.default_rng(k)
        test = np.sort(np.concatenate([smax * rng.random(64), smax * 10.0 ** -rng.uniform(0, 12, 32)]))
        exact = lattice.pullback_offset(k, test)
        while True:
            nodes = 0.5 * smax * (1.0 + np.cos(np.pi * (np.arange(deg + 1) + 0.5) / (deg + 1)))
            vals = lattice.pullback_offset(k, nodes) / nodes
            self.coef = cheb.chebfit(2.0 * nodes / smax - 1.0, vals, deg)
            approx = self(test)
            err = np.max(np.abs(approx - exact) / np.maximum(np.abs(exact), 1e-300))
            if err < tol:
                break
            if deg >= 96:
                warnings.warn(f"level {k}: Chebyshev pullback err {err:.2e}; using exact propagation")
                self.exact_only = True
                break
            deg *= 2
        self.slope0 = slope0
        self.err = err if not self.exact_only else 0.0

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.k == 0:
            return s.copy()
        if self.exact_only:
            return self.lattice.pullback_offset(self.k, s)
        return s * cheb.chebval(2.0 * s / self.smax - 1.0, self.coef)


@dataclass(eq=False)
class ProfileBank:
    """Image profiles of the branches of F = f^phi on a grid of Y.

    A subcell p is the intersection of grid cell ``row[p]`` with a schedule
    cell; ``leb[p]`` is its Lebesgue length and ``table[qrow[p]]`` its
    normalised image profile, i.e. Leb(p & F^{-1}(grid cell m)) / leb[p].
    Profiles of cells at level k >= 1 with j > ``j_exact`` reuse the level-0
    profile of the same j (the pullback G_k^{-1} is affine to within its
    distortion over a first-return cylinder).  Branches with j > ``profile_cap``
    share the profile of j = ``profile_cap``; normalised profiles converge as
    j grows, so this only touches cells of tiny total mass.
    """

    schedule: ReturnSchedule
    grid: Grid
    j_exact: int = 400
    profile_cap: int = 4000
    row: np.ndarray = field(init=False)
    phi: np.ndarray = field(init=False)
    level: np.ndarray = field(init=False)
    jidx: np.ndarray = field(init=False)
    leb: np.ndarray = field(init=False)
    qrow: np.ndarray = field(init=False)
    table: np.ndarray = field(init=False)

    def __post_init__(self):
        sched, grid = self.schedule, self.grid
        lat = sched.lattice
        e0 = lat.e0
        if abs(grid.domain[0] - e0) > 1e-15 or grid.domain[1] != 1.0:
            raise ValueError("grid must cover Y = [e0, 1]")
        bp = grid.breakpoints
        M = grid.cells
        params = lat.params
        J = min(int(sched.j.max()) if len(sched) else 1, max(self.profile_cap, self.j_exact))
        # U[j] = T_j^{-1}(grid) - e0 along the first-return branch j
        U = np.full((J + 1, M + 1), np.nan)
        z = bp.copy()
        z[0] = e0
        for jj in range(1, J + 1):
            if jj > 1:
                z = np.asarray(invert_branch(params, Branch.LEFT, z))
            if np.all(z <= params.b):
                U[jj] = invert_offset(params, e0, z)
                U[jj, -1] = lat.y_offset[jj - 1]
                U[jj, 0] = lat.y_offset[jj]
        self.U = U
        levels = sorted(set(int(k) for k in np.unique(sched.level)))
        self.level_maps = {}
        for k in levels:
            smax = float(lat.y_offset[int(lat.sigma[k + 1])])
            self.level_maps[k] = _LevelMap(lat, k, smax)

        rows, phis, levs, js, lebs, qrows = [], [], [], [], [], []
        table = [np.zeros(M)]  # row 0 unused placeholder
        shared = {}

        def shared_row(jj):
            jj = min(jj, J)
            if jj not in shared:
                pts = U[jj]
                table.append(np.diff(pts) / (pts[-1] - pts[0]))
                shared[jj] = len(table) - 1
            return shared[jj]

        anchors = lat.e
        for k in levels:
            sel = np.nonzero(sched.level == k)[0]
            jj = sched.j[sel]
            lo, hi = sched.off_left[sel], sched.off_right[sel]
            ia = grid.locate(anchors[k] + lo)
            ib = grid.locate(np.nextafter(anchors[k] + hi, -np.inf))
            ib = np.maximum(ib, ia)
            lm = self.level_maps[k]
            for c in range(len(sel)):
                j_c = int(jj[c])
                if ia[c] == ib[c]:
                    if k == 0 or j_c > self.j_exact:
                        q = shared_row(j_c)
                    else:
                        pts = lm(U[j_c])
                        table.append(np.diff(pts) / (pts[-1] - pts[0]))
                        q = len(table) - 1
                    rows.append(int(ia[c]))
                    lebs.append(float(hi[c] - lo[c]))
                    qrows.append(q)
                    phis.append(int(lat.tau_at_1[k] + j_c))
                    levs.append(k)
                    js.append(j_c)
                    continue
                # cell spanning several grid cells: split by exact overlaps
                pts = lm(U[min(j_c, J)])
                pts[0], pts[-1] = lo[c], hi[c]
                gpts = np.concatenate([[lo[c]], bp[ia[c] + 1 : ib[c] + 1] - anchors[k], [hi[c]]])
                gi, pi, ln = _overlaps(gpts, pts)
                for g in np.unique(gi):
                    msk = gi == g
                    prof = np.zeros(M)
                    np.add.at(prof, pi[msk], ln[msk])
                    tot = prof.sum()
                    table.append(prof / tot)
                    rows.append(int(ia[c] + g))
                    lebs.append(float(tot))
                    qrows.append(len(table) - 1)
                    phis.append(int(lat.tau_at_1[k] + j_c))
                    levs.append(k)
                    js.append(j_c)
        self.row = np.array(rows, dtype=np.int64)
        self.phi = np.array(phis, dtype=np.int64)
        self.level = np.array(levs, dtype=np.int64)
        self.jidx = np.array(js, dtype=np.int64)
        self.leb = np.array(lebs)
        self.qrow = np.array(qrows, dtype=np.int64)
        self.table = np.array(table)

    @property
    def tail_profile(self) -> np.ndarray:
        """Image profile of the longest first-return branch in the bank."""
        jj = int(np.nanmax(np.nonzero(np.all(np.isfinite(self.U), axis=1))[0]))
        pts = self.U[jj]
        return np.diff(pts) / (pts[-1] - pts[0])

    @property
    def n_sub(self) -> int:
        return len(self.row)

    def profiles(self, idx=None) -> np.ndarray:
        q = self.qrow if idx is None else self.qrow[idx]
        return self.table[q]

    def weight_matrix(self, mask=None) -> sp.csr_matrix:
        """Sparse (cells x table rows) matrix S with S[i, q] = sum of leb/Leb(i)."""
        M = self.grid.cells
        sel = np.ones(self.n_sub, bool) if mask is None else mask
        vals = self.leb[sel] / self.grid.widths[self.row[sel]]
        S = sp.csr_matrix((vals, (self.row[sel], self.qrow[sel])), shape=(M, len(self.table)))
        S.sum_duplicates()
        return S

    def covered_fraction(self) -> np.ndarray:
        M = self.grid.cells
        out = np.zeros(M)
        np.add.at(out, self.row, self.leb)
        return out / self.grid.widths


def assemble_induced_operator(schedule: ReturnSchedule, grid_on_Y: Grid, max_uncovered: float = 1e-3,
                              j_exact: int = 400, profile_cap: int = 4000,
                              bank: ProfileBank | None = None) -> UlamOperator:
    """Ulam matrix of F = f^phi; uncovered row mass follows the long-branch profile."""
    if schedule.uncovered > max_uncovered * (1.0 - schedule.lattice.e0):
        raise CoverageError(
            f"uncovered Lebesgue mass {schedule.uncovered:.3e} exceeds cap {max_uncovered:g} of |Y|"
        )
    bank = bank or ProfileBank(schedule, grid_on_Y, j_exact=j_exact, profile_cap=profile_cap)
    raw = np.asarray((bank.weight_matrix() @ bank.table))
    rem = np.clip(1.0 - raw.sum(axis=1), 0.0, None)
    # uncovered pieces sit on long branches, whose image profiles converge
    P = raw + rem[:, None] * bank.tail_profile[None, :]
    P /= P.sum(axis=1)[:, None]
    op = UlamOperator(grid=grid_on_Y, matrix=P, kind="InducedF", raw=raw, remainder=rem,
                      flagged=bool(np.any(rem > 1e-12)))
    object.__setattr__(op, "bank", bank)
    return op


def assemble_first_return_operator(lattice: OrbitLattice, grid_on_Y: Grid, tau_cap: int) -> UlamOperator:
    """Ulam matrix of the first return map f^tau on Y (branches up to tau_cap)."""
    params = lattice.params
    e0 = lattice.e0
    bp = grid_on_Y.breakpoints
    M = grid_on_Y.cells
    if tau_cap > lattice.depth_n:
        raise ValueError("tau_cap exceeds lattice depth")
    s1 = int(lattice.sigma[1])
    p1 = float(lattice.orbit_of_1[1])
    raw = np.zeros((M, M))
    goff = bp - e0
    goff[0] = 0.0
    z = bp.copy()
    z[0] = e0
    for jj in range(1, tau_cap + 1):
        if jj > 1:
            z = np.asarray(invert_branch(params, Branch.LEFT, z))
        if jj < s1:
            continue
        if jj == s1:
            # partial top branch [y_s1, 1) onto [e0, p1)
            tgt = np.concatenate([bp[bp < p1], [p1]])
            zt = tgt.copy()
            zt[0] = e0
            for _ in range(jj - 1):
                zt = np.asarray(invert_branch(params, Branch.LEFT, zt))
            pts = invert_offset(params, e0, np.minimum(zt, params.b))
            pts[0] = lattice.y_offset[jj]
            pts[-1] = 1.0 - e0
        else:
            pts = invert_offset(params, e0, z)
            pts[0] = lattice.y_offset[jj]
            pts[-1] = lattice.y_offset[jj - 1]
            pts_last = pts
        lo, hi = pts[0], pts[-1]
        ia = int(grid_on_Y.locate(e0 + lo))
        ib = int(grid_on_Y.locate(np.nextafter(e0 + hi, -np.inf)))
        if ia == ib:
            raw[ia, : len(pts) - 1] += np.diff(pts)
        else:
            gpts = np.concatenate([[lo], goff[ia + 1 : ib + 1], [hi]])
            gi, pi, ln = _overlaps(gpts, pts)
            np.add.at(raw, (ia + gi, pi), ln)
    raw /= grid_on_Y.widths[:, None]
    rem = np.clip(1.0 - raw.sum(axis=1), 0.0, None)
    # the uncovered piece [e0, y_cap) is a union of long branches
    tail = np.diff(pts_last) / (pts_last[-1] - pts_last[0])
    P = raw + rem[:, None] * tail[None, :]
    P /= P.sum(axis=1)[:, None]
    return UlamOperator(grid=grid_on_Y, matrix=P, kind="FirstReturn", raw=raw, remainder=rem,
                        flagged=bool(np.any(rem > 1e-12)))


# invariant density ------------------------------------------------------------------

def invariant_density(op: UlamOperator, maxiter: int = 10000, tol: float = 1e-13) -> DensityVector:
    """Normalised fixed mass vector of a row-stochastic Ulam matrix, as a density."""
    M = op.grid.cells
    P = op.matrix
    if sp.issparse(P):
        A = (P.T - sp.identity(M, format="csr")).tolil()
        A[0, :] = np.ones(M)
        rhs = np.zeros(M)
        rhs[0] = 1.0
        pi = spla.spsolve(A.tocsc(), rhs)
    else:
        A = P.T - np.eye(M)
        A[0, :] = 1.0
        rhs = np.zeros(M)
        rhs[0] = 1.0
        pi = np.linalg.solve(A, rhs)
    pi = np.clip(np.real(pi), 0.0, None)
    pi /= pi.sum()
    # power-iteration polish; also the fallback when the direct solve is poor
    for it in range(maxiter):
        nxt = op.push(pi)
        nxt /= nxt.sum()
        if np.abs(nxt - pi).sum() < tol:
            pi = nxt
            break
        pi = nxt
    else:
        raise RuntimeError("invariant density iteration did not converge")
    return DensityVector(grid=op.grid, weights=pi / op.grid.widths, normalization=1.0)


# push-up of mu_0 to the tower levels --------------------------------------------------

@dataclass(frozen=True)
class LevelMeasures:
    """Total masses m_j(Y-levels) = mu_0(phi > j) and their partial sums."""

    totals: np.ndarray
    partial_sums: np.ndarray
    omitted_bracket: float


def pushup_measure(schedule: ReturnSchedule, h: DensityVector, j_max: int) -> LevelMeasures:
    """Level masses m_j = mu_0(phi > j), j = 0..j_max, of the tower measure.

    m_j(A) = mu_0(f^{-j}A & {phi > j}); the totals m_j(X) equal mu_0(phi > j),
    so their partial sums bracket phi_bar (finite case) or grow without bound.
    """
    w = h.mass_offsets(schedule.anchor, schedule.off_left, schedule.off_right)
    phi = schedule.phi
    counts = np.bincount(np.minimum(phi, j_max + 1), weights=w, minlength=j_max + 2)
    # mu_0(phi > j) = sum_{phi >= j+1}
    tail = np.cumsum(counts[::-1])[::-1]
    uncovered = 1.0 - w.sum()
    totals = tail[1 : j_max + 2] + uncovered
    if uncovered > 1e-6:
        warnings.warn(f"uncovered mu_0 mass {uncovered:.2e} added to every level")
    return LevelMeasures(totals=totals, partial_sums=np.cumsum(totals), omitted_bracket=float(uncovered))


# duality check -------------------------------------------------------------------------

def _forward_counts(params: MapParams, x: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """f^counts[i](x[i]) by plain forward iteration."""
    order = np.argsort(-counts, kind="stable")
    y = x[order].copy()
    c = counts[order]
    b, p, e0 = params.b, 1.0 + params.alpha, params.e0
    neg = -c
    for step in range(int(c.max(initial=0))):
        k = int(np.searchsorted(neg, -step, side="left"))
        z = y[:k]
        w = z + b * z ** p
        w = np.where(z >= e0, w - 1.0, w)
        y[:k] = np.clip(np.where(w >= 1.0, w - 1.0, w), 0.0, 1.0)
    out = np.empty_like(y)
    out[order] = y
    return out


def map_pieces(params: MapParams, pieces: int = 4096):
    """Continuity intervals of f, subdivided, with f as the forward map."""
    e0 = params.e0
    left = np.linspace(0.0, e0, pieces // 2 + 1)
    right = np.linspace(e0, 1.0, pieces // 2 + 1)
    lo = np.concatenate([left[:-1], right[:-1]])
    hi = np.concatenate([left[1:], right[1:]])
    hi[pieces // 2 - 1] = np.nextafter(e0, 0.0)

    def forward(x, idx):
        return _forward_counts(params, x, np.ones(len(x), dtype=np.int64))

    return lo, hi, forward


def induced_pieces(schedule: ReturnSchedule):
    """Schedule cells as continuity intervals of F = f^phi, with F as the forward map."""
    lo, hi = schedule.left, schedule.right
    phi = schedule.phi
    params = schedule.params

    def forward(x, idx):
        return _forward_counts(params, x, phi[idx])

    return lo, hi, forward


def duality_residual(op: UlamOperator, v, w, pieces, nodes: int = 16) -> float:
    """|sum_{i,m} vbar_i Leb(i) raw[i, m] wbar_m - int v . w o T dLeb|.

    The right side is Gauss-Legendre quadrature over the continuity intervals
    ``pieces = (lo, hi, forward)`` of T, with T evaluated by forward
    iteration.  Only covered pieces enter, matching the ``raw`` matrix.
    """
    grid = op.grid
    raw = op.raw if op.raw is not None else op.matrix
    vb = grid.cell_average(v, nodes=8)
    wb = grid.cell_average(w, nodes=8)
    lhs = float((vb * grid.widths) @ (raw @ wb))
    lo, hi, forward = pieces
    t, wt = np.polynomial.legendre.leggauss(nodes)
    half = 0.5 * (hi - lo)
    x = (0.5 * (lo + hi))[:, None] + half[:, None] * t[None, :]
    idx = np.repeat(np.arange(len(lo)), nodes)
    tx = forward(x.ravel(), idx).reshape(x.shape)
    rhs = float(((v(x) * w(tx)) * wt[None, :]).sum(axis=1) @ half)
    return abs(lhs - rhs)
