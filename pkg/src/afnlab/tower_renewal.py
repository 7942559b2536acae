"""Young tower over F = f^phi, its renewal operator families, and scalar renewal tools.

The tower is discretised on the subcells of a :class:`~afnlab.ulam.ProfileBank`
(grid cell of Y intersected with a schedule cell).  Tower mass at height
l >= 1 is kept per subcell; mass on the base is kept per grid cell and spread
over the subcells of a grid cell in proportion to their length.  A subcell p
climbs for phi_p steps and then returns to the base with its image profile.

All operators act on mass (row) vectors: ``u @ R_n`` is the mass returning
at time n, and T_n = sum_j R_j T_{n-j}.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .inducing import ReturnSchedule
from .ulam import DensityVector, ProfileBank

__all__ = [
    "TowerModel",
    "TowerState",
    "OperatorFamily",
    "ScalarRenewal",
    "QuadratureError",
    "build_tower",
    "operator_family",
    "tower_return_matrices",
    "check_renewal",
    "check_decomposition",
    "base_renewal",
    "scalar_renewal",
    "coefficient_extract",
    "export_residuals",
]


class QuadratureError(RuntimeError):
    """Contour quadrature failed to converge under node doubling."""


# tower ---------------------------------------------------------------------------

@dataclass(eq=False)
class TowerModel:
    """Discrete tower with base grid cells and per-subcell upper levels."""

    bank: ProfileBank
    density: DensityVector
    j_max: int
    phi: np.ndarray = field(init=False)
    row: np.ndarray = field(init=False)
    frac: np.ndarray = field(init=False)
    mass: np.ndarray = field(init=False)

    def __post_init__(self):
        b = self.bank
        g = b.grid
        self.phi = b.phi
        self.row = b.row
        self.frac = b.leb / g.widths[b.row]
        self.mass = self.density.weights[b.row] * b.leb
        self.uncovered_mass = float(max(0.0, self.density.cell_mass.sum() - self.mass.sum()))

    @property
    def base_grid(self):
        return self.bank.grid

    @property
    def cells(self) -> int:
        return self.bank.grid.cells

    @property
    def n_sub(self) -> int:
        return self.bank.n_sub

    @property
    def phi_by_cell(self) -> np.ndarray:
        return self.phi

    def level(self, j: int) -> np.ndarray:
        """Subcells present at height j, i.e. phi > j."""
        return np.nonzero(self.phi > j)[0]

    def level_measure(self, j: int) -> np.ndarray:
        return self.mass[self.phi > j]

    @property
    def level_totals(self) -> np.ndarray:
        """mu_Delta of heights 0..j_max; uncovered base mass sits on every height."""
        counts = np.bincount(np.minimum(self.phi, self.j_max + 1), weights=self.mass,
                             minlength=self.j_max + 2)
        tail = np.cumsum(counts[::-1])[::-1]
        return tail[1 : self.j_max + 2] + self.uncovered_mass

    @property
    def truncated_mass(self) -> float:
        return float(self.level_totals.sum())

    def split(self, u: np.ndarray) -> np.ndarray:
        """Base grid mass -> subcell masses (uniform within grid cells)."""
        return u[..., self.row] * self.frac

    def returned(self, m: np.ndarray, idx=None) -> np.ndarray:
        """Subcell masses returning to the base -> base grid mass."""
        b = self.bank
        q = b.qrow if idx is None else b.qrow[idx]
        coef = np.bincount(q, weights=m, minlength=len(b.table))
        return coef @ b.table


def build_tower(schedule: ReturnSchedule, h: DensityVector, j_max: int,
                bank: ProfileBank | None = None, j_exact: int = 400, profile_cap: int = 4000) -> TowerModel:
    """Tower over the cells of ``schedule`` with base measure ``h`` (mu_0)."""
    if j_max < 0:
        raise ValueError("j_max must be non-negative")
    bank = bank or ProfileBank(schedule, h.grid, j_exact=j_exact, profile_cap=profile_cap)
    if bank.grid is not h.grid and not np.array_equal(bank.grid.breakpoints, h.grid.breakpoints):
        raise ValueError("density and profile bank use different grids")
    tower = TowerModel(bank=bank, density=h, j_max=int(j_max))
    omitted = tower.mass[tower.phi > j_max + 1].sum() + tower.uncovered_mass
    if j_max > 0 and omitted > 1e-3:
        warnings.warn(f"mass {omitted:.3e} climbs above the truncation height {j_max}")
    return tower


@dataclass(eq=False)
class TowerState:
    """Mass on the truncated tower: ``base`` per grid cell, ``upper[l - 1]`` per
    subcell at height l = 1..height-1."""

    base: np.ndarray
    upper: np.ndarray

    @classmethod
    def zeros(cls, tower: TowerModel, height: int) -> "TowerState":
        return cls(np.zeros(tower.cells), np.zeros((max(height - 1, 0), tower.n_sub)))

    @property
    def height(self) -> int:
        return self.upper.shape[0] + 1

    def copy(self) -> "TowerState":
        return TowerState(self.base.copy(), self.upper.copy())

    def norm1(self) -> float:
        return float(np.abs(self.base).sum() + np.abs(self.upper).sum())

    def __sub__(self, other: "TowerState") -> "TowerState":
        return TowerState(self.base - other.base, self.upper - other.upper)

    def __add__(self, other: "TowerState") -> "TowerState":
        return TowerState(self.base + other.base, self.upper + other.upper)


def tower_step(tower: TowerModel, state: TowerState) -> tuple:
    """One application of the tower transfer operator.

    Returns (new state, mass lost above the truncation height).
    """
    H = state.height
    phi = tower.phi
    sub0 = tower.split(state.base)
    ret = np.where(phi == 1, sub0, 0.0)
    new_up = np.zeros_like(state.upper)
    lost = 0.0
    if H > 1:
        new_up[0] = np.where(phi > 1, sub0, 0.0)
        for l in range(1, H):
            cur = state.upper[l - 1]
            ret = ret + np.where(phi == l + 1, cur, 0.0)
            climb = np.where(phi > l + 1, cur, 0.0)
            if l < H - 1:
                new_up[l] = climb
            else:
                lost += float(np.abs(climb).sum())
    else:
        lost = float(np.abs(np.where(phi > 1, sub0, 0.0)).sum())
    return TowerState(tower.returned(ret), new_up), lost


# operator families ---------------------------------------------------------------

@dataclass(eq=False)
class OperatorFamily:
    """R_n, T_n (matrices on base grid mass) and the level-shift maps A_n, B_n, C_n."""

    tower: TowerModel
    n_max: int
    R: list = field(default_factory=list)
    T: list = field(default_factory=list)

    def A(self, n: int, u: np.ndarray, height: int) -> TowerState:
        """A_n u = L^n(1_{phi > n} u) for base mass u: placed at height n."""
        st = TowerState.zeros(self.tower, height)
        if n == 0:
            st.base = u.copy()
        elif n < height:
            st.upper[n - 1] = np.where(self.tower.phi > n, self.tower.split(u), 0.0)
        return st

    def B(self, n: int, v: TowerState) -> np.ndarray:
        """Base mass of the off-base part of v that first reaches the base at time n."""
        if n == 0:
            return v.base.copy()
        phi = self.tower.phi
        m = np.zeros(self.tower.n_sub)
        for l in range(1, v.height):
            m += np.where(phi - l == n, v.upper[l - 1], 0.0)
        return self.tower.returned(m)

    def C(self, n: int, v: TowerState) -> TowerState:
        """C_n v = L^n of the off-base part of v that has not returned by time n."""
        phi = self.tower.phi
        st = TowerState.zeros(self.tower, v.height)
        if n == 0:
            st.upper = v.upper.copy()
            return st
        for l in range(1, v.height):
            dest = l + n
            if dest < v.height:
                st.upper[dest - 1] += np.where(phi - l > n, v.upper[l - 1], 0.0)
        return st

    def sum_R(self) -> np.ndarray:
        out = np.zeros((self.tower.cells, self.tower.cells))
        for r in self.R[1:]:
            out += r.toarray()
        return out


def operator_family(tower: TowerModel, n_max: int) -> OperatorFamily:
    """R_1..R_n_max from the profile bank and T_0..T_n_max by the renewal recursion."""
    bank = tower.bank
    M = tower.cells
    fam = OperatorFamily(tower=tower, n_max=int(n_max))
    fam.R.append(sp.csr_matrix((M, M)))
    for n in range(1, n_max + 1):
        S = bank.weight_matrix(bank.phi == n)
        Rn = S @ bank.table
        fam.R.append(sp.csr_matrix(Rn))
    fam.T.append(np.eye(M))
    for n in range(1, n_max + 1):
        acc = np.zeros((M, M))
        for j in range(1, n + 1):
            Rj = fam.R[j]
            if Rj.nnz:
                acc += Rj @ fam.T[n - j]
        fam.T.append(acc)
    return fam


def tower_return_matrices(tower: TowerModel, n_max: int, batch: int = 256) -> list:
    """1_Y L^n 1_Y for n = 0..n_max by direct simulation of the tower.

    Every base cell is released as a unit mass and pushed through the tower.
    Heights are held in a shift register: the mass at height l of subcell p
    at time n is what entered p from the base at time n - l.  Subcells with
    phi > n_max cannot return within the horizon and are dropped.
    """
    M = tower.cells
    act = np.nonzero(tower.phi <= n_max)[0]
    phi = tower.phi[act]
    row = tower.row[act]
    frac = tower.frac[act]
    qs, qinv = np.unique(tower.bank.qrow[act], return_inverse=True)
    gather = sp.csr_matrix((np.ones(len(act)), (np.arange(len(act)), qinv)), shape=(len(act), len(qs)))
    table = tower.bank.table[qs]
    cols_act = np.arange(len(act))
    out = [np.zeros((M, M)) for _ in range(n_max + 1)]
    for start in range(0, M, batch):
        cols = np.arange(start, min(start + batch, M))
        nb = len(cols)
        base = np.zeros((nb, M))
        base[np.arange(nb), cols] = 1.0
        out[0][cols] = base
        entered = np.zeros((n_max + 1, nb, len(act)))
        for n in range(1, n_max + 1):
            entered[n - 1] = base[:, row] * frac
            back = n - phi
            ok = back >= 0
            ret = np.zeros((nb, len(act)))
            ret[:, ok] = entered[back[ok], :, cols_act[ok]].T
            base = np.asarray(gather.T @ ret.T).T @ table
            out[n][cols] = base
    return out


def check_renewal(family: OperatorFamily, direct: list | None = None) -> np.ndarray:
    """||T_n - sum_j R_j T_{n-j}|| with T_n from direct tower simulation.

    The norm is the operator norm on mass vectors (largest absolute row sum).
    """
    N = family.n_max
    direct = direct if direct is not None else tower_return_matrices(family.tower, N)
    res = np.zeros(N + 1)
    res[0] = np.abs(direct[0] - np.eye(family.tower.cells)).sum(axis=1).max()
    for n in range(1, N + 1):
        acc = np.zeros_like(direct[n])
        for j in range(1, n + 1):
            if family.R[j].nnz:
                acc += family.R[j] @ direct[n - j]
        res[n] = np.abs(direct[n] - acc).sum(axis=1).max()
    return res


def check_decomposition(tower: TowerModel, family: OperatorFamily, v: TowerState, n_max: int) -> tuple:
    """Residual of L^n v = sum_{n1+n2+n3=n} A_{n1} T_{n2} B_{n3} v + C_n v.

    The left side is obtained by n explicit tower steps; the right side from
    the operator families.  Returns (residuals, truncation budget), both per n.
    """
    if n_max > family.n_max:
        raise ValueError("family too short for n_max")
    H = v.height
    lhs = v.copy()
    lost = np.zeros(n_max + 1)
    res = np.zeros(n_max + 1)
    b = [family.B(n, v) for n in range(n_max + 1)]
    for n in range(n_max + 1):
        if n > 0:
            lhs, dl = tower_step(tower, lhs)
            lost[n] = lost[n - 1] + dl
        rhs = family.C(n, v)
        for n1 in range(n + 1):
            u = np.zeros(tower.cells)
            for n2 in range(n - n1 + 1):
                n3 = n - n1 - n2
                u += b[n3] @ family.T[n2]
            if n1 < H:
                rhs = rhs + family.A(n1, u, H)
        res[n] = (lhs - rhs).norm1()
    return res, lost


def export_residuals(path, residuals, budget) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("n,residual,truncation_budget\n")
        for n, (r, b) in enumerate(zip(residuals, budget)):
            fh.write(f"{n},{float(r)!r},{float(b)!r}\n")


# long-horizon base renewal ------------------------------------------------------------

def base_renewal(tower: TowerModel, b: np.ndarray, n_max: int) -> np.ndarray:
    """s_m = b_m + sum_{j=1}^m s_{m-j} R_j for m = 0..n_max.

    ``b`` has shape (n_max + 1, cells).  The convolution is evaluated per step
    by gathering, for every subcell with phi <= m, the base mass it received
    phi steps earlier, and summing the returning masses per image profile.
    """
    bank = tower.bank
    b = np.asarray(b, dtype=float)
    if b.shape != (n_max + 1, tower.cells):
        raise ValueError("b must have shape (n_max + 1, cells)")
    sel = np.nonzero(tower.phi <= n_max)[0]
    order = np.argsort(tower.phi[sel], kind="stable")
    sel = sel[order]
    phi = tower.phi[sel]
    row = tower.row[sel]
    frac = tower.frac[sel]
    qs, qinv = np.unique(bank.qrow[sel], return_inverse=True)
    table = bank.table[qs]
    nq = len(qs)
    counts = np.searchsorted(phi, np.arange(n_max + 1), side="right")
    s = np.zeros_like(b)
    s[0] = b[0]
    for m in range(1, n_max + 1):
        c = counts[m]
        if c:
            vals = s[m - phi[:c], row[:c]] * frac[:c]
            coef = np.bincount(qinv[:c], weights=vals, minlength=nq)
            s[m] = b[m] + coef @ table
        else:
            s[m] = b[m]
    return s


# scalar renewal ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ScalarRenewal:
    p: np.ndarray
    u: np.ndarray
    radius: float = float(np.exp(-1.0))

    @property
    def mean(self) -> float:
        n = np.arange(len(self.p))
        return float((n * self.p).sum())


def scalar_renewal(p, n_max: int | None = None) -> ScalarRenewal:
    """u_0 = 1, u_n = sum_{j=1}^n p_j u_{n-j}; p[0] is ignored."""
    p = np.asarray(p, dtype=float).copy()
    if np.any(p < 0) or p[1:].sum() > 1 + 1e-12:
        raise ValueError("p must be a sub-probability sequence")
    p[0] = 0.0
    N = len(p) - 1 if n_max is None else int(n_max)
    pp = np.zeros(N + 1)
    k = min(N + 1, len(p))
    pp[:k] = p[:k]
    u = np.zeros(N + 1)
    u[0] = 1.0
    for n in range(1, N + 1):
        u[n] = np.dot(pp[1 : n + 1], u[n - 1 :: -1])
    return ScalarRenewal(p=pp, u=u)


def coefficient_extract(b, n: int, nodes: int | None = None, tol: float = 1e-12, max_doublings: int = 6) -> float:
    """n-th Taylor coefficient of b by trapezoidal quadrature on |z| = e^{-1/n}.

    Starts from max(8n, 16) nodes and doubles until two successive node counts
    agree to ``tol`` (relative to the largest of 1 and the coefficient).
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    r = np.exp(-1.0 / n) if n > 0 else np.exp(-1.0)
    N = nodes if nodes is not None else max(8 * n, 16)

    def at(N):
        z = r * np.exp(2j * np.pi * np.arange(N) / N)
        vals = np.asarray(b(z), dtype=complex)
        c = np.fft.fft(vals) / N
        return float((c[n % N] / r ** n).real)

    prev = at(N)
    for _ in range(max_doublings):
        N *= 2
        cur = at(N)
        if abs(cur - prev) <= tol * max(1.0, abs(cur)):
            return cur
        prev = cur
    raise QuadratureError(f"coefficient {n} did not settle under node doubling")
