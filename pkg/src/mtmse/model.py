"""System, cost and assumption checks shared by every solver."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import block_diag

TOL_PD = 1e-10
TOL_PSD = 1e-9
TOL_RANK = 1e-8


class DimensionError(ValueError):
    """Inputs have inconsistent shapes."""


def _as_matrix(value, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        # a bare vector is read as a single row
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be a matrix, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LinearSystem:
    """x(t+1) = A x(t) + w(t), y_i(t) = C_i x(t) + v_i(t), x(1) ~ N(0, Sigma_x)."""

    A: np.ndarray
    C: tuple
    Q: np.ndarray
    R: tuple
    Sigma_x: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", _as_matrix(self.A, "A"))
        object.__setattr__(self, "C", tuple(_as_matrix(c, f"C[{i}]") for i, c in enumerate(self.C)))
        object.__setattr__(self, "Q", _as_matrix(self.Q, "Q"))
        object.__setattr__(self, "R", tuple(_as_matrix(r, f"R[{i}]") for i, r in enumerate(self.R)))
        object.__setattr__(self, "Sigma_x", _as_matrix(self.Sigma_x, "Sigma_x"))
        dx = self.A.shape[0]
        if self.A.shape != (dx, dx):
            raise DimensionError(f"A must be square, got {self.A.shape}")
        if len(self.C) == 0:
            raise DimensionError("at least one agent is required")
        if len(self.C) != len(self.R):
            raise DimensionError(f"{len(self.C)} observation matrices but {len(self.R)} noise covariances")
        for i, (c, r) in enumerate(zip(self.C, self.R)):
            if c.shape[1] != dx:
                raise DimensionError(f"C[{i}] has {c.shape[1]} columns, state dimension is {dx}")
            if r.shape != (c.shape[0], c.shape[0]):
                raise DimensionError(f"R[{i}] has shape {r.shape}, expected {(c.shape[0],) * 2}")
        for name in ("Q", "Sigma_x"):
            if getattr(self, name).shape != (dx, dx):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {(dx, dx)}")

    @property
    def n(self) -> int:
        return len(self.C)

    @property
    def d_x(self) -> int:
        return self.A.shape[0]

    @property
    def d_y(self) -> list[int]:
        return [c.shape[0] for c in self.C]

    @property
    def C_stacked(self) -> np.ndarray:
        return np.vstack(self.C)

    @property
    def R_stacked(self) -> np.ndarray:
        return block_diag(*self.R)

    def measurement_offsets(self) -> np.ndarray:
        """Start index of each agent's block inside the stacked measurement y(t)."""
        return np.concatenate([[0], np.cumsum(self.d_y)])


@dataclass(frozen=True)
class CostModel:
    """Block weights S_ij and selectors L_i of c = (Lx - z)' S (Lx - z)."""

    S_blocks: tuple
    L_blocks: tuple
    S: np.ndarray = field(init=False, repr=False)
    L: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        L_blocks = tuple(_as_matrix(b, f"L[{i}]") for i, b in enumerate(self.L_blocks))
        n = len(L_blocks)
        if len(self.S_blocks) != n or any(len(row) != n for row in self.S_blocks):
            raise DimensionError(f"S must be a {n}x{n} grid of blocks")
        S_blocks = tuple(
            tuple(_as_matrix(self.S_blocks[i][j], f"S[{i}][{j}]") for j in range(n)) for i in range(n)
        )
        dz = [b.shape[0] for b in L_blocks]
        dx = {b.shape[1] for b in L_blocks}
        if len(dx) != 1:
            raise DimensionError("all L_i must have the same number of columns")
        for i in range(n):
            for j in range(n):
                if S_blocks[i][j].shape != (dz[i], dz[j]):
                    raise DimensionError(f"S[{i}][{j}] has shape {S_blocks[i][j].shape}, expected {(dz[i], dz[j])}")
        object.__setattr__(self, "L_blocks", L_blocks)
        object.__setattr__(self, "S_blocks", S_blocks)
        object.__setattr__(self, "S", _frozen(np.block([list(row) for row in S_blocks])))
        object.__setattr__(self, "L", _frozen(np.vstack(L_blocks)))

    @classmethod
    def from_matrices(cls, S, L, d_z: Sequence[int]) -> "CostModel":
        """Split a monolithic S and L into agent blocks of sizes ``d_z``."""
        S = np.asarray(S, dtype=float)
        L = np.asarray(L, dtype=float)
        off = np.concatenate([[0], np.cumsum(d_z)])
        if S.shape != (off[-1], off[-1]) or L.shape[0] != off[-1]:
            raise DimensionError("S and L do not match the requested block sizes")
        n = len(d_z)
        S_blocks = [[S[off[i]:off[i + 1], off[j]:off[j + 1]] for j in range(n)] for i in range(n)]
        L_blocks = [L[off[i]:off[i + 1]] for i in range(n)]
        return cls(S_blocks, L_blocks)

    @property
    def n(self) -> int:
        return len(self.L_blocks)

    @property
    def d_z(self) -> list[int]:
        return [b.shape[0] for b in self.L_blocks]

    def S_row(self, i: int) -> np.ndarray:
        """Block row S_{i.} of the assembled weight matrix."""
        return np.hstack(self.S_blocks[i])

    def block_diagonal(self) -> bool:
        n = self.n
        return all(not np.any(self.S_blocks[i][j]) for i in range(n) for j in range(n) if i != j)


def build_average_coupling_cost(n: int, d: int, lam: float) -> CostModel:
    """Own-state error plus lam times the error of the team average."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    eye = np.eye(d)
    S = [[((i == j) + lam / n**2) * eye for j in range(n)] for i in range(n)]
    L = [np.hstack([eye if k == i else np.zeros((d, d)) for k in range(n)]) for i in range(n)]
    return CostModel(S, L)


def build_chain_coupling_cost(n: int, d: int, lam: float) -> CostModel:
    """Own-state error plus lam times the error in adjacent differences (platoon)."""
    if n < 2:
        raise ValueError("chain coupling needs at least two agents")
    if d < 1:
        raise ValueError("d must be positive")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    eye = np.eye(d)
    S = []
    for i in range(n):
        row = []
        for j in range(n):
            if i == j:
                row.append((1 + (lam if i in (0, n - 1) else 2 * lam)) * eye)
            elif abs(i - j) == 1:
                row.append(-lam * eye)
            else:
                row.append(np.zeros((d, d)))
        S.append(row)
    L = [np.hstack([eye if k == i else np.zeros((d, d)) for k in range(n)]) for i in range(n)]
    return CostModel(S, L)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    value: float
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failed(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def format(self) -> str:
        lines = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            lines.append(f"{c.name}: {status} ({c.detail} = {c.value:.6g})")
        lines.append("overall: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)


def min_eig(M: np.ndarray) -> float:
    if M.size == 0:
        return np.inf
    return float(np.linalg.eigvalsh(0.5 * (M + M.T)).min())


def psd_sqrt(M: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clamped to zero."""
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def pbh_margin(A: np.ndarray, B: np.ndarray, dual: bool = False) -> float:
    """Smallest normalised PBH singular value over the unstable eigenvalues of A.

    For ``dual=False`` tests rank [A - lam I, B] (stabilizability); for
    ``dual=True`` tests rank [A - lam I; B] (detectability). Returns +inf if A
    has no eigenvalue on or outside the unit circle. The pair passes when the
    margin exceeds ``TOL_RANK``.
    """
    dx = A.shape[0]
    margin = np.inf
    for lam in np.linalg.eigvals(A):
        if abs(lam) < 1.0:
            continue
        shifted = A - lam * np.eye(dx)
        M = np.vstack([shifted, B]) if dual else np.hstack([shifted, B])
        s = np.linalg.svd(M, compute_uv=False)
        if s[0] == 0.0:
            return 0.0
        # rank dx needs dx singular values above the threshold
        margin = min(margin, s[dx - 1] / s[0] if len(s) >= dx else 0.0)
    return float(margin)


def validate(system: LinearSystem, cost: CostModel) -> ValidationReport:
    """Check assumptions (A1)-(A5) for a system/cost pair.

    Shape inconsistencies raise ``DimensionError``; failed assumptions are
    reported, not raised.
    """
    if cost.n != system.n:
        raise DimensionError(f"cost has {cost.n} agents, system has {system.n}")
    if cost.L.shape[1] != system.d_x:
        raise DimensionError(f"L has {cost.L.shape[1]} columns, state dimension is {system.d_x}")

    S = cost.S
    sym_S = np.allclose(S, S.T, atol=TOL_PSD, rtol=0)
    e_S = min_eig(S)
    a1 = Check("A1", sym_S and e_S > TOL_PD, e_S, "min eig S")

    e_R = min(min_eig(r) for r in system.R)
    sym_R = all(np.allclose(r, r.T, atol=TOL_PSD, rtol=0) for r in system.R)
    e_Q = min_eig(system.Q)
    e_X = min_eig(system.Sigma_x)
    sym_QX = np.allclose(system.Q, system.Q.T, atol=TOL_PSD, rtol=0) and np.allclose(
        system.Sigma_x, system.Sigma_x.T, atol=TOL_PSD, rtol=0
    )
    a2_value = min(e_R - TOL_PD, e_Q + TOL_PSD, e_X + TOL_PSD)
    a2 = Check("A2", sym_R and sym_QX and e_R > TOL_PD and e_Q >= -TOL_PSD and e_X >= -TOL_PSD,
               a2_value, "min(eig R - tol_pd, eig Q + tol_psd, eig Sigma_x + tol_psd)")
    # (A3) is a modelling statement about independent primitives; the
    # simulator draws them independently by construction.
    a3 = Check("A3", True, 0.0, "independence of primitives (by construction)")

    m4 = pbh_margin(system.A, psd_sqrt(system.Q))
    a4 = Check("A4", m4 > TOL_RANK, m4, "PBH margin (A, Q^1/2)")
    m5 = pbh_margin(system.A, system.C_stacked, dual=True)
    a5 = Check("A5", m5 > TOL_RANK, m5, "PBH margin (A, C)")
    return ValidationReport((a1, a2, a3, a4, a5))
