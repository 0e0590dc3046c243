"""One-shot team estimation with common and local measurements.

Agents see a common measurement ``y_0`` and private ``y_i``. The team-optimal
estimate is ``z_i = L_i xhat_0 + F_i (y_i - yhat_i)`` where the gains solve the
coupled linear matrix equations

    sum_j S_ij F_j Sigma_hat_ji = S_i. L Theta_hat_i      for every i,

vectorised (column stacking) into ``Gamma F = eta`` with
``Gamma_ij = kron(Sigma_hat_ij, S_ij)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .model import CostModel, DimensionError

TOL_RES = 1e-9


class GainSystemError(ArithmeticError):
    """The gain system is singular, indefinite, or solved inaccurately."""


def vec(M: np.ndarray) -> np.ndarray:
    """Column-stacking vectorisation, vec(ABC) = kron(C.T, A) vec(B)."""
    return np.asarray(M).reshape(-1, order="F")


def unvec(v: np.ndarray, shape: tuple) -> np.ndarray:
    return np.asarray(v).reshape(shape, order="F")


@dataclass(frozen=True)
class GaussianJointModel:
    """Second moments of zero-mean jointly Gaussian (x, y_0, y_1, ..., y_n).

    ``theta[i] = cov(x, y_i)`` and ``sigma[i][j] = cov(y_i, y_j)`` for
    i, j in 0..n. An absent common measurement is a dimension-0 block.
    """

    theta: tuple
    sigma: tuple
    sigma_x: np.ndarray | None = None

    def __post_init__(self):
        m = len(self.theta)
        if m < 2:
            raise DimensionError("need the common block and at least one agent")
        if len(self.sigma) != m or any(len(r) != m for r in self.sigma):
            raise DimensionError("sigma must be an (n+1)x(n+1) grid of blocks")
        theta = [np.atleast_2d(np.asarray(t, dtype=float)) for t in self.theta[1:]]
        dx = theta[0].shape[0]
        th0 = self.theta[0]
        th0 = np.zeros((dx, 0)) if th0 is None or np.size(th0) == 0 else np.asarray(th0, dtype=float).reshape(dx, -1)
        theta = (th0, *theta)
        dims = [t.shape[1] for t in theta]

        def block(v, i, j):
            if v is None or np.size(v) == 0:
                if dims[i] and dims[j]:
                    raise DimensionError(f"sigma[{i}][{j}] is missing")
                return np.zeros((dims[i], dims[j]))
            return np.asarray(v, dtype=float).reshape(dims[i], dims[j])

        sigma = tuple(tuple(block(self.sigma[i][j], i, j) for j in range(m)) for i in range(m))
        for i in range(m):
            if theta[i].shape[0] != dx:
                raise DimensionError(f"theta[{i}] has {theta[i].shape[0]} rows, expected {dx}")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "sigma", sigma)
        if self.sigma_x is not None:
            object.__setattr__(self, "sigma_x", np.atleast_2d(np.asarray(self.sigma_x, dtype=float)))

    @classmethod
    def from_covariance(cls, cov: np.ndarray, d_x: int, dims: Sequence[int]) -> "GaussianJointModel":
        """Split the covariance of (x, y_0, ..., y_n); ``dims[0]`` may be 0."""
        cov = np.asarray(cov, dtype=float)
        off = np.concatenate([[d_x], d_x + np.cumsum(dims)])
        blocks = [slice(off[i], off[i + 1]) for i in range(len(dims))]
        theta = [cov[:d_x, b] for b in blocks]
        sigma = [[cov[bi, bj] for bj in blocks] for bi in blocks]
        return cls(theta, sigma, cov[:d_x, :d_x])

    @property
    def n(self) -> int:
        return len(self.theta) - 1

    @property
    def d_x(self) -> int:
        return self.theta[0].shape[0]

    @property
    def has_common(self) -> bool:
        return self.theta[0].shape[1] > 0


@dataclass(frozen=True)
class InnovationModel:
    theta_hat: tuple
    sigma_hat: tuple
    x0_map: np.ndarray
    y_maps: tuple
    P0: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.theta_hat)


def innovation_model(joint: GaussianJointModel) -> InnovationModel:
    """Condition every local measurement on the common one."""
    n = joint.n
    th, sg = joint.theta, joint.sigma
    d0 = th[0].shape[1]
    if d0 == 0:
        x0_map = np.zeros((joint.d_x, 0))
        y_maps = tuple(np.zeros((sg[i][i].shape[0], 0)) for i in range(1, n + 1))
        theta_hat = tuple(th[1:])
        sigma_hat = tuple(tuple(sg[i][j] for j in range(1, n + 1)) for i in range(1, n + 1))
        P0 = joint.sigma_x
    else:
        try:
            fac = cho_factor(sg[0][0])
        except LinAlgError as exc:
            raise GainSystemError("common measurement covariance Sigma_00 is not positive definite") from exc
        # X Sigma_00^{-1} = solve(Sigma_00, X.T).T by symmetry
        x0_map = cho_solve(fac, th[0].T).T
        y_maps = tuple(cho_solve(fac, sg[0][i]).T for i in range(1, n + 1))
        theta_hat = tuple(th[i] - x0_map @ sg[0][i] for i in range(1, n + 1))
        sigma_hat = tuple(
            tuple(sg[i][j] - y_maps[i - 1] @ sg[0][j] for j in range(1, n + 1)) for i in range(1, n + 1)
        )
        P0 = None if joint.sigma_x is None else joint.sigma_x - x0_map @ th[0].T
    return InnovationModel(theta_hat, sigma_hat, x0_map, y_maps, P0)


@dataclass(frozen=True)
class TeamGains:
    F: tuple
    gamma: np.ndarray
    eta: np.ndarray
    F_vec: np.ndarray
    residual: float

    @property
    def eta_F(self) -> float:
        """eta' Gamma^{-1} eta, evaluated as eta' F."""
        return float(self.eta @ self.F_vec)


def assemble_gain_system(sigma_hat, theta_hat, cost: CostModel) -> tuple[np.ndarray, np.ndarray]:
    """Gamma and eta; blocks with S_ij = 0 are left as zeros without touching Sigma_hat_ij."""
    n = cost.n
    dz = cost.d_z
    dy = [theta_hat[i].shape[1] for i in range(n)]
    sizes = [dz[i] * dy[i] for i in range(n)]
    off = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    gamma = np.zeros((off[-1], off[-1]))
    eta = np.zeros(off[-1])
    L = cost.L
    for i in range(n):
        eta[off[i]:off[i + 1]] = vec(cost.S_row(i) @ L @ theta_hat[i])
        for j in range(n):
            S_ij = cost.S_blocks[i][j]
            if not np.any(S_ij):
                continue
            gamma[off[i]:off[i + 1], off[j]:off[j + 1]] = np.kron(sigma_hat[i][j], S_ij)
    return gamma, eta


def stationarity_residual(F, sigma_hat, theta_hat, cost: CostModel) -> float:
    """Largest relative block residual of sum_j S_ij F_j Sigma_hat_ji - S_i. L Theta_hat_i."""
    n = cost.n
    norm_S = np.linalg.norm(cost.S)
    worst = 0.0
    for i in range(n):
        r = -cost.S_row(i) @ cost.L @ theta_hat[i]
        scale = 0.0
        for j in range(n):
            S_ij = cost.S_blocks[i][j]
            if not np.any(S_ij):
                continue
            r = r + S_ij @ F[j] @ sigma_hat[j][i]
            scale = max(scale, np.linalg.norm(sigma_hat[j][i]))
        worst = max(worst, np.linalg.norm(r) / (1.0 + norm_S * scale))
    return float(worst)


def solve_gain_system(sigma_hat, theta_hat, cost: CostModel, tol: float = TOL_RES) -> TeamGains:
    """Solve Gamma F = eta by Cholesky and unpack the per-agent gains."""
    n = cost.n
    if len(theta_hat) != n or len(sigma_hat) != n:
        raise DimensionError(f"cost has {n} agents, innovation model has {len(theta_hat)}")
    dz = cost.d_z
    dy = [theta_hat[i].shape[1] for i in range(n)]
    for i in range(n):
        if theta_hat[i].shape[0] != cost.L.shape[1]:
            raise DimensionError(f"Theta_hat[{i}] has {theta_hat[i].shape[0]} rows, L has {cost.L.shape[1]} columns")
    gamma, eta = assemble_gain_system(sigma_hat, theta_hat, cost)
    if gamma.size == 0:
        F_vec = np.zeros(0)
    else:
        try:
            fac = cho_factor(gamma)
        except LinAlgError as exc:
            lo = float(np.linalg.eigvalsh(0.5 * (gamma + gamma.T)).min())
            raise GainSystemError(f"Gamma is not positive definite (min eigenvalue {lo:.3e})") from exc
        F_vec = cho_solve(fac, eta)
    F, pos = [], 0
    for i in range(n):
        size = dz[i] * dy[i]
        F.append(unvec(F_vec[pos:pos + size], (dz[i], dy[i])))
        pos += size
    res = stationarity_residual(F, sigma_hat, theta_hat, cost)
    if res > tol:
        raise GainSystemError(f"gain residual {res:.3e} exceeds tolerance {tol:.1e}")
    return TeamGains(tuple(F), gamma, eta, F_vec, res)


def solve_team_gains(inn: InnovationModel, cost: CostModel) -> TeamGains:
    return solve_gain_system(inn.sigma_hat, inn.theta_hat, cost)


def mtmse_estimate(inn: InnovationModel, gains: TeamGains, cost: CostModel, y_0, ys) -> list[np.ndarray]:
    """z_i = L_i xhat_0 + F_i (y_i - yhat_i) for every agent."""
    y_0 = np.zeros(0) if y_0 is None else np.asarray(y_0, dtype=float).ravel()
    if y_0.shape[0] != inn.x0_map.shape[1]:
        raise DimensionError(f"common measurement has length {y_0.shape[0]}, expected {inn.x0_map.shape[1]}")
    if len(ys) != inn.n:
        raise DimensionError(f"expected {inn.n} local measurements, got {len(ys)}")
    x0 = inn.x0_map @ y_0
    out = []
    for i, y in enumerate(ys):
        y = np.asarray(y, dtype=float).ravel()
        if y.shape[0] != inn.y_maps[i].shape[0]:
            raise DimensionError(f"y_{i + 1} has length {y.shape[0]}, expected {inn.y_maps[i].shape[0]}")
        out.append(cost.L_blocks[i] @ x0 + gains.F[i] @ (y - inn.y_maps[i] @ y_0))
    return out


def team_cost(F, sigma_hat, theta_hat, cost: CostModel, P0) -> float:
    """Expected team error of z_i = L_i xhat_0 + F_i ytilde_i for arbitrary gains."""
    n = cost.n
    J = float(np.trace(cost.L.T @ cost.S @ cost.L @ P0))
    for i in range(n):
        for j in range(n):
            S_ij = cost.S_blocks[i][j]
            if not np.any(S_ij):
                continue
            J -= 2.0 * np.trace(F[i].T @ S_ij @ cost.L_blocks[j] @ theta_hat[i])
            J += np.trace(F[i].T @ S_ij @ F[j] @ sigma_hat[j][i])
    return J


def optimal_static_cost(inn: InnovationModel, cost: CostModel, P_0=None, gains: TeamGains | None = None) -> float:
    """J* = Tr(L'SL P_0) - eta' Gamma^{-1} eta."""
    P_0 = inn.P0 if P_0 is None else np.atleast_2d(np.asarray(P_0, dtype=float))
    if P_0 is None:
        raise ValueError("P_0 = var(x - xhat_0) is required")
    if gains is None:
        gains = solve_team_gains(inn, cost)
    base = float(np.trace(cost.L.T @ cost.S @ cost.L @ P_0))
    J = base - gains.eta_F
    if J < -TOL_RES * (1.0 + abs(base)):
        raise GainSystemError(f"negative optimal cost {J:.3e}: inputs are inconsistent")
    return J
