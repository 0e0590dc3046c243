"""Finite- and infinite-horizon team filtering over a delayed-sharing graph.

Offline, the predictor Riccati recursion gives P(t) and K(t); with the local
observation model these yield the innovation covariances and the per-step
team gains F_i(t). Online, every agent runs the same centralized predictor on
the common (delayed) measurements and corrects it with its own local
innovation:

    z_i(t) = L_i A^p xhat(a) + F_i(t) (I_loc_i(t) - C_loc_i xhat(a)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .estimator_static import (
    TOL_RES,
    GainSystemError,
    solve_gain_system,
    stationarity_residual,
    team_cost,
)
from .graph import InfoStructure, LocalObservationModel, build_local_observation_model
from .model import CostModel, DimensionError, LinearSystem

STEADY_RTOL = 1e-12
STEADY_MAX_ITER = 100_000


class ConvergenceError(RuntimeError):
    pass


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def riccati_step(P: np.ndarray, system: LinearSystem) -> tuple[np.ndarray, np.ndarray]:
    """One step of the predictor Riccati recursion; returns (K(t), P(t+1))."""
    A, C, R, Q = system.A, system.C_stacked, system.R_stacked, system.Q
    innov = C @ P @ C.T + R
    try:
        fac = cho_factor(_sym(innov))
    except LinAlgError as exc:
        raise GainSystemError("innovation covariance C P C' + R is not positive definite") from exc
    K = cho_solve(fac, C @ P).T
    delta = np.eye(system.d_x) - K @ C
    AK = A @ K
    P_next = A @ delta @ P @ delta.T @ A.T + AK @ R @ AK.T + Q
    return K, _sym(P_next)


@dataclass(frozen=True)
class KalmanState:
    """Prediction xhat(t) = E[x(t) | y(1:t-1)] with covariance P(t)."""

    t: int
    x_hat: np.ndarray
    P: np.ndarray
    K: np.ndarray | None = None

    @classmethod
    def initial(cls, system: LinearSystem) -> "KalmanState":
        return cls(1, np.zeros(system.d_x), np.array(system.Sigma_x, dtype=float))


def kalman_step(state: KalmanState, system: LinearSystem, y) -> KalmanState:
    """Consume y(t) and return the prediction for t+1.

    ``y`` may carry leading batch dimensions; the gain is shared.
    """
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != sum(system.d_y):
        raise DimensionError(f"measurement has length {y.shape[-1]}, expected {sum(system.d_y)}")
    K, P_next = riccati_step(state.P, system)
    x = np.asarray(state.x_hat, dtype=float)
    innov = y - x @ system.C_stacked.T
    x_next = (x + innov @ K.T) @ system.A.T
    return KalmanState(state.t + 1, x_next, P_next, K)


def riccati_sequence(system: LinearSystem, T: int) -> tuple[list, list]:
    """P(1..T) and K(1..T), starting from P(1) = Sigma_x."""
    P = [np.array(system.Sigma_x, dtype=float)]
    K = []
    for _ in range(T):
        k, p = riccati_step(P[-1], system)
        K.append(k)
        P.append(p)
    return P[:T], K


@dataclass(frozen=True)
class NoiseAggregates:
    """Covariances of the process/measurement noise accumulated since the anchor.

    ``sigma_w = var(x(t) - A^p x(a))``; ``p_sigma[i] = cov(that, w_loc_i)``;
    ``p_w[i][j]`` and ``p_v[i][j]`` are the cross covariances of the local
    noise vectors (``None`` where the pair was not requested).
    """

    t: int
    sigma_w: np.ndarray
    p_sigma: tuple
    p_w: tuple
    p_v: tuple


def _all_pairs(n):
    return {(i, j) for i in range(n) for j in range(n)}


def noise_aggregate_covariances(info: InfoStructure, lom: LocalObservationModel, system: LinearSystem,
                                t: int, pairs=None) -> NoiseAggregates:
    if t < 1:
        raise ValueError("time starts at 1")
    snap = lom.at(t)
    n = snap.n
    pairs = _all_pairs(n) if pairs is None else pairs
    m = snap.p
    Qb = np.kron(np.eye(m), system.Q)
    G = snap.state_noise
    sigma_w = _sym(G @ Qb @ G.T)
    p_sigma = tuple(G @ Qb @ snap.W_coef[i].T for i in range(n))
    dims = [[system.d_y[j] for j, _ in snap.entries[i]] for i in range(n)]
    p_w, p_v = [], []
    for i in range(n):
        row_w, row_v = [], []
        for j in range(n):
            if (i, j) not in pairs:
                row_w.append(None)
                row_v.append(None)
                continue
            row_w.append(snap.W_coef[i] @ Qb @ snap.W_coef[j].T)
            V = np.zeros((snap.rows(i), snap.rows(j)))
            # v_src(t - lag) is shared only by identical (source, lag) entries
            ri = np.concatenate([[0], np.cumsum(dims[i])]).astype(int)
            rj = np.concatenate([[0], np.cumsum(dims[j])]).astype(int)
            pos_j = {e: b for b, e in enumerate(snap.entries[j])}
            for a, e in enumerate(snap.entries[i]):
                b = pos_j.get(e)
                if b is not None:
                    V[ri[a]:ri[a + 1], rj[b]:rj[b + 1]] = system.R[e[0]]
            row_v.append(V)
        p_w.append(tuple(row_w))
        p_v.append(tuple(row_v))
    return NoiseAggregates(t, sigma_w, p_sigma, tuple(p_w), tuple(p_v))


@dataclass(frozen=True)
class CovarianceSet:
    t: int
    sigma_hat: tuple
    theta_hat: tuple
    P0: np.ndarray
    noise: NoiseAggregates


def innovation_covariances(noise: NoiseAggregates, P_delayed: np.ndarray, lom: LocalObservationModel,
                           system: LinearSystem, t: int) -> CovarianceSet:
    """Sigma_hat_ij(t), Theta_hat_i(t) and P_0(t) from P at the anchor time."""
    snap = lom.at(t)
    if noise.t != t and min(noise.t, len(lom.snapshots)) != min(t, len(lom.snapshots)):
        raise DimensionError(f"noise aggregates for t={noise.t} do not match t={t}")
    if P_delayed.shape != (system.d_x, system.d_x):
        raise DimensionError(f"P has shape {P_delayed.shape}, expected {(system.d_x,) * 2}")
    n = snap.n
    Ap = snap.propagate
    sigma_hat = []
    for i in range(n):
        row = []
        for j in range(n):
            if noise.p_w[i][j] is None:
                row.append(None)
                continue
            S = snap.C_loc[i] @ P_delayed @ snap.C_loc[j].T + noise.p_w[i][j] + noise.p_v[i][j]
            row.append(_sym(S) if i == j else S)
        sigma_hat.append(tuple(row))
    theta_hat = tuple(Ap @ P_delayed @ snap.C_loc[i].T + noise.p_sigma[i] for i in range(n))
    P0 = _sym(Ap @ P_delayed @ Ap.T + noise.sigma_w)
    return CovarianceSet(t, tuple(sigma_hat), theta_hat, P0, noise)


def _nonzero_pairs(cost: CostModel) -> set:
    n = cost.n
    return {(i, j) for i in range(n) for j in range(n) if np.any(cost.S_blocks[i][j])}


def covariance_schedule(system: LinearSystem, cost: CostModel, info: InfoStructure,
                        lom: LocalObservationModel, T: int, sparse: bool = True):
    """Riccati sequence plus the covariance set of every t in 1..T."""
    P, K = riccati_sequence(system, T)
    pairs = _nonzero_pairs(cost) if sparse else None
    noise_cache = {}
    covs = []
    for t in range(1, T + 1):
        key = min(t, info.tau_star)
        if key not in noise_cache:
            noise_cache[key] = noise_aggregate_covariances(info, lom, system, key, pairs)
        anchor = max(1, t - info.tau_star + 1)
        covs.append(innovation_covariances(noise_cache[key], P[anchor - 1], lom, system, t))
    return P, K, covs


@dataclass(frozen=True)
class GainSchedule:
    """Per-time Kalman gains K(t) and local gains F_i(t) (t = 1..T)."""

    K: tuple
    F: tuple
    P: tuple = field(repr=False)
    covariances: tuple = field(repr=False)
    step_cost: np.ndarray = field(repr=False)
    residuals: np.ndarray = field(repr=False)
    kind: str = "mtmse"

    @property
    def T(self) -> int:
        return len(self.F)


def gain_schedule(system: LinearSystem, cost: CostModel, info: InfoStructure,
                  lom: LocalObservationModel, T: int, sparse: bool = True) -> GainSchedule:
    """Team-optimal gains for every t; pairs with S_ij = 0 are skipped when ``sparse``."""
    if T < 1:
        raise ValueError("horizon must be at least 1")
    if cost.n != system.n or info.n != system.n:
        raise DimensionError("system, cost and graph disagree on the number of agents")
    P, K, covs = covariance_schedule(system, cost, info, lom, T, sparse)
    F, costs, res = [], [], []
    for c in covs:
        g = solve_gain_system(c.sigma_hat, c.theta_hat, cost)
        base = float(np.trace(cost.L.T @ cost.S @ cost.L @ c.P0))
        J = base - g.eta_F
        if J < -TOL_RES * (1.0 + abs(base)):
            raise GainSystemError(f"negative per-step cost {J:.3e} at t={c.t}")
        F.append(g.F)
        costs.append(J)
        res.append(g.residual)
    return GainSchedule(tuple(K), tuple(F), tuple(P), tuple(covs), np.array(costs), np.array(res))


def mmse_gains(cov: CovarianceSet, cost: CostModel) -> tuple:
    """Local gains L_i Theta_hat_i Sigma_hat_ii^{-1} of the per-agent conditional mean."""
    out = []
    for i, th in enumerate(cov.theta_hat):
        S_ii = cov.sigma_hat[i][i]
        if S_ii.size == 0:
            out.append(np.zeros((cost.d_z[i], 0)))
            continue
        try:
            fac = cho_factor(S_ii)
        except LinAlgError as exc:
            raise GainSystemError(f"Sigma_hat_{i}{i}({cov.t}) is singular") from exc
        out.append(cost.L_blocks[i] @ cho_solve(fac, th.T).T)
    return tuple(out)


def mmse_schedule(system: LinearSystem, cost: CostModel, info: InfoStructure,
                  lom: LocalObservationModel, T: int) -> GainSchedule:
    """Same online structure as the team filter, with per-agent MMSE gains."""
    P, K, covs = covariance_schedule(system, cost, info, lom, T)
    F, costs, res = [], [], []
    for c in covs:
        g = mmse_gains(c, cost)
        F.append(g)
        costs.append(team_cost(g, c.sigma_hat, c.theta_hat, cost, c.P0))
        res.append(np.nan)
    return GainSchedule(tuple(K), tuple(F), tuple(P), tuple(covs), np.array(costs), np.array(res), kind="mmse")


def schedule_residuals(schedule: GainSchedule, cost: CostModel) -> np.ndarray:
    """Stationarity residual of every step, recomputed from the stored covariances."""
    return np.array([stationarity_residual(F, c.sigma_hat, c.theta_hat, cost)
                     for F, c in zip(schedule.F, schedule.covariances)])


def run_filter(system: LinearSystem, cost: CostModel, info: InfoStructure, lom: LocalObservationModel,
               schedule: GainSchedule, measurements) -> np.ndarray:
    """Online estimates z(t) for t = 1..T from stacked measurements y(1..T).

    ``measurements`` has shape (T, sum d_y) or (paths, T, sum d_y); the
    result has shape (..., T, sum d_z). Agent i's block of z(t) uses only
    y(1:t - tau_star) and its own local entries.
    """
    y = np.asarray(measurements, dtype=float)
    single = y.ndim == 2
    if single:
        y = y[None]
    paths, T, dy = y.shape
    if dy != sum(system.d_y):
        raise DimensionError(f"measurements have width {dy}, expected {sum(system.d_y)}")
    if T > schedule.T:
        raise DimensionError(f"schedule covers {schedule.T} steps, measurements have {T}")
    A, C = system.A, system.C_stacked
    off = system.measurement_offsets()
    dz_off = np.concatenate([[0], np.cumsum(cost.d_z)]).astype(int)
    z = np.zeros((paths, T, dz_off[-1]))
    x_hat = np.zeros((paths, system.d_x))  # prediction of x(anchor)
    anchor = 1
    for t in range(1, T + 1):
        snap = lom.at(t)
        target = max(1, t - info.tau_star + 1)
        while anchor < target:
            K = schedule.K[anchor - 1]
            innov = y[:, anchor - 1] - x_hat @ C.T
            x_hat = (x_hat + innov @ K.T) @ A.T
            anchor += 1
        x_com = x_hat @ snap.propagate.T
        F = schedule.F[t - 1]
        for i in range(snap.n):
            zi = x_com @ cost.L_blocks[i].T
            if snap.entries[i]:
                local = np.concatenate([y[:, t - k - 1, off[j]:off[j + 1]] for j, k in snap.entries[i]], axis=1)
                zi = zi + (local - x_hat @ snap.C_loc[i].T) @ F[i].T
            z[:, t - 1, dz_off[i]:dz_off[i + 1]] = zi
    return z[0] if single else z


def optimal_cost_finite(schedule: GainSchedule, T: int | None = None) -> float:
    """J*_T, the sum of the per-step optimal costs."""
    T = schedule.T if T is None else T
    steps = schedule.step_cost[:T]
    if np.any(steps < -TOL_RES * (1.0 + np.abs(steps).max(initial=0.0))):
        raise GainSystemError("negative per-step cost")
    return float(steps.sum())


@dataclass(frozen=True)
class SteadyState:
    P: np.ndarray
    K: np.ndarray
    F: tuple
    J: float
    spectral_radius: float
    predictor_spectral_radius: float
    iterations: int
    covariances: CovarianceSet
    residual: float


def steady_riccati(system: LinearSystem, P_init=None, rtol: float = STEADY_RTOL,
                   max_iter: int = STEADY_MAX_ITER) -> tuple[np.ndarray, int]:
    """Fixed point of the predictor Riccati map by plain iteration."""
    P = np.array(system.Sigma_x if P_init is None else P_init, dtype=float)
    for it in range(1, max_iter + 1):
        _, P_next = riccati_step(P, system)
        change = np.linalg.norm(P_next - P)
        P = P_next
        if change <= rtol * np.linalg.norm(P):
            return P, it
    raise ConvergenceError(f"Riccati iteration did not converge in {max_iter} steps")


def steady_state(system: LinearSystem, cost: CostModel, info: InfoStructure,
                 lom: LocalObservationModel, P_init=None) -> SteadyState:
    """Time-homogeneous gains and average cost for the infinite horizon."""
    P, iters = steady_riccati(system, P_init)
    K, _ = riccati_step(P, system)
    C = system.C_stacked
    rho = float(np.abs(np.linalg.eigvals(system.A - K @ C)).max())
    rho_pred = float(np.abs(np.linalg.eigvals(system.A @ (np.eye(system.d_x) - K @ C))).max())
    t_stat = info.tau_star
    noise = noise_aggregate_covariances(info, lom, system, t_stat, _nonzero_pairs(cost))
    cov = innovation_covariances(noise, P, lom, system, t_stat)
    g = solve_gain_system(cov.sigma_hat, cov.theta_hat, cost)
    J = float(np.trace(cost.L.T @ cost.S @ cost.L @ cov.P0)) - g.eta_F
    return SteadyState(P, K, g.F, J, rho, rho_pred, iters, cov, g.residual)


def centralized_model(system: LinearSystem) -> tuple[InfoStructure, LocalObservationModel]:
    """Info structure and local model for a single agent (plain Kalman filtering)."""
    if system.n != 1:
        raise DimensionError("centralized model needs a single-agent system")
    info = InfoStructure.single_agent()
    return info, build_local_observation_model(info, system)
