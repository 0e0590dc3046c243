"""Comparison strategies and the Monte Carlo harness.

Every strategy maps a batch of measurement streams ``y`` of shape
(paths, T, sum d_y) to team estimates of shape (paths, T, sum d_z). Agent i's
block at time t may only depend on I_i(t); the strategies below respect that
by construction and the tests check it by perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .filter import GainSchedule, gain_schedule, mmse_schedule, run_filter
from .graph import CommGraph, InfoStructure, LocalObservationModel, geodesics
from .model import CostModel, LinearSystem, psd_sqrt


class Strategy:
    """Team estimation strategy evaluated on batches of measurement paths."""

    name = "strategy"

    def estimate(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"name": self.name}


@dataclass
class LinearTeamStrategy(Strategy):
    """Common delayed-state predictor plus per-agent gains on the local innovation."""

    system: LinearSystem
    cost: CostModel
    info: InfoStructure
    lom: LocalObservationModel
    schedule: GainSchedule
    name: str = "mtmse"

    def estimate(self, y):
        return run_filter(self.system, self.cost, self.info, self.lom, self.schedule, y)

    @property
    def analytic_total(self) -> float:
        return float(self.schedule.step_cost.sum())


def mtmse_strategy(system, cost, info, lom, T: int) -> LinearTeamStrategy:
    return LinearTeamStrategy(system, cost, info, lom, gain_schedule(system, cost, info, lom, T), "mtmse")


def mmse_strategy(system, cost, info, lom, T: int) -> LinearTeamStrategy:
    """z_i(t) = L_i E[x(t) | I_i(t)]."""
    return LinearTeamStrategy(system, cost, info, lom, mmse_schedule(system, cost, info, lom, T), "mmse")


def mmse_cost(system, cost, info, lom, T: int, schedule: GainSchedule | None = None) -> float:
    """Closed-form team error of the MMSE strategy over 1..T."""
    if schedule is None:
        schedule = mmse_schedule(system, cost, info, lom, T)
    LSL = cost.L.T @ cost.S @ cost.L
    n = cost.n
    total = 0.0
    for cov in schedule.covariances[:T]:
        K = []
        for i in range(n):
            S_ii = cov.sigma_hat[i][i]
            K.append(cho_solve(cho_factor(S_ii), cov.theta_hat[i].T).T if S_ii.size else
                     np.zeros((system.d_x, 0)))
        J = float(np.trace(LSL @ cov.P0))
        for i in range(n):
            acc = np.zeros((system.d_x, K[i].shape[1]))
            for j in range(n):
                S_ij = cost.S_blocks[i][j]
                if not np.any(S_ij):
                    continue
                acc += cost.L_blocks[i].T @ S_ij @ cost.L_blocks[j] @ (K[j] @ cov.sigma_hat[j][i] - 2.0 * cov.theta_hat[i])
            J += float(np.trace(K[i].T @ acc))
        total += J
    return total


@dataclass
class ConsensusKF(Strategy):
    """Local Kalman filters followed by consensus rounds on delayed neighbour estimates.

    Agent i filters its own measurement, then runs ``iterations`` rounds of
    x_i <- x_i + eps * sum_j (A^tau_ji xi_j(t - tau_ji) - x_i) over its
    in-neighbours j, where xi_j(s) is j's final estimate at time s (it reaches
    i after tau_ji steps and is propagated to time t).
    """

    system: LinearSystem
    cost: CostModel
    graph: CommGraph
    iterations: int = 1
    step_size: float | None = None
    T_max: int = 0
    name: str = "ckf"
    gains: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.graph.n != self.system.n:
            raise ValueError("graph and system disagree on the number of agents")
        if self.graph.n > 1:
            geodesics(self.graph)
        deg = self.graph.max_in_degree()
        if self.step_size is None:
            self.step_size = 0.65 / deg if deg else 0.0
        if deg and not (0.0 < self.step_size < 1.0 / deg):
            raise ValueError(f"step size must lie in (0, 1/{deg}), got {self.step_size}")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        self._neighbors = [[(j, self.graph.delays[(j, i)]) for j in self.graph.in_neighbors(i)]
                           for i in range(self.graph.n)]

    def describe(self):
        return {"name": self.name, "consensus_iterations": self.iterations, "step_size": self.step_size}

    def _local_gains(self, T: int) -> list:
        """Filter-form gains of each agent's own Kalman filter for t = 1..T."""
        if len(self.gains) >= T:
            return self.gains
        A, Q = self.system.A, self.system.Q
        steps = max(T, self.T_max)
        per_agent = []
        for C, R in zip(self.system.C, self.system.R):
            P = np.array(self.system.Sigma_x, dtype=float)
            Ks = []
            for _ in range(steps):
                K = cho_solve(cho_factor(C @ P @ C.T + R), C @ P).T
                Ks.append(K)
                P = A @ (np.eye(len(P)) - K @ C) @ P @ A.T + Q
                P = 0.5 * (P + P.T)
            per_agent.append(Ks)
        self.gains[:] = list(zip(*per_agent))
        return self.gains

    def estimate(self, y):
        y = np.asarray(y, dtype=float)
        single = y.ndim == 2
        if single:
            y = y[None]
        paths, T, _ = y.shape
        sysm = self.system
        gains = self._local_gains(T)
        A = sysm.A
        off = sysm.measurement_offsets()
        dz_off = np.concatenate([[0], np.cumsum(self.cost.d_z)]).astype(int)
        n, dx = sysm.n, sysm.d_x
        max_tau = max((d for nb in self._neighbors for _, d in nb), default=0)
        Apow = [np.eye(dx)]
        for _ in range(max_tau):
            Apow.append(A @ Apow[-1])
        history = np.zeros((T, n, paths, dx))
        prior = np.zeros((n, paths, dx))
        z = np.zeros((paths, T, dz_off[-1]))
        for t in range(1, T + 1):
            post = np.empty_like(prior)
            for i in range(n):
                C = sysm.C[i]
                innov = y[:, t - 1, off[i]:off[i + 1]] - prior[i] @ C.T
                post[i] = prior[i] + innov @ gains[t - 1][i].T
            received = []
            for i in range(n):
                got = [history[t - tau - 1, j] @ Apow[tau].T for j, tau in self._neighbors[i] if t - tau >= 1]
                received.append(got)
            for _ in range(self.iterations):
                for i in range(n):
                    if received[i]:
                        post[i] = post[i] + self.step_size * sum(r - post[i] for r in received[i])
            history[t - 1] = post
            for i in range(n):
                z[:, t - 1, dz_off[i]:dz_off[i + 1]] = post[i] @ self.cost.L_blocks[i].T
            prior = post @ A.T
        return z[0] if single else z


def consensus_kf_strategy(system, cost, graph, iterations: int = 1, step_size: float | None = None) -> ConsensusKF:
    return ConsensusKF(system, cost, graph, iterations, step_size)


@dataclass(frozen=True)
class SimulationResult:
    name: str
    paths: int
    T: int
    mean_total: float
    std_error: float
    step_means: np.ndarray = field(repr=False)
    seed: int
    params: dict = field(default_factory=dict)

    @property
    def mean_per_step(self) -> float:
        return self.mean_total / self.T


def _stream(seed: int, path: int, source: int) -> np.random.Generator:
    # counter-based stream keyed by (seed, path, source); time indexes within it
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(path, source))))


def simulate_paths(system: LinearSystem, T: int, paths: int, seed: int, first_path: int = 0):
    """Draw x(1..T) and y(1..T) for paths ``first_path .. first_path + paths - 1``."""
    dx, n = system.d_x, system.n
    dys = system.d_y
    Dx = psd_sqrt(system.Sigma_x)
    Dq = psd_sqrt(system.Q)
    Dr = [psd_sqrt(r) for r in system.R]
    x1 = np.empty((paths, dx))
    w = np.empty((paths, T, dx))
    v = np.empty((paths, T, sum(dys)))
    off = system.measurement_offsets()
    for p in range(paths):
        idx = first_path + p
        x1[p] = _stream(seed, idx, 0).standard_normal(dx)
        w[p] = _stream(seed, idx, 1).standard_normal((T, dx))
        for i in range(n):
            v[p, :, off[i]:off[i + 1]] = _stream(seed, idx, 2 + i).standard_normal((T, dys[i]))
    x = np.empty((paths, T, dx))
    x[:, 0] = x1 @ Dx.T
    wq = w @ Dq.T
    for t in range(1, T):
        x[:, t] = x[:, t - 1] @ system.A.T + wq[:, t - 1]
    for i in range(n):
        v[:, :, off[i]:off[i + 1]] = v[:, :, off[i]:off[i + 1]] @ Dr[i].T
    y = x @ system.C_stacked.T + v
    return x, y


def team_errors(x: np.ndarray, z: np.ndarray, cost: CostModel) -> np.ndarray:
    """c(x(t), z(t)) for every path and time."""
    e = x @ cost.L.T - z
    return np.einsum("...i,ij,...j->...", e, cost.S, e)


def monte_carlo(system: LinearSystem, cost: CostModel, strategies, T: int, paths: int, seed: int,
                chunk: int = 2000) -> dict:
    """Empirical total cost of each strategy on common random numbers."""
    if paths < 1:
        raise ValueError("need at least one path")
    totals = {s.name: np.empty(paths) for s in strategies}
    steps = {s.name: np.zeros(T) for s in strategies}
    for start in range(0, paths, chunk):
        m = min(chunk, paths - start)
        x, y = simulate_paths(system, T, m, seed, start)
        for s in strategies:
            c = team_errors(x, s.estimate(y), cost)
            totals[s.name][start:start + m] = c.sum(axis=1)
            steps[s.name] += c.sum(axis=0)
    out = {}
    for s in strategies:
        tot = totals[s.name]
        se = float(tot.std(ddof=1) / np.sqrt(paths)) if paths > 1 else float("nan")
        out[s.name] = SimulationResult(s.name, paths, T, float(tot.mean()), se, steps[s.name] / paths, seed,
                                       s.describe())
    return out
