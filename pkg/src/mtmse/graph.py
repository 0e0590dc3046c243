"""Delay-weighted communication graphs and the common/local information split.

Agent ``i`` knows ``y_j(s)`` at time ``t`` iff ``1 <= s <= t - dist[j, i]``,
where ``dist[j, i]`` is the delay-weighted shortest path from ``j`` to ``i``.
With ``tau_star`` the weighted diameter, ``y(1:t - tau_star)`` is common to
every agent; the rest of agent ``i``'s information is the set of entries
``(j, k)`` (measurement ``y_j(t - k)``) with ``dist[j, i] <= k < tau_star``.

Local information is expressed through the anchor state ``x(a)`` with
``a = max(1, t - tau_star + 1)``. For ``t >= tau_star`` the anchor is the
delayed state ``x(t - tau_star + 1)`` and everything is time-invariant; for
``t < tau_star`` (warm-up) the anchor is ``x(1)`` and entries with
``t - k < 1`` are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np
from scipy.sparse.csgraph import shortest_path

from .model import DimensionError, LinearSystem


class GraphError(ValueError):
    """The communication graph cannot support the information split."""


@dataclass(frozen=True)
class CommGraph:
    """Directed graph on agents ``0..n-1``; ``delays[(i, j)]`` is the delay of edge i -> j."""

    n: int
    delays: Mapping

    def __post_init__(self):
        clean = {}
        for (i, j), tau in dict(self.delays).items():
            i, j = int(i), int(j)
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise GraphError(f"edge ({i}, {j}) references a node outside 0..{self.n - 1}")
            if i == j:
                raise GraphError(f"self-loop on node {i}")
            if int(tau) != tau or tau < 1:
                raise GraphError(f"delay on edge ({i}, {j}) must be a positive integer, got {tau}")
            clean[(i, j)] = int(tau)
        object.__setattr__(self, "delays", clean)

    @classmethod
    def from_edges(cls, n: int, edges: Iterable) -> "CommGraph":
        """Build from ``(i, j, delay)`` triples."""
        return cls(n, {(i, j): d for i, j, d in edges})

    @classmethod
    def complete(cls, n: int, delay: int = 1) -> "CommGraph":
        return cls(n, {(i, j): delay for i in range(n) for j in range(n) if i != j})

    @classmethod
    def chain(cls, n: int, delay: int = 1) -> "CommGraph":
        """Bidirectional line 0 - 1 - ... - n-1."""
        d = {}
        for i in range(n - 1):
            d[(i, i + 1)] = delay
            d[(i + 1, i)] = delay
        return cls(n, d)

    def in_neighbors(self, i: int) -> list[int]:
        return sorted(j for (j, k) in self.delays if k == i)

    def max_in_degree(self) -> int:
        return max((len(self.in_neighbors(i)) for i in range(self.n)), default=0)


def geodesics(graph: CommGraph) -> tuple[np.ndarray, int]:
    """Weighted shortest-path matrix ``dist[i, j]`` (i to j) and the weighted diameter.

    Raises ``GraphError`` naming an unreachable ordered pair when the graph is
    not strongly connected.
    """
    n = graph.n
    W = np.zeros((n, n))
    for (i, j), tau in graph.delays.items():
        W[i, j] = tau
    dist = shortest_path(W, method="D", directed=True)
    bad = np.argwhere(~np.isfinite(dist))
    if len(bad):
        i, j = bad[0]
        raise GraphError(f"graph is not strongly connected: no path from {i} to {j}")
    dist = dist.astype(int)
    return dist, int(dist.max())


@dataclass(frozen=True)
class InfoStructure:
    """Per-agent local entries ``(source, lag)`` in canonical order.

    Canonical order: descending lag (oldest measurement first), then ascending
    source index.
    """

    tau_star: int
    dist: np.ndarray
    entries: tuple

    @property
    def n(self) -> int:
        return len(self.entries)

    @classmethod
    def single_agent(cls) -> "InfoStructure":
        """Centralized filtering: one agent, common past y(1:t-1), local y(t)."""
        return cls(1, np.zeros((1, 1), dtype=int), (((0, 0),),))

    def entries_at(self, i: int, t: int) -> tuple:
        """Entries of agent ``i`` that exist at time ``t`` (warm-up truncation)."""
        return tuple((j, k) for j, k in self.entries[i] if t - k >= 1)

    def knows(self, i: int, j: int, s: int, t: int) -> bool:
        """Whether y_j(s) belongs to I_i(t)."""
        return 1 <= s <= t - self.dist[j, i]

    def common_measurements(self, t: int) -> set:
        return {(j, s) for j in range(self.n) for s in range(1, t - self.tau_star + 1)}

    def local_measurements(self, i: int, t: int) -> set:
        return {(j, t - k) for j, k in self.entries_at(i, t)}


def build_info_structure(graph: CommGraph) -> InfoStructure:
    dist, tau_star = geodesics(graph)
    if graph.n < 2 or tau_star < 1:
        raise GraphError(
            "need at least two agents and a positive weighted diameter; "
            "use InfoStructure.single_agent() for centralized filtering"
        )
    entries = []
    for i in range(graph.n):
        e = [(j, k) for k in range(tau_star - 1, -1, -1) for j in range(graph.n) if dist[j, i] <= k]
        entries.append(tuple(e))
    dist.setflags(write=False)
    return InfoStructure(tau_star, dist, tuple(entries))


def simulate_information_recursion(graph: CommGraph, T: int) -> list[list[set]]:
    """Propagate I_i(t) = {y_i(1:t)} U (U_j I_j(t - tau_ji)) literally.

    Returns ``sets[t][i]`` for t = 0..T, each a set of ``(source, time)``
    pairs; ``sets[t]`` is empty for t <= 0.
    """
    n = graph.n
    sets = [[set() for _ in range(n)] for _ in range(T + 1)]
    incoming = {i: [(j, graph.delays[(j, i)]) for j in graph.in_neighbors(i)] for i in range(n)}
    for t in range(1, T + 1):
        for i in range(n):
            s = {(i, r) for r in range(1, t + 1)}
            for j, tau in incoming[i]:
                if t - tau >= 1:
                    s |= sets[t - tau][j]
            sets[t][i] = s
    return sets


@dataclass(frozen=True)
class LocalSnapshot:
    """Local observation model of every agent at one time step.

    The noise stack is ``w(a), ..., w(t-1)`` with ``a`` the anchor time, so
    ``m = t - a`` process-noise slots. ``W_coef[i]`` maps that stack into
    ``w_loc_i(t)``; ``state_noise`` maps it into ``x(t) - A^p x(a)``.
    """

    t: int
    anchor: int
    p: int
    propagate: np.ndarray
    entries: tuple
    C_loc: tuple
    W_coef: tuple
    state_noise: np.ndarray

    @property
    def n(self) -> int:
        return len(self.entries)

    def rows(self, i: int) -> int:
        return self.C_loc[i].shape[0]


@dataclass(frozen=True)
class LocalObservationModel:
    """I_loc_i(t) = C_loc_i x(a) + w_loc_i(t) + v_loc_i(t), for every t.

    Snapshots are stored for t = 1..tau_star; later times reuse the last one.
    """

    info: InfoStructure
    system: LinearSystem
    snapshots: tuple

    def at(self, t: int) -> LocalSnapshot:
        if t < 1:
            raise ValueError("time starts at 1")
        return self.snapshots[min(t, len(self.snapshots)) - 1]

    @cached_property
    def stationary(self) -> LocalSnapshot:
        return self.snapshots[-1]

    def slices(self, i: int, t: int) -> list[slice]:
        """Positions in the stacked measurement y(t-k) for each local entry of agent i."""
        off = self.system.measurement_offsets()
        return [slice(off[j], off[j + 1]) for j, _ in self.at(t).entries[i]]


def _snapshot(info: InfoStructure, system: LinearSystem, t: int) -> LocalSnapshot:
    A, dx = system.A, system.d_x
    anchor = max(1, t - info.tau_star + 1)
    p = t - anchor
    m = p  # w(anchor) .. w(t-1)
    powers = [np.eye(dx)]
    for _ in range(max(p, 1)):
        powers.append(A @ powers[-1])

    entries, C_loc, W_coef = [], [], []
    for i in range(info.n):
        ent = info.entries_at(i, t)
        rows_C, rows_W = [], []
        for j, k in ent:
            Cj = system.C[j]
            rows_C.append(Cj @ powers[p - k])
            W = np.zeros((Cj.shape[0], dx * m))
            # y_j(t-k) picks up C_j A^{t-k-s-1} w(s) for anchor <= s <= t-k-1
            for s in range(anchor, t - k):
                col = s - anchor
                W[:, col * dx:(col + 1) * dx] = Cj @ powers[t - k - s - 1]
            rows_W.append(W)
        entries.append(ent)
        C_loc.append(np.vstack(rows_C) if rows_C else np.zeros((0, dx)))
        W_coef.append(np.vstack(rows_W) if rows_W else np.zeros((0, dx * m)))

    G = np.zeros((dx, dx * m))
    for s in range(anchor, t):
        col = s - anchor
        G[:, col * dx:(col + 1) * dx] = powers[t - s - 1]
    return LocalSnapshot(t, anchor, p, powers[p], tuple(entries), tuple(C_loc), tuple(W_coef), G)


def build_local_observation_model(info: InfoStructure, system: LinearSystem) -> LocalObservationModel:
    if info.n != system.n:
        raise DimensionError(f"graph has {info.n} agents, system has {system.n}")
    if info.tau_star < 1:
        raise GraphError("weighted diameter must be at least 1")
    snaps = tuple(_snapshot(info, system, t) for t in range(1, info.tau_star + 1))
    return LocalObservationModel(info, system, snaps)
