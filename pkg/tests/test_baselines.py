import numpy as np
import pytest

from conftest import random_stable_system, structures
from oracles import textbook_kalman_filter
from mtmse.baselines import (
    ConsensusKF,
    consensus_kf_strategy,
    mmse_cost,
    mmse_strategy,
    monte_carlo,
    mtmse_strategy,
    simulate_paths,
)
from mtmse.filter import centralized_model, gain_schedule, optimal_cost_finite
from mtmse.graph import CommGraph, build_info_structure, build_local_observation_model
from mtmse.model import CostModel, LinearSystem, build_average_coupling_cost
from mtmse.scenario import two_agent_scenario


def intro_filter(sigma=1.0, lam=4.0):
    sc = two_agent_scenario(sigma, lam)
    info, lom = structures(sc)
    return sc, info, lom


def block_diagonal(cost):
    return CostModel([[cost.S_blocks[i][j] if i == j else 0 * cost.S_blocks[i][j] for j in range(cost.n)]
                      for i in range(cost.n)], cost.L_blocks)


def test_mmse_equals_mtmse_for_block_diagonal(uav, platoon):
    for sc in (uav, platoon):
        info, lom = structures(sc)
        cost = block_diagonal(sc.cost)
        T = 20
        _, y = simulate_paths(sc.system, T, 30, seed=1)
        a = mtmse_strategy(sc.system, cost, info, lom, T).estimate(y)
        b = mmse_strategy(sc.system, cost, info, lom, T).estimate(y)
        assert np.abs(a - b).max() < 1e-9


def test_mmse_centralized_is_kalman_filter():
    rng = np.random.default_rng(8)
    system = random_stable_system(rng, 1, 2, [1])
    info, lom = centralized_model(system)
    cost = CostModel([[np.eye(2)]], [np.eye(2)])
    _, y = simulate_paths(system, 40, 10, seed=2)
    z = mmse_strategy(system, cost, info, lom, 40).estimate(y)
    ref, _ = textbook_kalman_filter(system.A, system.C[0], system.Q, system.R[0], np.array(system.Sigma_x), y)
    assert np.abs(z - ref).max() < 1e-9


def test_intro_mmse_gain_and_cost():
    sc, info, lom = intro_filter()
    strat = mmse_strategy(sc.system, sc.cost, info, lom, 1)
    assert np.allclose([f[0, 0] for f in strat.schedule.F[0]], 0.5)
    J = mmse_cost(sc.system, sc.cost, info, lom, 1)
    assert abs(J - 2.5) < 1e-12
    assert abs(strat.analytic_total - 2.5) < 1e-12


def test_intro_mmse_cost_direct_sampling():
    """Independent draw of the one-shot problem with 10^6 samples."""
    rng = np.random.default_rng(0)
    N, lam = 1_000_000, 4.0
    x = rng.standard_normal(N)
    y = x[:, None] + rng.standard_normal((N, 2))
    e = x[:, None] - 0.5 * y
    c = (e**2).sum(axis=1) + lam / 4 * e.sum(axis=1) ** 2
    assert abs(c.mean() - 2.5) < 3 * c.std(ddof=1) / np.sqrt(N)


@pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0])
def test_uncoupled_mmse_cost_equals_optimum(sigma):
    sc, info, lom = intro_filter(sigma, 0.0)
    J = optimal_cost_finite(gain_schedule(sc.system, sc.cost, info, lom, 1))
    assert np.isclose(mmse_cost(sc.system, sc.cost, info, lom, 1), J, rtol=1e-12)


def test_large_coupling_improvement_limit():
    sc, info, lom = intro_filter(1.0, 1e8)
    J = optimal_cost_finite(gain_schedule(sc.system, sc.cost, info, lom, 1))
    J_mmse = mmse_cost(sc.system, sc.cost, info, lom, 1)
    assert abs((J_mmse - J) / J - 0.125) < 1e-6


def test_mmse_cost_dominates(uav, platoon):
    for sc in (uav, platoon):
        info, lom = structures(sc)
        J = optimal_cost_finite(gain_schedule(sc.system, sc.cost, info, lom, 30))
        assert J <= mmse_cost(sc.system, sc.cost, info, lom, 30)


def test_consensus_step_size_validation(uav):
    with pytest.raises(ValueError):
        consensus_kf_strategy(uav.system, uav.cost, uav.graph, step_size=0.5)
    with pytest.raises(ValueError):
        consensus_kf_strategy(uav.system, uav.cost, uav.graph, step_size=0.0)
    ckf = consensus_kf_strategy(uav.system, uav.cost, uav.graph)
    assert ckf.step_size == pytest.approx(0.65 / 3)
    assert ckf.describe() == {"name": "ckf", "consensus_iterations": 1, "step_size": ckf.step_size}


def test_consensus_agreement_complete_graph():
    n = 4
    A = np.array([[0.9, 0.1], [0.0, 0.8]])
    system = LinearSystem(A, [np.array([[1.0, 0.0]])] * n, np.eye(2), [[[0.5]]] * n, np.eye(2))
    cost = CostModel([[np.eye(2) if i == j else np.zeros((2, 2)) for j in range(n)] for i in range(n)],
                     [np.eye(2)] * n)
    ckf = ConsensusKF(system, cost, CommGraph.complete(n, 1), iterations=200)
    _, y = simulate_paths(system, 40, 5, seed=1)
    z = ckf.estimate(y).reshape(5, 40, n, 2)
    assert np.abs(z[:, -1] - z[:, -1, :1]).max() < 1e-6


def test_consensus_single_agent_is_local_kalman_filter():
    rng = np.random.default_rng(4)
    system = random_stable_system(rng, 1, 2, [1])
    cost = CostModel([[np.eye(2)]], [np.eye(2)])
    ckf = ConsensusKF(system, cost, CommGraph(1, {}), iterations=3)
    _, y = simulate_paths(system, 30, 6, seed=3)
    ref, _ = textbook_kalman_filter(system.A, system.C[0], system.Q, system.R[0], np.array(system.Sigma_x), y)
    assert np.abs(ckf.estimate(y) - ref).max() < 1e-9


def test_zero_noise_monte_carlo():
    system = LinearSystem(0.5 * np.eye(2), [np.eye(2), np.eye(2)], np.zeros((2, 2)),
                          [1e-12 * np.eye(2)] * 2, np.zeros((2, 2)))
    info = build_info_structure(CommGraph.complete(2, 2))
    lom = build_local_observation_model(info, system)
    cost = build_average_coupling_cost(2, 1, 1.0)
    res = monte_carlo(system, cost, [mtmse_strategy(system, cost, info, lom, 5)], 5, 10, seed=0)
    assert res["mtmse"].mean_total < 1e-20


def test_intro_monte_carlo_matches_closed_form():
    sc, info, lom = intro_filter()
    res = monte_carlo(sc.system, sc.cost, [mtmse_strategy(sc.system, sc.cost, info, lom, 1)], 1, 100_000, seed=0)
    r = res["mtmse"]
    assert abs(r.mean_total - 2.4) < 3 * r.std_error


def test_monte_carlo_reproducible_and_chunk_invariant(platoon):
    info, lom = structures(platoon)
    strategies = [mtmse_strategy(platoon.system, platoon.cost, info, lom, 12),
                  consensus_kf_strategy(platoon.system, platoon.cost, platoon.graph)]
    a = monte_carlo(platoon.system, platoon.cost, strategies, 12, 50, seed=9)
    b = monte_carlo(platoon.system, platoon.cost, strategies, 12, 50, seed=9)
    c = monte_carlo(platoon.system, platoon.cost, strategies, 12, 50, seed=9, chunk=7)
    for k in a:
        assert a[k].mean_total == b[k].mean_total and a[k].std_error == b[k].std_error
        assert np.array_equal(a[k].step_means, b[k].step_means)
        assert np.isclose(a[k].mean_total, c[k].mean_total, rtol=1e-13)
    assert a["ckf"].params["consensus_iterations"] == 1


def test_paths_are_keyed_not_sequential():
    system = LinearSystem(0.5, [1.0, 1.0], 1.0, [1.0, 1.0], 1.0)
    x_all, y_all = simulate_paths(system, 6, 5, seed=3)
    x_tail, y_tail = simulate_paths(system, 6, 2, seed=3, first_path=3)
    assert np.array_equal(x_all[3:], x_tail) and np.array_equal(y_all[3:], y_tail)


def test_strategies_respect_information_structure(platoon):
    """Perturbing a measurement outside I_i(t) must leave agent i's estimate at t unchanged."""
    sc = platoon
    info, lom = structures(sc)
    T = 8
    strategies = [mtmse_strategy(sc.system, sc.cost, info, lom, T), mmse_strategy(sc.system, sc.cost, info, lom, T),
                  consensus_kf_strategy(sc.system, sc.cost, sc.graph, iterations=2)]
    _, y = simulate_paths(sc.system, T, 1, seed=4)
    y = y[0]
    off = sc.system.measurement_offsets()
    base = [s.estimate(y) for s in strategies]
    for j in range(4):
        for s in range(1, T + 1):
            bumped = y.copy()
            bumped[s - 1, off[j]:off[j + 1]] += 10.0
            for strat, z0 in zip(strategies, base):
                z1 = strat.estimate(bumped)
                for i in range(4):
                    for t in range(1, T + 1):
                        if not info.knows(i, j, s, t):
                            assert np.array_equal(z0[t - 1, i], z1[t - 1, i]), (strat.name, i, j, s, t)


def test_strategy_ordering(uav):
    info, lom = structures(uav)
    T = 30
    strategies = [mtmse_strategy(uav.system, uav.cost, info, lom, T), mmse_strategy(uav.system, uav.cost, info, lom, T),
                  consensus_kf_strategy(uav.system, uav.cost, uav.graph)]
    res = monte_carlo(uav.system, uav.cost, strategies, T, 2000, seed=0)
    mt, mm, ck = res["mtmse"], res["mmse"], res["ckf"]
    assert strategies[0].analytic_total <= mmse_cost(uav.system, uav.cost, info, lom, T)
    assert mt.mean_total <= mm.mean_total + 3 * np.hypot(mt.std_error, mm.std_error)
    assert mm.mean_total <= ck.mean_total + 3 * np.hypot(mm.std_error, ck.std_error)
    assert ck.mean_total >= strategies[0].analytic_total
