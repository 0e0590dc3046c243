import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import FullInfoProblem, random_static_instance
from mtmse.estimator_static import (
    GainSystemError,
    GaussianJointModel,
    innovation_model,
    mtmse_estimate,
    optimal_static_cost,
    solve_team_gains,
    team_cost,
    unvec,
    vec,
)
from mtmse.model import CostModel
from mtmse.scenario import static_joint_model, two_agent_scenario


def intro(sigma, lam):
    sc = two_agent_scenario(sigma, lam)
    return innovation_model(static_joint_model(sc)), sc.cost


def test_vec_is_column_stacking():
    rng = np.random.default_rng(0)
    A, B, C = rng.standard_normal((2, 3)), rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    assert np.allclose(vec(A @ B @ C), np.kron(C.T, A) @ vec(B))
    assert np.array_equal(unvec(vec(B), B.shape), B)


@pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0])
def test_intro_innovation_model(sigma):
    inn, _ = intro(sigma, 4.0)
    for i in range(2):
        assert np.allclose(inn.theta_hat[i], 1.0)
        for j in range(2):
            assert np.isclose(inn.sigma_hat[i][j][0, 0], 1 + sigma**2 * (i == j))


def test_common_measurement_reveals_state():
    rng = np.random.default_rng(1)
    d = 2
    Sx = np.array([[2.0, 0.3], [0.3, 1.0]])
    H = rng.standard_normal((1, d))
    cov_y1 = H @ Sx @ H.T + 0.5
    cov = np.block([
        [Sx, Sx, Sx @ H.T],
        [Sx, Sx, Sx @ H.T],
        [H @ Sx, H @ Sx, cov_y1],
    ])
    inn = innovation_model(GaussianJointModel.from_covariance(cov, d, [d, 1]))
    assert np.allclose(inn.theta_hat[0], 0, atol=1e-12)
    cost = CostModel([[np.eye(d)]], [np.eye(d)])
    gains = solve_team_gains(inn, cost)
    x = np.array([0.7, -1.2])
    for y1 in (np.array([5.0]), np.array([-3.0])):
        z = mtmse_estimate(inn, gains, cost, x, [y1])
        assert np.allclose(z[0], x, atol=1e-10)
    # Theta_hat = 0 gives J* = Tr(L'SL P0) = 0 here
    assert abs(optimal_static_cost(inn, cost, inn.P0, gains)) < 1e-12


def test_innovation_is_schur_complement():
    rng = np.random.default_rng(2)
    cov, joint, _, d0, dys = random_static_instance(rng, n=3, d_x=2, d0=2)
    inn = innovation_model(joint)
    dx = 2
    c0 = slice(dx, dx + d0)
    rest = np.r_[0:dx, dx + d0:cov.shape[0]]
    schur = cov[np.ix_(rest, rest)] - cov[np.ix_(rest, range(dx, dx + d0))] @ np.linalg.solve(
        cov[c0, c0], cov[np.ix_(range(dx, dx + d0), rest)])
    off = np.concatenate([[dx], dx + np.cumsum(dys)]).astype(int)
    for i in range(3):
        assert np.allclose(inn.theta_hat[i], schur[:dx, off[i]:off[i + 1]])
        for j in range(3):
            assert np.allclose(inn.sigma_hat[i][j], schur[off[i]:off[i + 1], off[j]:off[j + 1]])
    assert np.allclose(inn.P0, schur[:dx, :dx])


def test_singular_common_block_raises():
    cov = np.eye(4)
    cov[1:3, 1:3] = 1.0  # y_0 two identical copies
    with pytest.raises(GainSystemError, match="Sigma_00"):
        innovation_model(GaussianJointModel.from_covariance(cov, 1, [2, 1]))


def test_intro_gains_and_cost():
    inn, cost = intro(1.0, 4.0)
    g = solve_team_gains(inn, cost)
    assert np.allclose(g.gamma, [[4, 1], [1, 4]])
    assert np.allclose(g.eta, [3, 3])
    assert np.allclose([g.F[0][0, 0], g.F[1][0, 0]], 0.6, atol=1e-12)
    assert abs(optimal_static_cost(inn, cost, inn.P0, g) - 2.4) < 1e-12
    z = mtmse_estimate(inn, g, cost, None, [np.array([1.0]), np.array([0.0])])
    assert np.isclose(z[0][0], 0.6)
    z = mtmse_estimate(inn, g, cost, None, [np.zeros(1), np.zeros(1)])
    assert np.allclose(z, 0)


def test_intro_grid_minimisation():
    inn, cost = intro(1.0, 4.0)
    grid = np.linspace(0.0, 1.0, 201)
    best = min((team_cost([np.array([[a]]), np.array([[b]])], inn.sigma_hat, inn.theta_hat, cost, inn.P0), a, b)
               for a in grid for b in grid)
    assert np.isclose(best[1], 0.6) and np.isclose(best[2], 0.6)
    assert np.isclose(best[0], 2.4)


@pytest.mark.parametrize("sigma", [0.25, 1.0, 3.0])
def test_uncoupled_cost_is_twice_scalar_mmse(sigma):
    inn, cost = intro(sigma, 0.0)
    J = optimal_static_cost(inn, cost, inn.P0)
    assert np.isclose(J, 2 * sigma**2 / (1 + sigma**2), rtol=0, atol=1e-12)


def test_block_diagonal_cost_gives_mmse_gains():
    rng = np.random.default_rng(4)
    for _ in range(10):
        cov, joint, cost, _, _ = random_static_instance(rng)
        blocks = [[cost.S_blocks[i][j] if i == j else np.zeros_like(cost.S_blocks[i][j]) for j in range(cost.n)]
                  for i in range(cost.n)]
        diag = CostModel(blocks, cost.L_blocks)
        inn = innovation_model(joint)
        g = solve_team_gains(inn, diag)
        for i in range(cost.n):
            expected = cost.L_blocks[i] @ inn.theta_hat[i] @ np.linalg.inv(inn.sigma_hat[i][i])
            assert np.allclose(g.F[i], expected, atol=1e-10)


@pytest.mark.parametrize("s11", [0.1, 1.0, 50.0])
def test_single_agent_gain_independent_of_weight(s11):
    rng = np.random.default_rng(6)
    _, joint, _, _, _ = random_static_instance(rng, n=1, d_x=2, d0=1)
    inn = innovation_model(joint)
    L = rng.standard_normal((1, 2))
    g = solve_team_gains(inn, CostModel([[s11 * np.eye(1)]], [L]))
    assert np.allclose(g.F[0], L @ inn.theta_hat[0] @ np.linalg.inv(inn.sigma_hat[0][0]), atol=1e-10)


def test_zero_theta_hat_cost_is_trace():
    inn, cost = intro(1.0, 4.0)
    zero = [np.zeros((1, 1)), np.zeros((1, 1))]
    P0 = np.array([[0.7]])
    inn0 = type(inn)(tuple(zero), inn.sigma_hat, inn.x0_map, inn.y_maps, P0)
    assert np.isclose(optimal_static_cost(inn0, cost), np.trace(cost.L.T @ cost.S @ cost.L @ P0))


def test_mtmse_beats_random_and_matches_normal_equations():
    rng = np.random.default_rng(7)
    for _ in range(10):
        cov, joint, cost, d0, dys = random_static_instance(rng)
        inn = innovation_model(joint)
        g = solve_team_gains(inn, cost)
        J = optimal_static_cost(inn, cost, inn.P0, g)
        prob = FullInfoProblem(cov, joint.d_x, d0, dys, cost)
        G_opt = prob.minimizer()
        assert abs(J - prob.cost_of(G_opt)) < 1e-6
        # the solver's strategy rewritten as z_i = G_i (y_0, y_i)
        G_mine = [np.hstack([cost.L_blocks[i] @ inn.x0_map - g.F[i] @ inn.y_maps[i], g.F[i]]) for i in range(cost.n)]
        assert abs(prob.cost_of(G_mine) - J) < 1e-8
        for _ in range(50):
            scale = 10.0 ** rng.uniform(-4, 0)
            G = [G_opt[i] + scale * rng.standard_normal(G_opt[i].shape) for i in range(cost.n)]
            assert J <= prob.cost_of(G) + 1e-8


def test_mmse_dominance():
    rng = np.random.default_rng(8)
    for _ in range(20):
        _, joint, cost, _, _ = random_static_instance(rng)
        inn = innovation_model(joint)
        J = optimal_static_cost(inn, cost, inn.P0)
        F_mmse = [cost.L_blocks[i] @ inn.theta_hat[i] @ np.linalg.inv(inn.sigma_hat[i][i]) for i in range(cost.n)]
        assert J <= team_cost(F_mmse, inn.sigma_hat, inn.theta_hat, cost, inn.P0) + 1e-9


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_agent_permutation_permutes_gains(seed):
    rng = np.random.default_rng(seed)
    _, joint, cost, _, _ = random_static_instance(rng, n=3)
    inn = innovation_model(joint)
    g = solve_team_gains(inn, cost)
    perm = rng.permutation(3)
    th = tuple(inn.theta_hat[p] for p in perm)
    sg = tuple(tuple(inn.sigma_hat[p][q] for q in perm) for p in perm)
    pcost = CostModel([[cost.S_blocks[p][q] for q in perm] for p in perm], [cost.L_blocks[p] for p in perm])
    gp = solve_team_gains(type(inn)(th, sg, inn.x0_map, inn.y_maps, inn.P0), pcost)
    for k, p in enumerate(perm):
        assert np.allclose(gp.F[k], g.F[p], atol=1e-9)


def test_residual_recorded_and_small():
    rng = np.random.default_rng(9)
    for _ in range(10):
        _, joint, cost, _, _ = random_static_instance(rng)
        assert solve_team_gains(innovation_model(joint), cost).residual < 1e-9


def test_indefinite_gamma_raises():
    inn, cost = intro(1.0, 4.0)
    bad = ((np.array([[-1.0]]), inn.sigma_hat[0][1]), (inn.sigma_hat[1][0], np.array([[-1.0]])))
    with pytest.raises(GainSystemError, match="min eigenvalue"):
        solve_team_gains(type(inn)(inn.theta_hat, bad, inn.x0_map, inn.y_maps, inn.P0), cost)
