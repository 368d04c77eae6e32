from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import exact_symmetric_kernel
from tdjepa_lab.envs import MOVES, build_gridworld, grid_cells, sample_random_mdp
from tdjepa_lab.mdp import (
    TabularMDP,
    adjoint_kernel,
    deterministic_policy,
    policy_kernel,
    policy_value,
    q_values,
    rho_inner,
    rollout_values,
    successor_features,
    successor_measure,
    uniform_policy,
    value_iteration,
    value_of,
)

SWAP = np.array([[0.0, 1.0], [1.0, 0.0]])
SWAP_M = np.array([[2 / 3, 4 / 3], [4 / 3, 2 / 3]])  # series sum_t 0.5^t SWAP^(t+1)

seeds = st.integers(0, 2**32 - 1)
gammas = st.sampled_from([0.0, 0.3, 0.5, 0.9, 0.95])


def random_mdp(seed, S=6, A=3, gamma=0.9, **kw):
    return sample_random_mdp(np.random.default_rng(seed), S, A, gamma, **kw)


def test_mdp_validation():
    with pytest.raises(ValueError):
        TabularMDP(np.array([[[0.5, 0.4], [0.0, 1.0]]]), 0.9)
    with pytest.raises(ValueError):
        TabularMDP(np.eye(2)[None], 1.0)
    with pytest.raises(ValueError):
        TabularMDP(np.eye(2)[None], 0.5, rho=[0.7, 0.7])
    with pytest.raises(ValueError):
        TabularMDP(np.eye(2)[None], 0.5, d_rho_mode="bogus")


def test_d_rho_modes():
    mdp = TabularMDP(np.eye(4)[None], 0.5, rho=[0.1, 0.2, 0.3, 0.4])
    assert np.allclose(mdp.d_rho(), [0.4, 0.8, 1.2, 1.6])
    assert np.allclose(mdp.with_mode("literal").d_rho(), [0.1, 0.2, 0.3, 0.4])
    assert np.allclose(TabularMDP(np.eye(4)[None], 0.5).d_rho(), np.ones(4))


def test_policy_kernel_examples():
    mdp = random_mdp(0, A=1)
    assert np.array_equal(policy_kernel(mdp, np.ones((mdp.n_states, 1))), mdp.P[0])
    mdp = random_mdp(1, A=2)
    assert np.allclose(policy_kernel(mdp, deterministic_policy(np.ones(mdp.n_states, int), 2)), mdp.P[1])
    p = policy_kernel(mdp, uniform_policy(mdp))
    assert np.allclose(p, 0.5 * (mdp.P[0] + mdp.P[1]), atol=1e-15)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-14)


def test_policy_validation():
    mdp = random_mdp(0, A=2)
    with pytest.raises(ValueError):
        policy_kernel(mdp, np.full((mdp.n_states, 2), 0.7))


def test_successor_measure_examples():
    assert np.max(np.abs(successor_measure(np.eye(3), 0.9) - 10 * np.eye(3))) < 1e-12
    p = random_mdp(3).P[0]
    assert np.array_equal(successor_measure(p, 0.0), p)
    assert np.max(np.abs(successor_measure(SWAP, 0.5) - SWAP_M)) < 1e-9
    with pytest.raises(ValueError):
        successor_measure(SWAP, 1.0)


def test_swap_chain_matches_truncated_series():
    series = sum(0.5**t * np.linalg.matrix_power(SWAP, t + 1) for t in range(101))
    assert np.max(np.abs(successor_measure(SWAP, 0.5) - series)) < 1e-9


def test_value_of_examples():
    assert np.array_equal(value_of(SWAP_M, np.zeros(2)), np.zeros(2))
    assert np.max(np.abs(value_of(SWAP_M, [0.0, 1.0]) - [4 / 3, 2 / 3])) < 1e-12


def test_value_of_matches_monte_carlo():
    rng = np.random.default_rng(5)
    mdp = random_mdp(5, S=5, A=2, gamma=0.9)
    pi = rng.dirichlet(np.ones(2), size=5)
    r = rng.standard_normal(5)
    v = policy_value(mdp, pi, r)
    rets = rollout_values(mdp, pi, r, rng, 100_000, 200, start=2)
    se = rets.std(ddof=1) / np.sqrt(rets.size)
    assert abs(rets.mean() - v[2]) < 3 * se


def test_successor_features_examples(rng):
    m = successor_measure(random_mdp(2).P[0], 0.9)
    assert np.array_equal(successor_features(m, np.eye(6)), m)
    psi = rng.standard_normal((6, 3))
    f = successor_features(m, psi)
    for j in range(3):
        assert np.allclose(f[:, j], value_of(m, psi[:, j]), rtol=0, atol=1e-12)


@given(seeds, gammas)
def test_successor_measure_bellman_forms(seed, gamma):
    p = random_mdp(seed).P[1]
    m = successor_measure(p, gamma)
    assert np.linalg.norm(m - p - gamma * p @ m) < 1e-9
    assert np.linalg.norm(m - p - gamma * m @ p) < 1e-9
    assert np.max(np.abs(m.sum(axis=1) - 1 / (1 - gamma))) < 1e-9
    assert m.min() >= -1e-12


@given(seeds, gammas)
def test_symmetric_kernel_gives_symmetric_measure(seed, gamma):
    p = exact_symmetric_kernel(seed)
    assert np.array_equal(p, p.T)
    m = successor_measure(p, gamma)
    assert np.max(np.abs(m - m.T)) < 1e-10


def test_adjoint_examples(rng):
    k = random_mdp(0).P[0]
    uni = np.full(6, 1 / 6)
    assert np.allclose(adjoint_kernel(k, uni), k.T, atol=1e-15)
    ks = random_mdp(0, symmetric=True).P[0]
    assert np.allclose(adjoint_kernel(ks, uni), ks, atol=1e-9)
    with pytest.raises(ValueError):
        adjoint_kernel(k, np.r_[0.0, np.full(5, 0.2)])


@given(seeds)
def test_adjoint_inner_product_identity(seed):
    r = np.random.default_rng(seed)
    k = r.random((5, 5))
    rho = r.random(5) + 0.1
    rho /= rho.sum()
    f, g = r.standard_normal(5), r.standard_normal(5)
    assert abs(rho_inner(k @ f, g, rho) - rho_inner(f, adjoint_kernel(k, rho) @ g, rho)) < 1e-10


def test_value_iteration_examples(rng):
    mdp = random_mdp(4, gamma=0.0)
    r = rng.standard_normal(6)
    v, _ = value_iteration(mdp, r)
    assert np.allclose(v, (mdp.P @ r).max(axis=0), atol=1e-12)
    one = random_mdp(4, A=1, gamma=0.9)
    v, _ = value_iteration(one, r)
    assert np.allclose(v, value_of(successor_measure(one.P[0], 0.9), r), atol=1e-8)
    with pytest.raises(ValueError):
        value_iteration(one, r, tol=0.0)


def test_value_iteration_residual():
    mdp = random_mdp(8, gamma=0.95)
    r = np.random.default_rng(8).standard_normal(6)
    v, pi = value_iteration(mdp, r, tol=1e-10)
    assert np.max(np.abs(v - q_values(mdp, r, v).max(axis=1))) <= 1e-10
    assert np.array_equal(pi.argmax(axis=1), q_values(mdp, r, v).argmax(axis=1))


def _bfs(width, height, goal):
    dist = {goal: 0}
    queue = deque([goal])
    while queue:
        x, y = queue.popleft()
        for dx, dy in MOVES:
            n = (x + dx, y + dy)
            if 0 <= n[0] < width and 0 <= n[1] < height and n not in dist:
                dist[n] = dist[(x, y)] + 1
                queue.append(n)
    return dist


@pytest.mark.parametrize("goal", [0, 7, 12, 24])
def test_greedy_follows_shortest_paths(goal):
    mdp = build_gridworld(5, 5, slip=0.0, gamma=0.9)
    cells = grid_cells(5, 5, ())
    r = np.zeros(25)
    r[goal] = 1.0
    _, pi = value_iteration(mdp, r)
    dist = _bfs(5, 5, cells[goal])
    for s, cell in enumerate(cells):
        a = int(pi[s].argmax())
        nxt = int(mdp.P[a, s].argmax())
        if s == goal:
            # stay when a bump keeps the agent on the goal, else step off and back
            can_stay = any(mdp.P[b, s, s] == 1.0 for b in range(4))
            assert (nxt == goal) == can_stay
        else:
            assert dist[cells[nxt]] == dist[cell] - 1


def test_ties_break_to_lowest_action():
    mdp = TabularMDP(np.stack([np.eye(2)] * 3), 0.5)
    _, pi = value_iteration(mdp, np.ones(2))
    assert np.array_equal(pi.argmax(axis=1), [0, 0])


@given(seeds)
def test_optimal_value_dominates_random_policies(seed):
    r_ = np.random.default_rng(seed)
    mdp = random_mdp(seed, gamma=0.9)
    r = r_.standard_normal(6)
    v_star, _ = value_iteration(mdp, r)
    for _ in range(20):
        pi = r_.dirichlet(np.ones(3), size=6)
        assert np.all(v_star >= policy_value(mdp, pi, r) - 1e-9)
