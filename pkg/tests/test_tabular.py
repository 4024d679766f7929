import numpy as np
import pytest

from ditto.tabular import (
    TabularMDP, chain_mdp, deterministic_policy, dumps_mdp, flow_residual, load_mdp, loads_mdp,
    max_admissible_eps, occupancy, random_mdp, rprime_check, save_mdp, smoothed_reward_table,
    solve_intrinsic, sparse_reward_table, support_pairs, tv_distance,
)


def alternation(gamma=0.5):
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = P[1, 0, 0] = 1.0
    return TabularMDP(P, np.array([1.0, 0.0]), gamma)


def test_single_state():
    mdp = TabularMDP(np.ones((1, 1, 1)), np.ones(1), 0.9)
    np.testing.assert_allclose(occupancy(mdp, np.ones((1, 1))), [[1.0]], atol=1e-12)


def test_alternation_hand_case():
    rho = occupancy(alternation(0.5), np.ones((2, 1)))
    assert abs(rho[0, 0] - 2 / 3) < 1e-9 and abs(rho[1, 0] - 1 / 3) < 1e-9


@pytest.mark.parametrize("gamma", [0.1, 0.5, 0.9, 0.99])
def test_alternation_closed_form(gamma):
    rho = occupancy(alternation(gamma), np.ones((2, 1)))
    assert abs(rho[0, 0] - 1 / (1 + gamma)) < 1e-9


def test_symmetric_mdp_uniform():
    n, A = 4, 2
    P = np.full((n, A, n), 1 / n)
    mdp = TabularMDP(P, np.full(n, 1 / n), 0.8)
    np.testing.assert_allclose(occupancy(mdp, np.full((n, A), 1 / A)), np.full((n, A), 1 / (n * A)), atol=1e-12)


def test_flow_constraints_random(rng):
    for _ in range(100):
        S, A = int(rng.integers(1, 11)), int(rng.integers(1, 4))
        mdp = random_mdp(rng, S, A, float(rng.uniform(0, 0.99)))
        pi = rng.random((S, A))
        pi /= pi.sum(1, keepdims=True)
        rho = occupancy(mdp, pi)
        assert flow_residual(mdp, rho) < 1e-9
        assert abs(rho.sum() - 1) < 1e-9 and (rho >= -1e-15).all()


def test_occupancy_matches_monte_carlo(rng):
    mdp = random_mdp(rng, 3, 2, 0.7)
    pi = np.full((3, 2), 0.5)
    rho = occupancy(mdp, pi)
    # truncated power series as an independent check
    dist = mdp.mu[:, None] * pi
    acc = np.zeros_like(rho)
    for t in range(400):
        acc += (1 - mdp.gamma) * mdp.gamma ** t * dist
        state = np.einsum("sa,sat->t", dist, mdp.P)
        dist = state[:, None] * pi
    np.testing.assert_allclose(rho, acc, atol=1e-12)


def test_singular_gamma_one():
    with pytest.raises(np.linalg.LinAlgError):
        occupancy(alternation(1.0), np.ones((2, 1)))


def test_invalid_inputs():
    with pytest.raises(ValueError):
        TabularMDP(np.full((2, 1, 2), 0.6), np.array([1.0, 0.0]), 0.5)
    with pytest.raises(ValueError):
        TabularMDP(np.full((2, 1, 2), 0.5), np.array([0.7, 0.7]), 0.5)
    with pytest.raises(ValueError):
        occupancy(alternation(), np.full((2, 1), 0.5))


def test_tv_examples():
    assert tv_distance([0.5, 0.5], [0.5, 0.5]) == 0
    assert tv_distance([1, 0], [0, 1]) == 1
    assert tv_distance([0.5, 0.5], [0.75, 0.25]) == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(ValueError):
        tv_distance([1.0], [0.5, 0.5])


def test_tv_metric_properties(rng):
    for _ in range(200):
        p, q, r = (x / x.sum() for x in rng.random((3, 6)))
        assert tv_distance(p, q) == pytest.approx(tv_distance(q, p))
        assert tv_distance(p, p) == 0
        assert tv_distance(p, r) <= tv_distance(p, q) + tv_distance(q, r) + 1e-12
        assert 0 <= tv_distance(p, q) <= 1


def test_rprime_sparse_reward():
    pairs = {(0, 1), (2, 0)}
    ok, violations = rprime_check(sparse_reward_table((3, 2), pairs), pairs, eps=1.0)
    assert ok and violations == []


def test_rprime_boundary_violation():
    pairs = {(0, 1)}
    r = sparse_reward_table((3, 2), pairs)
    r[1, 1] = 0.999
    ok, violations = rprime_check(r, pairs, eps=0.01)
    assert not ok
    assert [(v.state, v.action) for v in violations] == [(1, 1)]


def test_rprime_expert_pair_not_one():
    ok, violations = rprime_check(np.zeros((2, 2)), {(0, 0)}, eps=0.5)
    assert not ok and "expert" in violations[0].reason
    with pytest.raises(ValueError):
        rprime_check(np.zeros((2, 2)), {(0, 0)}, eps=0)


def test_smoothed_reward_admissible_eps():
    # 3x3 gridworld; embedding = one-hot position concatenated with one-hot action
    S, A = 9, 4
    emb = np.zeros((S, A, S + A))
    for s in range(S):
        for a in range(A):
            emb[s, a, s] = emb[s, a, S + a] = 1.0
    pairs = {(0, 1), (1, 1), (2, 3)}
    r = smoothed_reward_table(emb, pairs)
    off = [r[s, a] for s in range(S) for a in range(A) if (s, a) not in pairs]
    eps = max_admissible_eps(r, pairs)
    assert eps == pytest.approx(1 - max(off))
    assert eps == pytest.approx(0.5)  # same position or same action shares half the norm
    assert rprime_check(r, pairs, eps)[0]
    assert not rprime_check(r, pairs, eps + 1e-6)[0]


def test_solve_zero_reward():
    mdp = chain_mdp(5, 0.9)
    pi, V = solve_intrinsic(mdp, np.zeros((5, 2)))
    np.testing.assert_array_equal(V, 0)
    np.testing.assert_array_equal(pi.argmax(1), 0)


def test_solve_self_loop():
    mdp = chain_mdp(3, 0.9)
    r = np.zeros((3, 2))
    r[2, 1] = 2.0  # state 2 with action 1 loops on itself
    _, V = solve_intrinsic(mdp, r)
    assert V[2] == pytest.approx(2.0 / (1 - 0.9), abs=1e-8)


def test_chain_full_coverage_zero_tv():
    mdp = chain_mdp(5, 0.9)
    expert = deterministic_policy([1] * 5, 2)
    rho_e = occupancy(mdp, expert)
    pairs = support_pairs(rho_e)
    assert pairs == {(s, 1) for s in range(5)}
    pi, _ = solve_intrinsic(mdp, sparse_reward_table((5, 2), pairs))
    assert tv_distance(occupancy(mdp, pi), rho_e) < 1e-6


def _expert_visit_order(mdp, actions):
    order, s = [], 0
    for _ in range(3 * mdp.n_states):
        pair = (s, int(actions[s]))
        if pair not in order:
            order.append(pair)
        s = int(np.argmax(mdp.P[s, actions[s]]))
    return order


def test_coverage_monotonicity_chain_family(rng):
    """Covering more of the expert's trajectory never increases the achieved TV."""
    for _ in range(100):
        n = int(rng.integers(3, 9))
        mdp = chain_mdp(n, float(rng.uniform(0.5, 0.95)))
        actions = rng.integers(2, size=n)
        rho_e = occupancy(mdp, deterministic_policy(actions, 2))
        order = _expert_visit_order(mdp, actions)
        tvs = []
        for k in range(1, len(order) + 1):
            pi, _ = solve_intrinsic(mdp, sparse_reward_table((n, 2), order[:k]))
            tvs.append(tv_distance(occupancy(mdp, pi), rho_e))
        assert all(b <= a + 1e-9 for a, b in zip(tvs, tvs[1:])), tvs
        assert tvs[-1] < 1e-6


def test_text_format_round_trip(tmp_path, rng):
    mdp = random_mdp(rng, 4, 3, 0.77)
    back = loads_mdp(dumps_mdp(mdp))
    np.testing.assert_array_equal(back.P, mdp.P)
    np.testing.assert_array_equal(back.mu, mdp.mu)
    assert back.gamma == mdp.gamma
    save_mdp(mdp, tmp_path / "m.txt")
    assert load_mdp(tmp_path / "m.txt").n_states == 4
    with pytest.raises(ValueError):
        loads_mdp("TABMDP 2\n1 1 0.5\n1\n1\n")
