import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from fedq.mdp_core import (
    ConvergenceError,
    MdpFormatError,
    TabularMdp,
    bellman_backup,
    greedy_policy,
    load_mdp,
    policy_evaluation,
    save_mdp,
    value_iteration,
)


def random_mdp(seed, n_states=6, n_actions=3, gamma=0.9):
    rng = np.random.default_rng(seed)
    p = rng.standard_exponential((n_states, n_actions, n_states))
    return TabularMdp(rng.random((n_states, n_actions)), p / p.sum(-1, keepdims=True), gamma)


def puterman_two_state(beta=0.95):
    # Puterman (2005) example 3.1 with the forbidden action given a finite reward
    p = np.empty((2, 2, 2))
    p[0, 0] = 0.5, 0.5
    p[0, 1] = 0.0, 1.0
    p[1, :] = 0.0, 1.0
    return TabularMdp(np.array([[5.0, 10.0], [-1.0, -1.0]]), p, beta)


def truncated_policy_value(mdp, policy, steps=10_000):
    """Independent oracle: plain loop of Bellman expectation updates."""
    v = np.zeros(mdp.n_states)
    for _ in range(steps):
        v = np.array([
            mdp.rewards[s, policy[s]] + mdp.gamma * sum(
                mdp.transitions[s, policy[s], t] * v[t] for t in range(mdp.n_states)
            )
            for s in range(mdp.n_states)
        ])
    return v


def test_single_state_closed_form():
    mdp = TabularMdp(np.array([[0.7]]), np.ones((1, 1, 1)), 0.9)
    q, _ = value_iteration(mdp)
    assert abs(q[0, 0] - 0.7 / 0.1) <= 1e-10 / 0.1


def test_puterman_analytic_values():
    # closed form holds where action 0 is optimal in state 0, i.e. beta > 10/11
    beta = 0.95
    mdp = puterman_two_state(beta)
    q, _ = value_iteration(mdp, tol=1e-12)
    v_star = [(5 - 5.5 * beta) / ((1 - 0.5 * beta) * (1 - beta)), -1 / (1 - beta)]
    assert_allclose(q.max(axis=1), v_star, atol=1e-10)
    assert_array_equal(greedy_policy(q), [0, 0])


def test_backup_matches_entrywise_sum():
    mdp = random_mdp(1)
    q = np.random.default_rng(2).random(mdp.shape) * 5
    expected = np.empty(mdp.shape)
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            expected[s, a] = mdp.rewards[s, a] + mdp.gamma * sum(
                mdp.transitions[s, a, t] * max(q[t]) for t in range(mdp.n_states)
            )
    assert_allclose(bellman_backup(mdp, q), expected, rtol=0, atol=1e-13)


def test_backup_batched_equals_loop():
    mdp = random_mdp(3)
    qs = np.random.default_rng(4).random((5,) + mdp.shape)
    batched = bellman_backup(mdp, qs)
    for i in range(5):
        assert_allclose(batched[i], bellman_backup(mdp, qs[i]), rtol=0, atol=1e-14)


def test_value_iteration_residual_certificate():
    mdp = random_mdp(5)
    q, iters = value_iteration(mdp, tol=1e-10)
    assert iters > 0
    assert np.abs(bellman_backup(mdp, q) - q).max() <= 1e-10


def test_greedy_value_matches_policy_evaluation_oracle():
    mdp = random_mdp(6, n_states=4, n_actions=2)
    q, _ = value_iteration(mdp, tol=1e-10)
    pi = greedy_policy(q)
    oracle = truncated_policy_value(mdp, pi, steps=2_000)
    assert_allclose(q.max(axis=1), oracle, atol=1e-6)
    assert_allclose(policy_evaluation(mdp, pi, tol=1e-10), oracle, atol=1e-8)


def test_greedy_ties_lowest_index():
    assert_array_equal(greedy_policy(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])), [0, 1])


def test_convergence_error_carries_best_iterate():
    mdp = random_mdp(7)
    with pytest.raises(ConvergenceError) as info:
        value_iteration(mdp, tol=1e-12, max_iters=3)
    assert info.value.iters == 3
    assert info.value.best.shape == mdp.shape
    assert info.value.residual > 1e-12


def test_validation_names_offending_row():
    p = np.full((3, 2, 3), 1 / 3)
    p[1, 0] = [0.5, 0.5, 0.1]
    with pytest.raises(MdpFormatError, match=r"s=1, a=0") as info:
        TabularMdp(np.zeros((3, 2)), p, 0.9)
    assert info.value.field == "transitions"


@pytest.mark.parametrize("gamma", [0.0, 1.0, -0.1, 1.5])
def test_gamma_out_of_range(gamma):
    with pytest.raises(MdpFormatError, match="gamma"):
        TabularMdp(np.zeros((1, 1)), np.ones((1, 1, 1)), gamma)


def test_shape_and_value_checks():
    with pytest.raises(MdpFormatError, match="transitions"):
        TabularMdp(np.zeros((2, 2)), np.ones((2, 2, 3)) / 3, 0.9)
    with pytest.raises(MdpFormatError, match="rewards"):
        TabularMdp(np.array([[np.nan]]), np.ones((1, 1, 1)), 0.9)
    with pytest.raises(ValueError, match="dimension mismatch"):
        bellman_backup(random_mdp(0), np.zeros((3, 3)))


def test_arrays_are_read_only():
    mdp = random_mdp(8)
    with pytest.raises(ValueError):
        mdp.transitions[0, 0, 0] = 1.0


def test_round_trip_is_bit_exact(tmp_path):
    mdp = random_mdp(9)
    save_mdp(mdp, tmp_path / "m.json")
    back = load_mdp(tmp_path / "m.json")
    assert_array_equal(back.rewards, mdp.rewards)
    assert_array_equal(back.transitions, mdp.transitions)
    assert back.gamma == mdp.gamma


def test_load_reports_field_and_json_position(tmp_path):
    doc = random_mdp(0).to_dict()
    del doc["gamma"]
    (tmp_path / "a.json").write_text(json.dumps(doc))
    with pytest.raises(MdpFormatError) as info:
        load_mdp(tmp_path / "a.json")
    assert info.value.field == "gamma"
    (tmp_path / "b.json").write_text('{"n_states": 1,\n "gamma": }')
    with pytest.raises(MdpFormatError, match="line 2"):
        load_mdp(tmp_path / "b.json")
    doc = random_mdp(0).to_dict()
    doc["rewards"] = doc["rewards"][:-1]
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(MdpFormatError, match="rewards"):
        load_mdp(tmp_path / "c.json")


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), gamma=st.floats(0.05, 0.99))
def test_backup_is_gamma_contraction(seed, gamma):
    mdp = random_mdp(seed % 1000, n_states=5, n_actions=3, gamma=gamma)
    rng = np.random.default_rng(seed)
    q1, q2 = rng.normal(size=(2,) + mdp.shape) * 10
    lhs = np.abs(bellman_backup(mdp, q1) - bellman_backup(mdp, q2)).max()
    assert lhs <= gamma * np.abs(q1 - q2).max() + 1e-12


def test_zero_q_backup_is_reward_table():
    mdp = random_mdp(10)
    assert_array_equal(bellman_backup(mdp, np.zeros(mdp.shape)), mdp.rewards)


def test_single_state_fixed_point_backup():
    mdp = TabularMdp(np.array([[1.0]]), np.ones((1, 1, 1)), 0.5)
    assert bellman_backup(mdp, np.array([[2.0]]))[0, 0] == 2.0


def test_policy_evaluation_closed_forms():
    self_loop = TabularMdp(np.zeros((1, 2)), np.ones((1, 2, 1)), 0.9)
    assert_array_equal(policy_evaluation(self_loop, np.array([1])), [0.0])
    one = TabularMdp(np.array([[1.0]]), np.ones((1, 1, 1)), 0.5)
    assert abs(policy_evaluation(one, np.array([0]), tol=1e-12)[0] - 2.0) <= 1e-12


def test_residuals_shrink_geometrically():
    mdp = random_mdp(11)
    q = np.zeros(mdp.shape)
    prev = None
    for _ in range(60):
        nxt = bellman_backup(mdp, q)
        res = np.abs(nxt - q).max()
        if prev is not None:
            assert res <= mdp.gamma * prev + 1e-12
        prev, q = res, nxt


def test_fixed_point_independent_of_start():
    mdp = random_mdp(12)
    a, _ = value_iteration(mdp, q0=np.zeros(mdp.shape))
    b, _ = value_iteration(mdp, q0=np.full(mdp.shape, 10.0))
    assert np.abs(a - b).max() <= 2 * 1e-10 / (1 - mdp.gamma)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_backup_is_monotone_and_pure(seed):
    mdp = random_mdp(seed % 1000)
    rng = np.random.default_rng(seed)
    q1 = rng.normal(size=mdp.shape)
    q2 = q1 + rng.random(mdp.shape)
    assert np.all(bellman_backup(mdp, q1) <= bellman_backup(mdp, q2))
    assert_array_equal(bellman_backup(mdp, q1), bellman_backup(mdp, q1))
