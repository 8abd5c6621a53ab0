import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal

from fedq.federation import RegionPartition, build_local_mdp, fedq_run
from fedq.mdp_core import TabularMdp, value_iteration
from fedq.oracles import (
    ExactOracle,
    GenerativeModel,
    OracleConfig,
    SyncQOracle,
    SynQRunConfig,
    agent_stream,
    fedq_synq,
    make_oracle,
    super_agent_baseline,
    sync_q_step,
    synq_theory_parameters,
)
from reference_impls import reference_sync_q


def random_mdp(seed, n_states=6, n_actions=2, gamma=0.9, sparse=False):
    rng = np.random.default_rng(seed)
    p = rng.standard_exponential((n_states, n_actions, n_states))
    if sparse:
        p *= rng.random(p.shape) < 0.4
        p[..., 0] += 1e-3
    return TabularMdp(rng.random((n_states, n_actions)), p / p.sum(-1, keepdims=True), gamma)


# ---------------------------------------------------------------- sampling


def test_streams_are_independent_and_reproducible():
    a = agent_stream(3, 1, 2).random(5)
    assert_array_equal(a, agent_stream(3, 1, 2).random(5))
    assert not np.array_equal(a, agent_stream(3, 2, 1).random(5))
    assert not np.array_equal(a, agent_stream(4, 1, 2).random(5))


@pytest.mark.parametrize("sparse", [False, True])
def test_sampler_matches_searchsorted_reference(sparse):
    mdp = random_mdp(1, n_states=7, n_actions=3, sparse=sparse)
    states = np.array([0, 3, 6, 2])
    got = GenerativeModel(mdp, agent_stream(0, 0, 0)).sample(states, 9)
    u = agent_stream(0, 0, 0).random((4, 3, 9))
    cdf = np.cumsum(mdp.transitions, axis=2)
    for i, s in enumerate(states):
        for a in range(3):
            ref = np.searchsorted(cdf[s, a, :-1], u[i, a] * cdf[s, a, -1], side="right")
            assert_array_equal(got[i, a], ref)
    if sparse:
        hit = mdp.transitions[states[:, None, None], np.arange(3)[None, :, None], got]
        assert np.all(hit > 0)


def test_sampler_never_returns_out_of_range_index():
    class Nearly1:
        def random(self, shape):
            return np.full(shape, np.nextafter(1.0, 0.0))

    p = np.zeros((3, 1, 3))
    p[:, 0, 1] = 1.0  # all mass on the middle state, last cdf entries equal
    mdp = TabularMdp(np.zeros((3, 1)), p, 0.5)
    out = GenerativeModel(mdp, Nearly1()).sample(np.arange(3), 4)
    assert_array_equal(out, 1)


def test_sampler_frequencies():
    mdp = random_mdp(2, n_states=5)
    n = 200_000
    draws = GenerativeModel(mdp, agent_stream(1, 0, 0)).sample(np.array([2]), n)[0, 1]
    freq = np.bincount(draws, minlength=5) / n
    p = mdp.transitions[2, 1]
    assert np.all(np.abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / n) + 1e-12)


def test_empirical_backup_is_unbiased():
    mdp = random_mdp(3, n_states=5, n_actions=2)
    v = np.random.default_rng(4).uniform(0, 10, 5)
    n = 100_000
    nxt = GenerativeModel(mdp, agent_stream(2, 0, 0)).sample(np.arange(5), n)
    samples = mdp.rewards[:, :, None] + mdp.gamma * v[nxt]
    mean = samples.mean(axis=-1)
    se = samples.std(axis=-1, ddof=1) / np.sqrt(n)
    exact = mdp.rewards + mdp.gamma * mdp.transitions @ v
    assert np.all(np.abs(mean - exact) <= 3 * se)


# ---------------------------------------------------------------- local steps


def test_sync_step_freezes_exterior_rows():
    mdp = random_mdp(5, n_states=8)
    part = RegionPartition(8, ([0, 1, 2, 3, 4], [4, 5, 6, 7]))
    q = np.random.default_rng(6).uniform(0, 10, mdp.shape)
    local = build_local_mdp(mdp, part, 0, q.max(1))
    gen = GenerativeModel(mdp, agent_stream(0, 0, 0))
    out = q
    for _ in range(5):
        out = sync_q_step(local, out, gen, 0.5, 3)
        assert_array_equal(out[5:], q[5:])
    assert not np.array_equal(out[:5], q[:5])


def test_sync_step_values_exterior_with_v_tilde():
    # deterministic chain 0 -> 1 -> 2 -> 2; region {0}, exterior valued by v_tilde
    p = np.zeros((3, 1, 3))
    p[0, 0, 1] = p[1, 0, 2] = p[2, 0, 2] = 1.0
    mdp = TabularMdp(np.array([[0.5], [0.0], [0.0]]), p, 0.9)
    part = RegionPartition(3, ([0], [1, 2]))
    q = np.zeros((3, 1))
    local = build_local_mdp(mdp, part, 0, np.array([0.0, 4.0, 0.0]))
    out = sync_q_step(local, q, GenerativeModel(mdp, agent_stream(0, 0, 0)), 1.0, 2)
    assert out[0, 0] == 0.5 + 0.9 * 4.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 5000), eta=st.floats(0.01, 1.0), b=st.integers(1, 6))
def test_iterates_stay_bounded(seed, eta, b):
    mdp = random_mdp(seed % 97, n_states=5)
    hi = 1.0 / (1.0 - mdp.gamma)
    part = RegionPartition(5, ([0, 1, 2], [2, 3, 4]))
    q0 = np.random.default_rng(seed).uniform(0, hi, mdp.shape)
    cfg = SynQRunConfig(eta=eta, local_steps=3, rounds=4, batch_size=b, seed=seed)

    state = fedq_synq(mdp, part, cfg, q0=q0)
    assert state.global_q.min() >= 0.0 and state.global_q.max() <= hi
    for qk in state.per_agent_q:
        assert qk.min() >= 0.0 and qk.max() <= hi


# ---------------------------------------------------------------- algorithms


def test_trivial_partition_reproduces_reference_sync_q():
    mdp = random_mdp(7, n_states=6, n_actions=3)
    steps, seed = 300, 11
    ref = reference_sync_q(mdp, np.zeros(mdp.shape), steps, 0.5, 1, seed)
    cfg = SynQRunConfig(eta=0.5, local_steps=1, rounds=steps, batch_size=1, seed=seed)
    oracle = SyncQOracle(eta=0.5, batch_size=1, local_steps=1, seed=seed)
    state = fedq_synq(mdp, RegionPartition.trivial(6), cfg)
    # replay round by round to compare every iterate
    q = np.zeros(mdp.shape)
    for t in range(steps):
        local = build_local_mdp(mdp, RegionPartition.trivial(6), 0, q.max(1))
        q, _ = oracle(local, q, agent=0, round=t)
        assert_array_equal(q, ref[t])
    assert_array_equal(state.global_q, ref[-1])


def test_batch_average_matches_reference():
    mdp = random_mdp(8, n_states=4, n_actions=2)
    ref = reference_sync_q(mdp, np.zeros(mdp.shape), 20, 0.3, 4, 5)
    cfg = SynQRunConfig(eta=0.3, local_steps=1, rounds=20, batch_size=4, seed=5)
    assert_array_equal(fedq_synq(mdp, RegionPartition.trivial(4), cfg).global_q, ref[-1])


def test_super_agent_is_trivial_partition_with_one_local_step():
    mdp = random_mdp(9)
    cfg = SynQRunConfig(eta=0.5, local_steps=3, rounds=4, batch_size=2, seed=1)
    sa = super_agent_baseline(mdp, cfg)
    flat = fedq_synq(mdp, RegionPartition.trivial(6), SynQRunConfig(0.5, 1, 12, 2, 1))
    assert len(sa.history) == 12
    assert_array_equal(sa.global_q, flat.global_q)
    assert sa.history[-1].samples_per_agent == (12 * 6 * 2 * 2,)


def test_sample_accounting():
    mdp = random_mdp(10, n_states=9, n_actions=3)
    part = RegionPartition(9, ([0, 1, 2, 3], [3, 4, 5, 6, 7, 8]))
    cfg = SynQRunConfig(eta=0.5, local_steps=4, rounds=5, batch_size=3, seed=0)
    state = fedq_synq(mdp, part, cfg)
    for r, rec in enumerate(state.history, start=1):
        assert rec.samples_per_agent == (r * 4 * 4 * 3 * 3, r * 4 * 6 * 3 * 3)


def test_exact_limit_reduces_to_exact_oracle():
    # deterministic cycle with singleton regions: one eta = 1 step solves each local MDP
    n = 5
    p = np.zeros((n, 2, n))
    for s in range(n):
        p[s, 0, (s + 1) % n] = 1.0
        p[s, 1, (s + 2) % n] = 1.0
    mdp = TabularMdp(np.random.default_rng(12).random((n, 2)), p, 0.9)
    part = RegionPartition(n, tuple([s] for s in range(n)))
    q0 = np.random.default_rng(13).uniform(0, 10, (n, 2))
    synq = fedq_synq(mdp, part, SynQRunConfig(eta=1.0, local_steps=1, rounds=1, batch_size=3, seed=4), q0=q0)
    exact = fedq_run(mdp, part, ExactOracle(tol=1e-14), q0=q0, rounds=1)
    assert np.abs(synq.global_q - exact.global_q).max() <= 1e-12


def test_same_seed_same_state_and_different_seed_differs():
    mdp = random_mdp(14, n_states=8)
    part = RegionPartition.contiguous(8, 3)
    cfg = SynQRunConfig(eta=0.5, local_steps=2, rounds=6, batch_size=2, seed=3)
    a, b = fedq_synq(mdp, part, cfg), fedq_synq(mdp, part, cfg)
    assert_array_equal(a.global_q, b.global_q)
    assert [r.samples_per_agent for r in a.history] == [r.samples_per_agent for r in b.history]
    c = fedq_synq(mdp, part, SynQRunConfig(eta=0.5, local_steps=2, rounds=6, batch_size=2, seed=4))
    assert not np.array_equal(a.global_q, c.global_q)


def test_fedq_synq_converges_at_high_discount():
    from fedq.environments import RandomMdpSpec, generate_random_mdp

    mdp, part = generate_random_mdp(RandomMdpSpec(5, 20, gamma=0.99, seed=2))
    q_star, _ = value_iteration(mdp)
    cfg = SynQRunConfig(eta=0.5, local_steps=2, rounds=1500, batch_size=5, seed=0)
    state = fedq_synq(mdp, part, cfg, q_star=q_star, target_error=0.05 / 0.01)
    assert state.history[-1].linf_error <= 0.05 / 0.01


def test_config_validation():
    with pytest.raises(ValueError, match="eta"):
        SynQRunConfig(eta=0.0)
    with pytest.raises(ValueError, match="batch_size"):
        OracleConfig(kind="sync_q", batch_size=0)
    with pytest.raises(ValueError, match="kind"):
        OracleConfig(kind="mc")
    assert isinstance(make_oracle(OracleConfig(kind="exact")), ExactOracle)
    assert make_oracle(OracleConfig(kind="sync_q", eta=0.2), seed=9) == SyncQOracle(0.2, 5, 1, 9)


def test_theory_parameters_are_self_consistent():
    kw = dict(delta=0.1, n_min=2, gamma=0.9, n_states=20, n_actions=4, n_agents=5)
    loose, tight = synq_theory_parameters(eps=1.0, **kw), synq_theory_parameters(eps=0.5, **kw)
    assert tight["T"] > loose["T"] and tight["eta"] < loose["eta"]
    for p in (loose, tight):
        assert p["E"] >= 1 and p["R"] * p["E"] >= p["T"]
    with pytest.raises(ValueError):
        synq_theory_parameters(eps=20.0, **kw)


def test_zero_step_size_leaves_q_unchanged():
    mdp = random_mdp(15, n_states=6)
    part = RegionPartition(6, ([0, 1, 2], [3, 4, 5]))
    q = np.random.default_rng(16).uniform(0, 10, mdp.shape)
    local = build_local_mdp(mdp, part, 0, q.max(1))
    assert_array_equal(sync_q_step(local, q, GenerativeModel(mdp, agent_stream(0, 0, 0)), 0.0, 3), q)


def test_exact_oracle_ignores_warm_start():
    from fedq.oracles import exact_oracle

    mdp = random_mdp(17, n_states=6)
    part = RegionPartition(6, ([0, 1, 2, 3], [3, 4, 5]))
    local = build_local_mdp(mdp, part, 0, np.linspace(0, 5, 6))
    a, used_a = exact_oracle(local)
    b, used_b = exact_oracle(local, q_init=np.full(mdp.shape, 9.0))
    assert used_a == used_b == 0
    assert np.abs(a - b).max() <= 2 * 1e-10 / (1 - mdp.gamma)


def test_super_agent_converges_at_high_discount():
    from fedq.environments import RandomMdpSpec, generate_random_mdp

    mdp, _ = generate_random_mdp(RandomMdpSpec(5, 20, gamma=0.99, seed=2))
    q_star, _ = value_iteration(mdp)
    cfg = SynQRunConfig(eta=0.5, local_steps=2, rounds=1500, batch_size=5, seed=0)
    state = super_agent_baseline(mdp, cfg, q_star=q_star, target_error=0.05 / 0.01)
    assert state.history[-1].linf_error <= 0.05 / 0.01
