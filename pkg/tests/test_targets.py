import itertools

import numpy as np
import pytest

from ezv2.envs import ChainMDP, ChainModelStub
from ezv2.replay import ReplayBuffer, Trajectory
from ezv2.search import SearchConfig
from ezv2.targets import (
    SveAccumulator,
    ValueTargetConfig,
    mixed_target,
    multi_step_td,
    reanalyze,
    sve,
    use_td_branch,
)


def test_sve_examples():
    acc = SveAccumulator()
    acc.add_path([], 3.5)
    assert sve(acc) == 3.5
    acc = SveAccumulator(discount=0.997)
    acc.add_path([1.0], 2.0)
    assert sve(acc) == pytest.approx(2.994)
    assert acc.depths == [1]
    with pytest.raises(ValueError):
        sve(SveAccumulator())
    with pytest.raises(ValueError):
        acc.add(float("nan"), 1)


def test_multi_step_td_examples():
    cfg1 = ValueTargetConfig(td_steps=1)
    assert multi_step_td([1.0], [0.0, 0.0], 0, cfg1, terminal=False) == 1.0
    cfg5 = ValueTargetConfig(td_steps=5)
    assert multi_step_td([1.0, 1.0], [9.0, 9.0, 9.0], 0, cfg5, terminal=True) == pytest.approx(1.997)


def test_multi_step_td_hand_rolled():
    rng = np.random.default_rng(0)
    r = rng.normal(size=12)
    v = rng.normal(size=13)
    cfg = ValueTargetConfig(td_steps=5, discount=0.9)
    want = 0.0
    for i in range(5):
        want += 0.9**i * r[3 + i]
    want += 0.9**5 * v[8]
    assert multi_step_td(r, v, 3, cfg, terminal=False) == pytest.approx(want, rel=1e-12)
    # near the end of a time-limit cut the bootstrap stays
    assert multi_step_td(r, v, 10, cfg, terminal=False) == pytest.approx(r[10] + 0.9 * r[11] + 0.81 * v[12])


def test_mixed_target_examples():
    cfg = ValueTargetConfig()
    assert mixed_target(10_000, 0, 100_000, cfg, sve_value=1.0, td_value=2.0) == 2.0
    assert mixed_target(50_000, 99_999, 100_000, cfg, sve_value=1.0, td_value=2.0) == 2.0
    assert mixed_target(50_000, 0, 100_000, cfg, sve_value=1.0, td_value=2.0) == 1.0


def test_mixed_target_truth_table():
    cfg = ValueTargetConfig(T1=100, T2=10)
    D = 1000
    for early, fresh in itertools.product([False, True], repeat=2):
        i_t = 50 if early else 500
        i_s = D - 5 if fresh else 100
        assert bool(use_td_branch(i_t, i_s, D, cfg)) == (early or fresh)
        assert mixed_target(i_t, i_s, D, cfg, 1.0, 0.0) == (0.0 if early or fresh else 1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        ValueTargetConfig(td_steps=0)
    with pytest.raises(ValueError):
        ValueTargetConfig(T1=-1)
    with pytest.raises(ValueError):
        ValueTargetConfig(value_target="lambda")


def chain_batch(env, terminal=True):
    """Replay batch starting at every state of one full corridor episode."""
    obs, rewards = [env.reset()], []
    done = False
    while not done:
        o, r, done, _ = env.step(1)
        obs.append(o)
        rewards.append(r)
    tr = Trajectory(obs=np.stack(obs), actions=np.ones(len(rewards), dtype=np.int64), rewards=np.array(rewards), terminal=terminal)
    buf = ReplayBuffer(capacity=100, alpha=0.0)
    buf.push_trajectory(tr)
    batch = buf.sample_batch(64, np.random.default_rng(0), unroll=3)
    return batch


def test_sve_matches_value_iteration_on_perfect_chain():
    env = ChainMDP(n_states=10, corridor=True)
    V = env.value_iteration()
    stub = ChainModelStub(env, V)
    vt = ValueTargetConfig(value_target="sve", td_steps=3)
    cfg = SearchConfig.discrete(num_simulations=64, num_candidates=2, num_nonroot_candidates=1, normalize_q=False)
    batch = chain_batch(env)
    tg = reanalyze(batch, stub, cfg, vt, np.random.default_rng(1), train_step=0)
    m = tg.policy_mask
    states = np.argmax(batch.window.obs[:, :3], axis=-1)
    assert np.max(np.abs(tg.value[m] - V[states[m]])) < 1e-3
    assert np.all(tg.branch[m] == 1) and np.all(tg.branch[~m] == -1)


def test_reanalyze_determinism_and_masks():
    env = ChainMDP(n_states=6, corridor=True)
    V = env.value_iteration()
    stub = ChainModelStub(env, V)
    vt = ValueTargetConfig(td_steps=2, T1=0, T2=3)
    cfg = SearchConfig.discrete(num_simulations=8, num_candidates=2, num_nonroot_candidates=1)
    batch = chain_batch(env)
    a = reanalyze(batch, stub, cfg, vt, np.random.default_rng(7), train_step=5)
    b = reanalyze(batch, stub, cfg, vt, np.random.default_rng(7), train_step=5)
    assert a.fingerprint() == b.fingerprint()
    np.testing.assert_allclose(a.policy[a.policy_mask].sum(-1), 1.0)
    # fresh samples (last T2 indices) use TD, older ones SVE
    i_s = batch.meta.indices[:, None] + np.arange(3)
    live = a.policy_mask
    np.testing.assert_array_equal(a.branch[live] == 0, (i_s > batch.buffer_counter - 3)[live])
    # padding after the terminal has zero targets that still count
    pad = batch.window.after_terminal[:, :3]
    assert np.all(a.value_mask[pad]) and np.all(a.value[pad] == 0) and np.all(a.reward[pad] == 0)
    # the TD target matches the exact model values on a perfect chain
    np.testing.assert_allclose(a.td[live], a.sve[live], atol=1e-9)


def test_double_and_gae_targets_on_exact_values():
    env = ChainMDP(n_states=6, corridor=True)
    V = env.value_iteration()
    stub = ChainModelStub(env, V)
    cfg = SearchConfig.discrete(num_simulations=4, num_candidates=2, num_nonroot_candidates=1)
    batch = chain_batch(env)
    for mode in ("gae", "double"):
        tg = reanalyze(batch, stub, cfg, ValueTargetConfig(value_target=mode), np.random.default_rng(0), 0, online_model=stub)
        # exact values make every lambda-return equal to V itself
        states = np.argmax(batch.window.obs[:, :3], axis=-1)
        m = tg.policy_mask
        np.testing.assert_allclose(tg.value[m], V[states[m]], atol=1e-9)
