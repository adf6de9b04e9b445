import numpy as np
import pytest
from scipy import stats

from ezv2.replay import ReplayBuffer, SumTree, Trajectory, build_window


def traj(T, terminal=False, dim=2, start=0.0):
    obs = np.arange(T + 1, dtype=np.float32)[:, None].repeat(dim, 1) + start
    return Trajectory(obs=obs, actions=np.zeros(T, dtype=np.int64), rewards=np.arange(T, dtype=np.float64), terminal=terminal)


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(obs=np.zeros((3, 1)), actions=np.zeros(3), rewards=np.zeros(3), terminal=False)
    t = traj(3)
    with pytest.raises(ValueError):
        t.rewards[0] = 5.0


def test_sum_tree_find():
    tree = SumTree(5)
    tree.update(np.arange(5), np.array([1.0, 0.0, 2.0, 3.0, 4.0]))
    assert tree.total == 10.0
    np.testing.assert_array_equal(tree.find(np.array([0.5, 1.5, 3.5, 9.9])), [0, 2, 3, 4])


def test_sampling_frequencies_follow_priority_power():
    buf = ReplayBuffer(capacity=100, alpha=0.6)
    buf.push_trajectory(traj(5), priorities=np.array([1.0, 2.0, 3.0, 4.0, 5.0]))
    rng = np.random.default_rng(0)
    n = 100_000
    idx = buf.sample_indices(n, rng).indices
    counts = np.bincount(idx, minlength=5)
    p = np.arange(1, 6) ** 0.6
    assert stats.chisquare(counts, n * p / p.sum()).pvalue > 0.01


def test_uniform_when_alpha_zero_and_weights():
    buf = ReplayBuffer(capacity=10, alpha=0.0, beta=1.0)
    buf.push_trajectory(traj(4), priorities=np.array([1.0, 9.0, 3.0, 2.0]))
    meta = buf.sample_indices(50, np.random.default_rng(0))
    np.testing.assert_allclose(meta.probs, 0.25)
    np.testing.assert_allclose(meta.weights, 1.0)


def test_importance_weight_formula():
    buf = ReplayBuffer(capacity=10, alpha=1.0, beta=0.5)
    buf.push_trajectory(traj(2), priorities=np.array([1.0, 3.0]))
    meta = buf.sample_indices(200, np.random.default_rng(1))
    raw = (2 * meta.probs) ** -0.5
    np.testing.assert_allclose(meta.weights, raw / raw.max())


def test_fifo_eviction_of_whole_trajectories():
    buf = ReplayBuffer(capacity=10)
    a = buf.push_trajectory(traj(4))
    b = buf.push_trajectory(traj(4))
    c = buf.push_trajectory(traj(4))
    assert list(buf.trajectories) == [b, c] and a not in buf.traj_start
    assert len(buf) == 8 and buf.counter == 12
    live = sorted(buf.probabilities())
    assert live == list(range(4, 12))
    with pytest.raises(ValueError):
        buf.push_trajectory(traj(11))


def test_random_ops_keep_invariants():
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(capacity=64, alpha=0.7)
    last_counter = 0
    for _ in range(2000):
        op = rng.integers(3)
        if op == 0 or len(buf) == 0:
            buf.push_trajectory(traj(int(rng.integers(1, 12))), priorities=None)
        elif op == 1:
            meta = buf.sample_indices(8, rng)
            buf.update_priorities(meta.indices, rng.uniform(0, 3, 8))
        else:
            buf.update_priorities(rng.integers(0, max(buf.counter, 1), 4), rng.uniform(0, 3, 4))
        assert buf.counter >= last_counter
        last_counter = buf.counter
        starts = [buf.traj_start[t] for t in buf.trajectories]
        assert starts == sorted(starts)
        assert len(buf) == sum(tr.length for tr in buf.trajectories.values()) <= 64
        assert np.isclose(buf.tree.total, np.sum(buf.priority[buf.slot_index >= 0] ** buf.alpha))


def test_stale_priority_updates_are_counted():
    buf = ReplayBuffer(capacity=4)
    buf.push_trajectory(traj(3))
    buf.push_trajectory(traj(3))  # evicts the first
    assert buf.update_priorities([0, 1, 3], [1.0, 1.0, 1.0]) == 2
    assert buf.stale_updates == 2


def test_window_masks_after_terminal():
    win = build_window([traj(3, terminal=True)], np.array([1]), unroll=4)
    assert win.state_mask[0].tolist() == [True, True, False, False, False]
    assert win.obs_mask[0].tolist() == [True, True, True, False, False]
    assert win.after_terminal[0].tolist() == [False, False, True, True, True]
    assert win.rewards[0].tolist() == [1.0, 2.0, 0.0, 0.0]
    cut = build_window([traj(3, terminal=False)], np.array([1]), unroll=4)
    assert not cut.after_terminal.any()


def test_bellman_priorities():
    class Const:
        def initial_inference(self, obs):
            from types import SimpleNamespace

            return SimpleNamespace(value=np.full(len(obs), 2.0))

    buf = ReplayBuffer(discount=0.5, priority_floor=0.0)
    p = buf.bellman_priorities(traj(2, terminal=True), Const())
    # |2 - (0 + 0.5*2)| and |2 - (1 + 0)| at the terminal step
    np.testing.assert_allclose(p, [1.0, 1.0])


def test_save_load_roundtrip(tmp_path):
    buf = ReplayBuffer(capacity=20, alpha=0.5)
    for k in range(4):
        buf.push_trajectory(traj(6, terminal=k % 2 == 0, start=k), priorities=np.arange(1, 7, dtype=float))
    buf.update_priorities([8, 9], [5.0, 0.1])
    buf.save(str(tmp_path))
    back = ReplayBuffer.load(str(tmp_path))
    assert back.counter == buf.counter and len(back) == len(buf)
    assert back.probabilities() == buf.probabilities()
    for tid, tr in buf.trajectories.items():
        np.testing.assert_array_equal(back.trajectories[tid].obs, tr.obs)
        assert back.trajectories[tid].terminal == tr.terminal
    a = buf.sample_indices(16, np.random.default_rng(3))
    b = back.sample_indices(16, np.random.default_rng(3))
    np.testing.assert_array_equal(a.indices, b.indices)


def test_empty_buffer_sampling_fails():
    with pytest.raises(ValueError):
        ReplayBuffer().sample_indices(1, np.random.default_rng(0))
