import numpy as np
import pytest

from ezv2 import autodiff as ad
from ezv2.autodiff import OptimizerConfig, check_gradients
from ezv2.envs import ChainMDP, PointMass1D
from ezv2.model import ActionSpace, EZModel, ModelConfig, Support
from ezv2.replay import ReplayBuffer, Trajectory
from ezv2.search import SearchConfig
from ezv2.targets import ValueTargetConfig, reanalyze
from ezv2.trainer import (
    ClampCounter,
    Learner,
    LossError,
    LossLog,
    LossWeights,
    PolicyLossMode,
    SnapshotSlot,
    SyncIntervals,
    categorical_kl,
    policy_loss,
    sync_targets,
    unrolled_loss,
)


def small_model(obs_dim, space, **kw):
    cfg = ModelConfig(obs_dim=obs_dim, action_space=space, latent_dim=16, hidden=16, head_hidden=16, proj_dim=16, action_embed_dim=4, **kw)
    return EZModel(cfg, seed=0)


def collect(env, n_episodes, rng, act):
    buf = ReplayBuffer(capacity=10_000, alpha=1.0)
    for _ in range(n_episodes):
        obs, acts, rews = [env.reset(rng)], [], []
        done = cut = False
        while not (done or cut):
            a = act(rng)
            o, r, done, info = env.step(a)
            cut = info["truncated"]
            obs.append(o)
            acts.append(a)
            rews.append(r)
        buf.push_trajectory(Trajectory(np.stack(obs), np.array(acts), np.array(rews), terminal=done))
    return buf


def chain_setup(seed=0):
    env = ChainMDP(n_states=5, max_episode_steps=20)
    rng = np.random.default_rng(seed)
    buf = collect(env, 6, rng, lambda r: int(r.integers(2)))
    model = small_model(5, env.spec.action_space, reward_support=Support(-1, 1, 21), value_support=Support(-2, 2, 21))
    return env, buf, model


def make_targets(model, buf, seed=0, B=16):
    rng = np.random.default_rng(seed)
    batch = buf.sample_batch(B, rng, unroll=3)
    tg = reanalyze(batch, model.snapshot(), SearchConfig.discrete(num_simulations=4, num_candidates=2, num_nonroot_candidates=1), ValueTargetConfig(td_steps=3), rng, 0)
    return batch, tg


def test_categorical_kl_zero_on_perfect_fit():
    t = np.array([[0.2, 0.3, 0.5]])
    logits = ad.as_tensor(np.log(t))
    assert abs(float(categorical_kl(logits, t).data[0])) < 1e-12
    assert float(categorical_kl(ad.as_tensor(np.zeros((1, 3))), t).data[0]) > 0


@pytest.mark.parametrize("mode", ["cross_entropy", "simple_astar"])
def test_continuous_policy_loss_gradients(mode):
    rng = np.random.default_rng(0)
    space = ActionSpace("continuous", 2)
    mean0 = rng.normal(size=(4, 2)) * 0.3
    std0 = rng.uniform(0.4, 1.2, size=(4, 2))
    cands = np.tanh(rng.normal(size=(4, 6, 2)))
    w = rng.dirichlet(np.ones(6), size=4)
    a_star = cands[:, 0]
    target = a_star if mode == "simple_astar" else w

    def build(ts):
        return ad.mean(policy_loss((ts[0], ts[1]), target, PolicyLossMode(mode), space, cands))

    assert check_gradients(build, [mean0, std0]) < 1e-4


@pytest.mark.parametrize("mode", ["cross_entropy", "simple_astar"])
def test_discrete_policy_loss_gradients(mode):
    rng = np.random.default_rng(1)
    space = ActionSpace("discrete", 5)
    logits = rng.normal(size=(3, 5))
    target = np.array([0, 3, 4]) if mode == "simple_astar" else rng.dirichlet(np.ones(5), size=3)
    assert check_gradients(lambda ts: ad.mean(policy_loss(ts[0], target, PolicyLossMode(mode), space)), [logits]) < 1e-4


def test_simple_mode_clamps_extreme_log_prob():
    space = ActionSpace("continuous", 1)
    counter = ClampCounter()
    mean = ad.as_tensor(np.array([[4.0]]))
    std = ad.as_tensor(np.array([[0.01]]))
    out = policy_loss((mean, std), np.array([[-0.999]]), PolicyLossMode("simple_astar"), space, counter=counter)
    assert float(out.data[0]) == pytest.approx(20.0)
    assert counter.count == 1


def test_policy_mode_selection():
    assert PolicyLossMode.for_space(ActionSpace("continuous", 6)).mode == "simple_astar"
    assert PolicyLossMode.for_space(ActionSpace("continuous", 1)).mode == "cross_entropy"
    assert PolicyLossMode.for_space(ActionSpace("discrete", 18)).mode == "cross_entropy"
    with pytest.raises(ValueError):
        PolicyLossMode("mse")


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(value=-1)
    with pytest.raises(ValueError):
        LossWeights(unroll=0)


def test_unrolled_loss_is_mean_of_steps():
    _, buf, model = chain_setup()
    batch, tg = make_targets(model, buf)
    out = unrolled_loss(model, batch, tg, LossWeights(unroll=3), PolicyLossMode())
    assert out.components["total"] == pytest.approx(np.mean(out.steps), rel=1e-5)
    assert set(out.components) == {"reward", "policy", "value", "consistency", "entropy", "total"}


def test_unrolled_loss_gradients_match_finite_differences():
    _, buf, model = chain_setup()
    for p in model.parameters():
        p.data = p.data.astype(np.float64)
    batch, tg = make_targets(model, buf, B=4)
    head = model.value_head.fc_out.weight
    arr = head.data

    def loss():
        with ad.no_grad():
            return float(unrolled_loss(model, batch, tg, LossWeights(unroll=3), PolicyLossMode()).loss.data)

    out = unrolled_loss(model, batch, tg, LossWeights(unroll=3), PolicyLossMode())
    ad.backward(out.loss, [head])
    num = ad.numeric_grad(loss, arr)
    assert ad.relative_error(head.grad, num) < 1e-4


def test_learner_reduces_loss_on_fixed_batch():
    _, buf, model = chain_setup()
    batch, tg = make_targets(model, buf)
    learner = Learner(model, OptimizerConfig(learning_rate=3e-3), LossWeights(unroll=3), PolicyLossMode(), SyncIntervals(2, 4))
    first, errors = learner.train_step(batch, tg)
    assert errors.shape == (16,)
    for _ in range(30):
        last, _ = learner.train_step(batch, tg)
    assert last["total"] < first["total"]
    assert learner.model.version == 31
    assert learner.self_play_slot.publications == 15 and learner.target_slot.publications == 7


def test_nonfinite_loss_raises_with_components():
    _, buf, model = chain_setup()
    batch, tg = make_targets(model, buf)
    tg.value[:] = np.nan
    with pytest.raises(LossError) as err:
        unrolled_loss(model, batch, tg, LossWeights(unroll=3), PolicyLossMode())
    assert "value" in err.value.components


def test_continuous_learner_step_runs():
    env = PointMass1D(horizon=12)
    rng = np.random.default_rng(0)
    buf = collect(env, 3, rng, lambda r: r.uniform(-1, 1, size=1))
    model = small_model(2, env.spec.action_space, value_support=Support(-5, 5, 21))
    batch = buf.sample_batch(8, rng, unroll=3)
    tg = reanalyze(batch, model.snapshot(), SearchConfig(num_simulations=8, num_candidates=4), ValueTargetConfig(td_steps=3), rng, 0)
    for mode in ("cross_entropy", "simple_astar"):
        out = unrolled_loss(model, batch, tg, LossWeights(unroll=3), PolicyLossMode(mode))
        assert np.isfinite(out.components["total"])


def test_sync_targets_cadence():
    model = small_model(2, ActionSpace("discrete", 2))
    tgt, sp = SnapshotSlot(), SnapshotSlot()
    for step in range(0, 13):
        sync_targets(model, tgt, sp, step, SyncIntervals(self_play=3, target=4))
    assert sp.publications == 4 and tgt.publications == 3


def test_snapshot_slot_readers_see_old_until_publish():
    model = small_model(2, ActionSpace("discrete", 2))
    slot = SnapshotSlot(model.snapshot())
    held = slot.get()
    slot.publish(model.copy().snapshot())
    assert slot.get() is not held


def test_loss_log(tmp_path):
    log = LossLog(str(tmp_path / "loss.csv"), flush_every=1)
    log.write(1, {"total": 1.0, "reward": 0.1, "policy": 0.2, "value": 0.3, "consistency": -0.4, "entropy": 0.5})
    log.close()
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,total,reward,policy,value,consistency,entropy"
    assert lines[1].startswith("1,1.0,")
