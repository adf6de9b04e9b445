import json
import math

import numpy as np
import pytest
from scipy import stats

from ezv2.envs import BanditStub
from ezv2.autodiff import softmax_np
from ezv2.model import ActionSpace, EZModel, ModelConfig, PolicyOutput
from ezv2.search import (
    Phase,
    SearchConfig,
    SearchError,
    batched_search,
    completed_q,
    gumbel_topk,
    run_search,
    sample_root_candidates,
    sequential_halving_schedule,
    sigma_transform,
    target_policy_weights,
)


def test_gumbel_topk_examples():
    assert list(gumbel_topk([0.0, 0.0, 0.0], 3, gumbel=np.zeros(3))) == [0, 1, 2]
    assert list(gumbel_topk([0.1, 2.0, -1.0], 2, gumbel=np.zeros(3))) == [1, 0]
    with pytest.raises(ValueError):
        gumbel_topk([0.0, 1.0], 3, np.random.default_rng(0))


def test_gumbel_topk_marginal_chi_square():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=6)
    top = gumbel_topk(np.broadcast_to(logits, (100_000, 6)), 1, rng)[:, 0]
    counts = np.bincount(top, minlength=6)
    assert stats.chisquare(counts, 100_000 * softmax_np(logits)).pvalue > 0.01


def test_gumbel_topk_distinct():
    idx = gumbel_topk(np.zeros((50, 10)), 10, np.random.default_rng(0))
    assert all(len(set(r)) == 10 for r in idx)


def test_schedule_examples():
    assert sequential_halving_schedule(2, 2) == [Phase(2, 1)]
    assert sequential_halving_schedule(16, 32) == [Phase(16, 1), Phase(8, 1), Phase(4, 2), Phase(2, 0, 0)]
    assert sum(p.survivors * p.visits + p.extra for p in sequential_halving_schedule(8, 16)) == 16


@pytest.mark.parametrize("K", [1, 2, 4, 8, 16, 32])
def test_schedule_conserves_budget(K):
    for N in range(K, 80):
        phases = sequential_halving_schedule(K, N)
        assert sum(p.survivors * p.visits + p.extra for p in phases) == N
        assert all(p.extra < p.survivors or p.survivors == 1 for p in phases)


def test_schedule_rejects_small_budget():
    with pytest.raises(ValueError):
        sequential_halving_schedule(8, 4)


def test_sigma_transform_examples():
    cfg = SearchConfig()
    assert sigma_transform(0.0, 7, cfg) == 0.0
    assert sigma_transform(0.5, 10, cfg) == pytest.approx(3.0)
    q = np.sort(np.random.default_rng(0).normal(size=20))
    assert np.all(np.diff(sigma_transform(q, 4, cfg)) > 0)


def test_completed_q_examples():
    np.testing.assert_allclose(completed_q([1, 2], [0.3, 0.4], [0.5, 0.5]), [0.3, 0.4])
    np.testing.assert_allclose(completed_q([3, 0, 0], [0.5, 0, 0], [0.2, 0.3, 0.5]), [0.5, 0.5, 0.5])
    # visited priors 0.1 and 0.3 renormalize to 0.25 / 0.75
    out = completed_q([1, 1, 0], [0.2, 0.8, 0.0], [0.1, 0.3, 0.6])
    assert out[2] == pytest.approx(0.65)
    with pytest.raises(ValueError):
        completed_q([0, 0], [0.0, 0.0], [0.5, 0.5])


def test_target_policy_examples():
    cfg = SearchConfig()
    w = target_policy_weights(None, np.full(4, 0.3), 2, cfg, discrete=False)
    np.testing.assert_allclose(w, 0.25)
    logits = np.array([0.5, -1.0, 2.0])
    np.testing.assert_allclose(target_policy_weights(logits, np.zeros(3), 5, cfg, discrete=True), softmax_np(logits))


def test_root_candidate_split():
    cfg = SearchConfig(num_candidates=16)
    pol = PolicyOutput(mean=np.zeros((3, 2)), std=np.ones((3, 2)))
    c = sample_root_candidates(pol, cfg, np.random.default_rng(0))
    assert c.actions.shape == (3, 16, 2)
    assert c.from_prior.sum(1).tolist() == [8, 8, 8]
    disc = sample_root_candidates(PolicyOutput(logits=np.zeros((2, 5))), cfg, np.random.default_rng(0))
    assert disc.actions.shape == (2, 5)


def test_search_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(num_candidates=6)
    with pytest.raises(ValueError):
        SearchConfig(num_candidates=8, num_simulations=4)
    with pytest.raises(ValueError):
        SearchConfig(num_candidates=8, num_nonroot_candidates=8)
    assert SearchConfig(num_candidates=16).num_nonroot_candidates == 8


def test_three_armed_bandit_depth_one():
    q = np.array([1.0, 0.2, 0.1])
    stub = BanditStub(ActionSpace("discrete", 3), PolicyOutput(logits=np.zeros((1, 3))), lambda a, rows: q[a])
    cfg = SearchConfig(num_simulations=4, num_candidates=4, num_nonroot_candidates=2, normalize_q=False)
    res = run_search(stub, cfg, np.random.default_rng(0), obs=np.zeros(1))
    assert res.a_star == 0
    assert res.root_visits.sum() == 4


def test_visits_conserved_over_random_runs():
    space = ActionSpace("continuous", 2)
    model = EZModel(ModelConfig(obs_dim=3, action_space=space, latent_dim=8, hidden=8, head_hidden=8, proj_dim=8, action_embed_dim=4))
    cfg = SearchConfig(num_simulations=24, num_candidates=8)
    res = batched_search(model, cfg, np.random.default_rng(0), obs=np.random.default_rng(1).normal(size=(100, 3)))
    assert np.all(res.root_visits.sum(1) == 24)
    np.testing.assert_allclose(res.target_policy.sum(1), 1.0, atol=1e-6)
    # every simulation expands one node, so depths are all >= 1
    assert np.all(res.sim_depths >= 1)


def test_policy_improvement_on_exact_bandit():
    rng = np.random.default_rng(0)
    B = 200
    centers = rng.uniform(-0.8, 0.8, size=(B, 2))
    pol = PolicyOutput(mean=rng.normal(size=(B, 2)) * 0.5, std=np.full((B, 2), 0.6))

    def q_fn(a, rows):
        return -np.sum((a - centers[rows]) ** 2, axis=-1)

    stub = BanditStub(ActionSpace("continuous", 2), pol, q_fn)
    cfg = SearchConfig(num_simulations=32, num_candidates=16, normalize_q=False)
    res = batched_search(stub, cfg, rng, obs=np.zeros((B, 1)))
    rows = np.arange(B)
    cq = q_fn(res.candidates, rows[:, None])
    q_star = q_fn(res.a_star[:, None], rows[:, None])[:, 0]
    s1 = ~res.from_prior
    mean_s1 = (cq * s1).sum(1) / s1.sum(1)
    assert np.all(q_star >= mean_s1 - 1e-12)
    np.testing.assert_allclose(q_star, cq.max(1))


def test_search_is_deterministic_and_serializable():
    space = ActionSpace("discrete", 3)
    model = EZModel(ModelConfig(obs_dim=2, action_space=space, latent_dim=8, hidden=8, head_hidden=8, proj_dim=8, action_embed_dim=4))
    cfg = SearchConfig.discrete()
    a = run_search(model, cfg, np.random.default_rng(3), obs=np.ones(2))
    b = run_search(model, cfg, np.random.default_rng(3), obs=np.ones(2))
    assert a.to_json() == b.to_json()
    assert json.loads(a.to_json())["a_star"] == a.a_star


def test_nan_model_output_aborts():
    class Broken:
        space = ActionSpace("discrete", 2)

        def initial_inference(self, obs):
            from ezv2.model import Prediction

            return Prediction(state=np.zeros((1, 1)), value=np.array([math.nan]), policy=PolicyOutput(logits=np.zeros((1, 2))))

    with pytest.raises(SearchError, match="value"):
        run_search(Broken(), SearchConfig(num_simulations=2, num_candidates=2, num_nonroot_candidates=1), np.random.default_rng(0), obs=np.zeros(1))
