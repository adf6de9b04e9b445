"""Value targets: search-based value estimation, multi-step TD, the mixed
selection rule, and batch reanalysis of replayed windows."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .replay import SampleBatch
from .search import SearchConfig, batched_search

VALUE_TARGETS = ("mixed", "td", "sve", "gae", "double")


@dataclass
class ValueTargetConfig:
    """``value_target`` selects the rule: ``mixed`` (default), pure ``td`` or
    ``sve``, and two ablation baselines: ``gae`` (a truncated lambda-return)
    and ``double`` (TD bootstrapped from the min of target and online
    values)."""

    td_steps: int = 5
    T1: int = 40_000
    T2: int = 20_000
    discount: float = 0.997
    value_target: str = "mixed"
    gae_lambda: float = 0.95

    def __post_init__(self):
        if self.td_steps < 1:
            raise ValueError("td_steps must be >= 1")
        if self.T1 < 0 or self.T2 < 0:
            raise ValueError("T1 and T2 must be >= 0")
        if self.value_target not in VALUE_TARGETS:
            raise ValueError(f"value_target must be one of {VALUE_TARGETS}")


# ---------------------------------------------------------------------------
# SVE


@dataclass
class SveAccumulator:
    """Per-simulation bootstrapped estimates and their dive depths."""

    discount: float = 0.997
    estimates: list[float] = field(default_factory=list)
    depths: list[int] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.estimates)

    def add(self, estimate: float, depth: int) -> None:
        if not np.isfinite(estimate):
            raise ValueError("SVE estimate must be finite")
        self.estimates.append(float(estimate))
        self.depths.append(int(depth))

    def add_path(self, rewards, leaf_value: float) -> None:
        """Add ``sum_t gamma^t r_t + gamma^H v`` for one dive of depth ``len(rewards)``."""
        rewards = np.asarray(rewards, dtype=np.float64)
        H = len(rewards)
        disc = self.discount ** np.arange(H)
        self.add(float(disc @ rewards + self.discount**H * leaf_value), H)


def sve(acc: SveAccumulator) -> float:
    if acc.count == 0:
        raise ValueError("SVE needs at least one simulation")
    return float(np.mean(acc.estimates))


# ---------------------------------------------------------------------------
# TD and the mixed rule


def multi_step_td(rewards, values, t: int, cfg: ValueTargetConfig, terminal: bool) -> float:
    """``sum_i gamma^i u_{t+i} + gamma^n v_{t+n}`` with ``n = min(l, T - t)``.

    ``values`` holds target-network values for observations ``0..T``. The
    bootstrap is dropped when the horizon runs into a true terminal.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    T = len(rewards)
    n = min(cfg.td_steps, T - t)
    g = cfg.discount
    ret = float(np.sum(g ** np.arange(n) * rewards[t : t + n]))
    if not (terminal and t + n == T):
        ret += g**n * float(values[t + n])
    return ret


def use_td_branch(train_step, sample_index, buffer_size, cfg: ValueTargetConfig):
    """True where the TD branch applies: early training or fresh samples."""
    return (np.asarray(train_step) < cfg.T1) | (np.asarray(sample_index) > np.asarray(buffer_size) - cfg.T2)


def mixed_target(train_step, sample_index, buffer_size, cfg: ValueTargetConfig, sve_value, td_value):
    out = np.where(use_td_branch(train_step, sample_index, buffer_size, cfg), td_value, sve_value)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# reanalysis


@dataclass
class TrainTargets:
    """Reanalyzed targets for positions ``t .. t+U-1`` of each window row.

    For discrete spaces ``policy`` is (B, U, n) over the whole action set;
    for continuous spaces it is (B, U, K) weights over ``candidates``
    (B, U, K, d). ``branch`` is 1 where SVE was used, 0 for TD, -1 where no
    value target exists.
    """

    policy: np.ndarray
    candidates: np.ndarray | None
    a_star: np.ndarray
    value: np.ndarray
    value_mask: np.ndarray
    reward: np.ndarray
    reward_mask: np.ndarray
    policy_mask: np.ndarray
    consistency_obs: np.ndarray
    consistency_mask: np.ndarray
    branch: np.ndarray
    sve: np.ndarray
    td: np.ndarray
    search_depth: np.ndarray
    version: int = 0

    def fingerprint(self) -> bytes:
        parts = [self.policy, self.a_star, self.value, self.reward, self.branch]
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)


def _td_targets(batch: SampleBatch, target_model, online_model, cfg: ValueTargetConfig, U: int):
    """TD (or ablation) targets for every real state in the window."""
    B = len(batch)
    g = cfg.discount
    td = np.zeros((B, U))
    # gather the bootstrap observations first so the target net runs once
    boots, where = [], []
    partial = np.zeros((B, U, cfg.td_steps + 1))  # n-step partial returns
    horizons = range(1, cfg.td_steps + 1) if cfg.value_target == "gae" else [cfg.td_steps]
    for b, (tr, t0) in enumerate(zip(batch.trajectories, batch.meta.offsets)):
        T = tr.length
        for k in range(U):
            t = int(t0) + k
            if t >= T:
                continue
            for n in horizons:
                m = min(n, T - t)
                partial[b, k, n] = float(np.sum(g ** np.arange(m) * tr.rewards[t : t + m]))
                boots.append(tr.obs[t + m])
                where.append((b, k, n, m, tr.terminal and t + m == T))
    if not boots:
        return td
    obs = np.stack(boots)
    v = np.asarray(target_model.initial_inference(obs).value, dtype=np.float64)
    if cfg.value_target == "double" and online_model is not None:
        v = np.minimum(v, np.asarray(online_model.initial_inference(obs).value, dtype=np.float64))
    nstep = np.zeros((B, U, cfg.td_steps + 1))
    for (b, k, n, m, ends), vb in zip(where, v):
        nstep[b, k, n] = partial[b, k, n] + (0.0 if ends else g**m * vb)
    l = cfg.td_steps
    if cfg.value_target == "gae":
        lam = cfg.gae_lambda
        w = (1 - lam) * lam ** np.arange(l - 1)
        td = np.einsum("bkn,n->bk", nstep[:, :, 1:l], w) + lam ** (l - 1) * nstep[:, :, l]
    else:
        td = nstep[:, :, l]
    return td


def reanalyze(
    batch: SampleBatch,
    target_model,
    search_cfg: SearchConfig,
    vt_cfg: ValueTargetConfig,
    rng: np.random.Generator,
    train_step: int,
    online_model=None,
) -> TrainTargets:
    """Fresh search at every real state of each window with the target model.

    The same search provides the policy target, the action a*_S and the SVE
    value; the mixed rule then chooses between SVE and TD per position.
    """
    win = batch.window
    B, U = win.rewards.shape
    space = target_model.space
    state_mask = win.state_mask[:, :U]
    bi, ki = np.nonzero(state_mask)
    res = batched_search(target_model, search_cfg, rng, obs=win.obs[bi, ki])

    K = res.target_policy.shape[1]
    policy = np.zeros((B, U, K))
    policy[bi, ki] = res.target_policy
    if space.discrete:
        candidates = None
        a_star = np.zeros((B, U), dtype=np.int64)
    else:
        candidates = np.zeros((B, U, K, space.n))
        candidates[bi, ki] = res.candidates
        a_star = np.zeros((B, U, space.n))
    a_star[bi, ki] = res.a_star
    sve_v = np.zeros((B, U))
    sve_v[bi, ki] = res.sve_value
    depth = np.zeros((B, U))
    depth[bi, ki] = res.sim_depths.mean(axis=1)

    td = _td_targets(batch, target_model, online_model, vt_cfg, U)
    i_s = batch.meta.indices[:, None] + np.arange(U)[None]
    if vt_cfg.value_target == "mixed":
        use_td = use_td_branch(train_step, i_s, batch.buffer_counter, vt_cfg)
    elif vt_cfg.value_target == "sve":
        use_td = np.zeros((B, U), bool)
    else:
        use_td = np.ones((B, U), bool)
    value = np.where(state_mask, np.where(use_td, td, sve_v), 0.0)
    after = win.after_terminal[:, :U]
    branch = np.where(state_mask, np.where(use_td, 0, 1), -1)
    return TrainTargets(
        policy=policy,
        candidates=candidates,
        a_star=a_star,
        value=value,
        value_mask=state_mask | after,
        reward=np.where(state_mask, win.rewards, 0.0),
        reward_mask=state_mask | after,
        policy_mask=state_mask.copy(),
        consistency_obs=win.obs[:, 1:],
        consistency_mask=win.obs_mask[:, 1:],
        branch=branch,
        sve=sve_v,
        td=td,
        search_depth=depth,
        version=int(getattr(target_model, "version", 0)),
    )
