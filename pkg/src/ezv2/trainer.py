"""Unrolled model-learning loss, policy losses and snapshot publication."""

from __future__ import annotations

import csv
import math
import threading
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Optimizer, OptimizerConfig, Tensor, no_grad
from .model import ActionSpace, EZModel, gaussian_entropy_t, logits_to_scalar, scalar_to_categorical, squashed_log_prob_t
from .replay import SampleBatch
from .targets import TrainTargets

LOG_PROB_FLOOR = -20.0
COMPONENTS = ("reward", "policy", "value", "consistency", "entropy")


class LossError(FloatingPointError):
    """Loss became non-finite; carries the per-component breakdown."""

    def __init__(self, message: str, components: dict[str, float]):
        super().__init__(f"{message}: {components}")
        self.components = components


@dataclass
class LossWeights:
    reward: float = 1.0
    policy: float = 1.0
    value: float = 0.25
    consistency: float = 2.0
    entropy: float = 5e-3
    unroll: int = 5

    def __post_init__(self):
        if min(self.reward, self.policy, self.value, self.consistency, self.entropy) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.unroll < 1:
            raise ValueError("unroll must be >= 1")


@dataclass
class PolicyLossMode:
    """``cross_entropy`` against the search policy, or ``simple_astar``: the
    negative log-likelihood of the recommended action."""

    mode: str = "cross_entropy"
    threshold: int = 4

    def __post_init__(self):
        if self.mode not in ("cross_entropy", "simple_astar"):
            raise ValueError("policy loss mode must be 'cross_entropy' or 'simple_astar'")

    @classmethod
    def for_space(cls, space: ActionSpace, threshold: int = 4) -> "PolicyLossMode":
        simple = not space.discrete and space.n >= threshold
        return cls("simple_astar" if simple else "cross_entropy", threshold)


class ClampCounter:
    def __init__(self):
        self.count = 0


# ---------------------------------------------------------------------------
# loss pieces


def categorical_kl(logits: Tensor, target_probs: np.ndarray) -> Tensor:
    """Row-wise KL(target || softmax(logits)); zero for a perfect fit."""
    t = np.asarray(target_probs, dtype=np.float64)
    neg_ent = np.sum(np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0), axis=-1)
    ce = ad.neg(ad.sum(ad.mul(ad.log_softmax(logits), t.astype(logits.dtype)), axis=-1))
    return ad.add(ce, neg_ent.astype(logits.dtype))


def policy_loss(policy_out, target, mode: PolicyLossMode, space: ActionSpace, candidates=None, counter: ClampCounter | None = None) -> Tensor:
    """Per-row policy loss (B,).

    Cross-entropy mode takes ``target`` as weights over the full action set
    (discrete) or over ``candidates`` (continuous). Simple mode takes the
    recommended actions as ``target``.
    """
    if space.discrete:
        logp = ad.log_softmax(policy_out)
        if mode.mode == "simple_astar":
            return ad.neg(ad.take_last(logp, np.asarray(target, dtype=np.int64)))
        return ad.neg(ad.sum(ad.mul(logp, np.asarray(target, dtype=logp.dtype)), axis=-1))
    mean, std = policy_out
    if mode.mode == "simple_astar":
        a = np.asarray(target, dtype=np.float64)[:, None, :]
        lp = ad.reshape(squashed_log_prob_t(mean, std, a), (a.shape[0],))
        ok = lp.data >= LOG_PROB_FLOOR
        if counter is not None:
            counter.count += int((~ok).sum())
        okf = ok.astype(lp.dtype)
        lp = ad.add(ad.mul(lp, okf), (LOG_PROB_FLOOR * (1.0 - okf)).astype(lp.dtype))
        return ad.neg(lp)
    lp = squashed_log_prob_t(mean, std, np.asarray(candidates))
    return ad.neg(ad.sum(ad.mul(lp, np.asarray(target, dtype=lp.dtype)), axis=-1))


def policy_entropy(policy_out, space: ActionSpace) -> Tensor:
    if space.discrete:
        logp = ad.log_softmax(policy_out)
        p = ad.softmax(policy_out)
        return ad.neg(ad.sum(ad.mul(p, logp), axis=-1))
    return gaussian_entropy_t(policy_out[1])


def _masked_mean(x: Tensor, mask: np.ndarray, weights: np.ndarray) -> Tensor:
    """sum_b w_b m_b x_b / B, with a fixed denominator so steps add linearly."""
    w = (np.asarray(weights, dtype=np.float64) * mask).astype(x.dtype) / len(mask)
    return ad.sum(ad.mul(x, w))


@dataclass
class StepOut:
    loss: Tensor
    parts: dict[str, Tensor]
    next_state: Tensor
    value_pred: np.ndarray


def step_loss(
    model: EZModel,
    state: Tensor,
    i: int,
    actions: np.ndarray,
    targets: TrainTargets,
    consistency_proj: np.ndarray,
    weights: LossWeights,
    mode: PolicyLossMode,
    importance: np.ndarray,
    counter: ClampCounter | None = None,
) -> StepOut:
    """Loss of unroll step ``i`` from latent ``state``; also returns the next latent."""
    c = model.config
    space = model.space
    pol = model.policy(state)
    v_logits = model.value(state)
    nxt, r_logits = model.dynamics(state, actions)

    r_t = scalar_to_categorical(targets.reward[:, i], c.reward_support)
    v_t = scalar_to_categorical(targets.value[:, i], c.value_support)
    L_R = _masked_mean(categorical_kl(r_logits, r_t), targets.reward_mask[:, i], importance)
    L_V = _masked_mean(categorical_kl(v_logits, v_t), targets.value_mask[:, i], importance)
    pmask = targets.policy_mask[:, i]
    if mode.mode == "simple_astar":
        ptarget = targets.a_star[:, i]
    else:
        ptarget = targets.policy[:, i]
    cands = None if targets.candidates is None else targets.candidates[:, i]
    L_P = _masked_mean(policy_loss(pol, ptarget, mode, space, cands, counter), pmask, importance)
    H = _masked_mean(policy_entropy(pol, space), pmask, importance)
    pred = model.predict_projection(model.project(nxt))
    cos = ad.cosine_similarity(pred, ad.stop_gradient(consistency_proj[:, i].astype(pred.dtype)))
    L_G = _masked_mean(ad.neg(cos), targets.consistency_mask[:, i], importance)

    total = ad.add(
        ad.add(ad.add(ad.mul(L_R, weights.reward), ad.mul(L_P, weights.policy)), ad.mul(L_V, weights.value)),
        ad.sub(ad.mul(L_G, weights.consistency), ad.mul(H, weights.entropy)),
    )
    value_pred = logits_to_scalar(v_logits.data, c.value_support)
    parts = {"reward": L_R, "policy": L_P, "value": L_V, "consistency": L_G, "entropy": H}
    return StepOut(total, parts, nxt, value_pred)


def consistency_targets(model: EZModel, obs: np.ndarray) -> np.ndarray:
    """sg(P1(H(o))) for obs (B, U, obs_dim); computed without a graph."""
    B, U, D = obs.shape
    with no_grad():
        proj = model.project(model.represent(obs.reshape(B * U, D))).data
    return proj.reshape(B, U, -1)


@dataclass
class UnrolledOut:
    loss: Tensor
    components: dict[str, float]
    steps: list[float]
    value_pred: np.ndarray


def unrolled_loss(
    model: EZModel,
    batch: SampleBatch,
    targets: TrainTargets,
    weights: LossWeights,
    mode: PolicyLossMode,
    counter: ClampCounter | None = None,
    use_importance: bool = True,
) -> UnrolledOut:
    """(1/U) sum_i L_{t+i} with latents propagated through dynamics."""
    win = batch.window
    U = min(weights.unroll, win.unroll)
    B = len(batch)
    importance = batch.meta.weights if use_importance else np.ones(B)
    proj = consistency_targets(model, win.obs[:, 1 : U + 1])
    state = model.represent(win.obs[:, 0])
    total = None
    steps = []
    comps = {k: 0.0 for k in COMPONENTS}
    value0 = None
    for i in range(U):
        out = step_loss(model, state, i, win.actions[:, i], targets, proj, weights, mode, importance, counter)
        steps.append(float(out.loss.data))
        for k, v in out.parts.items():
            comps[k] += float(v.data) / U
        if value0 is None:
            value0 = out.value_pred
        total = out.loss if total is None else ad.add(total, out.loss)
        state = out.next_state
    loss = ad.mul(total, 1.0 / U)
    comps_total = float(loss.data)
    if not math.isfinite(comps_total) or not all(math.isfinite(v) for v in comps.values()):
        raise LossError("non-finite loss", {**comps, "total": comps_total})
    comps["total"] = comps_total
    return UnrolledOut(loss, comps, steps, value0)


# ---------------------------------------------------------------------------
# snapshot publication


class SnapshotSlot:
    """Atomic publish/read of an immutable model snapshot."""

    def __init__(self, snapshot: EZModel | None = None):
        self._lock = threading.Lock()
        self._snap = snapshot
        self.publications = 0

    def publish(self, snapshot: EZModel) -> None:
        with self._lock:
            self._snap = snapshot
            self.publications += 1

    def get(self) -> EZModel:
        with self._lock:
            return self._snap


@dataclass
class SyncIntervals:
    self_play: int = 100
    target: int = 400


def sync_targets(learner: EZModel, target: SnapshotSlot, self_play: SnapshotSlot, step: int, intervals: SyncIntervals) -> None:
    """Publish fresh snapshots when ``step`` hits an interval boundary."""
    if step > 0 and step % intervals.self_play == 0:
        self_play.publish(learner.snapshot())
    if step > 0 and step % intervals.target == 0:
        target.publish(learner.snapshot())


class LossLog:
    """CSV of per-step loss components, flushed every ``flush_every`` rows."""

    header = ("step", "total") + COMPONENTS

    def __init__(self, path: str, flush_every: int = 100):
        self.f = open(path, "w", newline="")
        self.w = csv.writer(self.f)
        self.w.writerow(self.header)
        self.rows = 0
        self.flush_every = flush_every

    def write(self, step: int, comps: dict[str, float]) -> None:
        self.w.writerow([step] + [repr(float(comps[k])) for k in self.header[1:]])
        self.rows += 1
        if self.rows % self.flush_every == 0:
            self.f.flush()

    def close(self) -> None:
        self.f.close()


class Learner:
    """Owns the training model and optimizer; one optimizer step per batch."""

    def __init__(
        self,
        model: EZModel,
        opt_cfg: OptimizerConfig,
        weights: LossWeights,
        mode: PolicyLossMode,
        intervals: SyncIntervals | None = None,
    ):
        self.model = model
        self.opt = Optimizer(model.named_parameters(), opt_cfg)
        self.weights = weights
        self.mode = mode
        self.intervals = intervals or SyncIntervals()
        self.step = 0
        self.clamps = ClampCounter()
        self.target_slot = SnapshotSlot(model.snapshot())
        self.self_play_slot = SnapshotSlot(model.snapshot())

    def compute(self, batch: SampleBatch, targets: TrainTargets) -> UnrolledOut:
        return unrolled_loss(self.model, batch, targets, self.weights, self.mode, self.clamps)

    def train_step(self, batch: SampleBatch, targets: TrainTargets) -> tuple[dict[str, float], np.ndarray]:
        """Returns loss components and new priority errors for the batch rows."""
        self.model.train()
        out = self.compute(batch, targets)
        params = self.model.parameters()
        ad.backward(out.loss, params)
        self.opt.step()
        self.step += 1
        self.model.version = self.step
        sync_targets(self.model, self.target_slot, self.self_play_slot, self.step, self.intervals)
        errors = np.abs(out.value_pred - targets.value[:, 0])
        return out.components, errors

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"learner:" + k: v for k, v in self.model.full_state().items()}
        out.update(self.opt.state_dict())
        for name, slot in (("target", self.target_slot), ("self_play", self.self_play_slot)):
            out.update({f"{name}:" + k: v for k, v in slot.get().full_state().items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int, clamps: int = 0) -> None:
        def pick(prefix):
            return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

        self.model.load_full_state(pick("learner:"))
        self.opt.load_state_dict({k: v for k, v in arrays.items() if k.startswith("optim:")})
        for name, slot in (("target", self.target_slot), ("self_play", self.self_play_slot)):
            m = self.model.copy()
            m.load_full_state(pick(f"{name}:"))
            slot.publish(m.snapshot())
        self.step = step
        self.clamps.count = clamps


def weights_dict(w: LossWeights) -> dict:
    return asdict(w)
