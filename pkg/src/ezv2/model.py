"""Learned model: representation, dynamics + reward, policy, value, action
embedding and the projector/predictor pair used by the consistency loss.

Inputs are 1-D observation vectors. Layer sizes default to a desk-scale
configuration; ``ModelConfig.full_scale()`` restores the full-size layout.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Linear, LayerNorm, BatchNorm, Module, Tensor, no_grad

LOG_2PI = math.log(2 * math.pi)
ACTION_EPS = 1e-6
MEAN_SCALE = 5.0


# ---------------------------------------------------------------------------
# action spaces


@dataclass(frozen=True)
class ActionSpace:
    kind: str  # "discrete" or "continuous"
    n: int  # action count (discrete) or action dimension (continuous)

    def __post_init__(self):
        if self.kind not in ("discrete", "continuous"):
            raise ValueError(f"action space kind must be discrete/continuous, got {self.kind!r}")
        if self.n < 1:
            raise ValueError("action space size must be >= 1")

    @property
    def discrete(self) -> bool:
        return self.kind == "discrete"

    def validate(self, actions) -> np.ndarray:
        a = np.asarray(actions)
        if self.discrete:
            if a.dtype.kind not in "iu" and not np.all(np.equal(np.mod(a, 1), 0)):
                raise ValueError("discrete actions must be integers")
            a = a.astype(np.int64)
            if a.size and (a.min() < 0 or a.max() >= self.n):
                raise ValueError(f"discrete action out of range [0, {self.n})")
            return a
        a = a.astype(ad.DEFAULT_DTYPE)
        if a.shape[-1] != self.n:
            raise ValueError(f"continuous action must have dim {self.n}, got shape {a.shape}")
        if not np.all(np.isfinite(a)) or np.any(np.abs(a) > 1 + 1e-5):
            raise ValueError("continuous action outside declared bounds [-1, 1]")
        return a


# ---------------------------------------------------------------------------
# categorical scalars


@dataclass(frozen=True)
class Support:
    lo: float
    hi: float
    bins: int = 51

    def __post_init__(self):
        if self.bins < 3 or self.bins % 2 == 0:
            raise ValueError("support needs an odd number of bins >= 3")
        if not self.lo < self.hi:
            raise ValueError("support requires lo < hi")

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.bins)

    @property
    def delta(self) -> float:
        return (self.hi - self.lo) / (self.bins - 1)


def scalar_to_categorical(x, support: Support) -> np.ndarray:
    """Two-hot encoding onto the two bins adjacent to ``x`` (clamped to the support)."""
    raw = np.asarray(x, dtype=np.float64)
    bad = np.isnan(raw)
    x = np.clip(np.where(bad, support.lo, raw), support.lo, support.hi)
    pos = (x - support.lo) / support.delta
    low = np.clip(np.floor(pos).astype(np.int64), 0, support.bins - 1)
    frac = pos - low
    high = np.minimum(low + 1, support.bins - 1)
    out = np.zeros(x.shape + (support.bins,))
    np.put_along_axis(out, low[..., None], (1 - frac)[..., None], axis=-1)
    # at the top edge low == high and frac == 0, so adding keeps mass 1
    hi_vals = np.take_along_axis(out, high[..., None], axis=-1) + frac[..., None]
    np.put_along_axis(out, high[..., None], hi_vals, axis=-1)
    out[bad] = np.nan  # NaN inputs stay NaN so the loss check can catch them
    return out


def categorical_to_scalar(probs, support: Support) -> np.ndarray:
    return np.asarray(probs, dtype=np.float64) @ support.centers


def logits_to_scalar(logits, support: Support) -> np.ndarray:
    return categorical_to_scalar(ad.softmax_np(np.asarray(logits, dtype=np.float64)), support)


# ---------------------------------------------------------------------------
# observation normalizer


class RunningMean:
    """Per-dimension running mean/variance; normalization clips to [-clip, clip].

    Statistics change only through :meth:`update`, which data collection calls;
    learner passes read frozen statistics.
    """

    def __init__(self, dim: int, clip: float = 10.0, eps: float = 1e-8):
        self.count = 0.0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)
        self.clip = clip
        self.eps = eps

    @property
    def var(self) -> np.ndarray:
        if self.count < 2:
            return np.ones_like(self.mean)
        return np.maximum(self.m2 / self.count, 0.0)

    def update(self, batch) -> None:
        x = np.asarray(batch, dtype=np.float64).reshape(-1, self.mean.shape[0])
        n = x.shape[0]
        if n == 0:
            return
        bmean = x.mean(axis=0)
        bm2 = ((x - bmean) ** 2).sum(axis=0)
        tot = self.count + n
        delta = bmean - self.mean
        self.mean = self.mean + delta * n / tot
        self.m2 = self.m2 + bm2 + delta**2 * self.count * n / tot
        self.count = tot

    def normalize(self, obs) -> np.ndarray:
        x = np.asarray(obs, dtype=np.float64)
        z = (x - self.mean) / np.sqrt(self.var + self.eps)
        return np.clip(z, -self.clip, self.clip).astype(ad.DEFAULT_DTYPE)

    def state(self) -> dict[str, np.ndarray]:
        return {"count": np.array(self.count), "mean": self.mean.copy(), "m2": self.m2.copy()}

    def load(self, state: dict[str, np.ndarray]) -> None:
        self.count = float(np.asarray(state["count"]).item())
        self.mean = np.array(state["mean"], dtype=np.float64)
        self.m2 = np.array(state["m2"], dtype=np.float64)


# ---------------------------------------------------------------------------
# squashed Gaussian


def atanh_clipped(a) -> np.ndarray:
    a = np.clip(np.asarray(a, dtype=np.float64), -1 + ACTION_EPS, 1 - ACTION_EPS)
    return np.arctanh(a)


def squash_correction(z: np.ndarray) -> np.ndarray:
    """log(1 - tanh(z)^2), computed stably."""
    return 2.0 * (math.log(2.0) - z - ad.softplus_np(-2.0 * z))


def sample_squashed(mean, std, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` actions ``tanh(z)``, ``z ~ N(mean, std^2)``, per row.

    ``mean``/``std`` are (B, d). Returns actions (B, n, d) and log-probs (B, n)
    that include the tanh change-of-variables term.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    eps = rng.standard_normal((mean.shape[0], n, mean.shape[1]))
    z = mean[:, None, :] + std[:, None, :] * eps
    a = np.tanh(z)
    logp = np.sum(-0.5 * eps**2 - np.log(std[:, None, :]) - 0.5 * LOG_2PI - squash_correction(z), axis=-1)
    return a, logp


def squashed_log_prob(mean, std, actions) -> np.ndarray:
    """Log density of actions (B, K, d) under per-row squashed Gaussians (B, d)."""
    mean = np.asarray(mean, dtype=np.float64)[:, None, :]
    std = np.asarray(std, dtype=np.float64)[:, None, :]
    z = atanh_clipped(actions)
    u = (z - mean) / std
    return np.sum(-0.5 * u**2 - np.log(std) - 0.5 * LOG_2PI - squash_correction(z), axis=-1)


def squashed_log_prob_t(mean: Tensor, std: Tensor, actions) -> Tensor:
    """Differentiable counterpart of :func:`squashed_log_prob` (B, K)."""
    z = atanh_clipped(actions)
    B, K, d = z.shape
    zt = ad.as_tensor(z.astype(mean.dtype))
    m = ad.reshape(mean, (B, 1, d))
    s = ad.reshape(std, (B, 1, d))
    u = ad.div(ad.sub(zt, m), s)
    corr = squash_correction(z).astype(mean.dtype)
    per_dim = ad.sub(ad.sub(ad.mul(ad.square(u), -0.5), ad.log(s)), 0.5 * LOG_2PI + corr)
    return ad.sum(per_dim, axis=-1)


def gaussian_entropy_t(std: Tensor) -> Tensor:
    """Entropy of the pre-squash Gaussian, summed over action dims (B,)."""
    return ad.sum(ad.add(ad.log(std), 0.5 * (LOG_2PI + 1.0)), axis=-1)


# ---------------------------------------------------------------------------
# policy output container


@dataclass
class PolicyOutput:
    """Numpy view of a policy head: discrete logits OR continuous mean/std."""

    logits: np.ndarray | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    @property
    def discrete(self) -> bool:
        return self.logits is not None

    def __len__(self) -> int:
        return len(self.logits if self.discrete else self.mean)

    def take(self, idx) -> "PolicyOutput":
        if self.discrete:
            return PolicyOutput(logits=self.logits[idx])
        return PolicyOutput(mean=self.mean[idx], std=self.std[idx])

    def check_finite(self) -> bool:
        arrs = [self.logits] if self.discrete else [self.mean, self.std]
        return all(np.all(np.isfinite(a)) for a in arrs)


@dataclass
class Prediction:
    """Batched model outputs used by the search (all numpy)."""

    state: np.ndarray
    value: np.ndarray
    policy: PolicyOutput
    reward: np.ndarray | None = None


# ---------------------------------------------------------------------------
# network blocks


class ResidualBlock(Module):
    """Pre-LN residual block: x + W2 relu(LN(W1 relu(LN(x))))."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.norm2 = LayerNorm(hidden)
        self.fc2 = Linear(hidden, dim, rng, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.fc1(ad.relu(self.norm1(x)))
        h = self.fc2(ad.relu(self.norm2(h)))
        return ad.add(x, h)


class Tower(Module):
    def __init__(self, dim: int, hidden: int, n_blocks: int, rng: np.random.Generator):
        self.blocks = [ResidualBlock(dim, hidden, rng) for _ in range(n_blocks)]

    def __call__(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class Head(Module):
    """Linear + LN, then a norm/ReLU MLP, then a zero-initialized output layer."""

    def __init__(self, dim: int, hidden: int, n_out: int, norm: str, rng: np.random.Generator):
        self.fc_in = Linear(dim, hidden, rng)
        self.norm_in = LayerNorm(hidden)
        self.fc_mid = Linear(hidden, hidden, rng)
        self.norm_mid = BatchNorm(hidden) if norm == "batch" else LayerNorm(hidden)
        self.fc_out = Linear(hidden, n_out, rng, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm_in(self.fc_in(x))
        h = ad.relu(self.norm_mid(self.fc_mid(ad.relu(h))))
        return self.fc_out(h)


class ActionEncoder(Module):
    def __init__(self, space: ActionSpace, dim: int, rng: np.random.Generator):
        self.space = space
        if space.discrete:
            self.table = ad.parameter(rng.normal(0.0, 1.0, size=(space.n, dim)))
            self.fc = Linear(dim, dim, rng)
        else:
            self.fc = Linear(space.n, dim, rng)
        self.norm = LayerNorm(dim)

    def __call__(self, actions: np.ndarray) -> Tensor:
        if self.space.discrete:
            x = ad.embedding(self.table, actions)
        else:
            x = ad.as_tensor(np.asarray(actions, dtype=self.fc.weight.dtype))
        return ad.relu(self.norm(self.fc(x)))


# ---------------------------------------------------------------------------
# full model


@dataclass
class ModelConfig:
    obs_dim: int
    action_space: ActionSpace
    latent_dim: int = 64
    hidden: int = 64
    n_blocks: int = 2
    action_embed_dim: int = 16
    head_hidden: int = 64
    proj_dim: int = 128
    head_norm: str = "layer"
    value_support: Support = field(default_factory=lambda: Support(-299.0, 299.0, 51))
    reward_support: Support = field(default_factory=lambda: Support(-2.0, 2.0, 51))

    def __post_init__(self):
        if isinstance(self.action_space, dict):
            self.action_space = ActionSpace(**self.action_space)
        if isinstance(self.value_support, dict):
            self.value_support = Support(**self.value_support)
        if isinstance(self.reward_support, dict):
            self.reward_support = Support(**self.reward_support)
        if self.head_norm not in ("layer", "batch"):
            raise ValueError("head_norm must be 'layer' or 'batch'")

    @classmethod
    def full_scale(cls, obs_dim: int, action_space: ActionSpace, **kw) -> "ModelConfig":
        base = dict(latent_dim=128, hidden=256, n_blocks=3, action_embed_dim=64, head_hidden=256, proj_dim=128, head_norm="batch")
        base.update(kw)
        return cls(obs_dim=obs_dim, action_space=action_space, **base)

    def to_dict(self) -> dict:
        return asdict(self)


class EZModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        c = config
        self.config = c
        self.space = c.action_space
        self.normalizer = RunningMean(c.obs_dim)
        d = c.latent_dim
        # representation
        self.rep_in = Linear(c.obs_dim, d, rng)
        self.rep_norm = LayerNorm(d)
        self.rep_tower = Tower(d, c.hidden, c.n_blocks, rng)
        # dynamics
        self.action_encoder = ActionEncoder(c.action_space, c.action_embed_dim, rng)
        self.dyn_in = Linear(d + c.action_embed_dim, d, rng)
        self.dyn_tower = Tower(d, c.hidden, c.n_blocks, rng)
        # prediction heads
        vb, rb = c.value_support.bins, c.reward_support.bins
        self.reward_head = Head(d, c.head_hidden, rb, c.head_norm, rng)
        self.value_head = Head(d, c.head_hidden, vb, c.head_norm, rng)
        n_pol = c.action_space.n if c.action_space.discrete else 2 * c.action_space.n
        self.policy_head = Head(d, c.head_hidden, n_pol, c.head_norm, rng)
        # consistency projector / predictor
        p = c.proj_dim
        self.proj_fc1 = Linear(d, p, rng)
        self.proj_norm1 = LayerNorm(p)
        self.proj_fc2 = Linear(p, p, rng)
        self.proj_norm2 = LayerNorm(p)
        self.pred_fc1 = Linear(p, p // 2, rng)
        self.pred_norm = LayerNorm(p // 2)
        self.pred_fc2 = Linear(p // 2, p, rng)
        self.version = 0

    # -- train / eval mode only matters for batch-norm heads
    def train(self, flag: bool = True) -> "EZModel":
        for head in (self.reward_head, self.value_head, self.policy_head):
            if isinstance(head.norm_mid, BatchNorm):
                head.norm_mid.training = flag
        return self

    def eval(self) -> "EZModel":
        return self.train(False)

    # -- learnable functions (Tensor in, Tensor out)
    def represent(self, obs) -> Tensor:
        obs = np.asarray(obs)
        if obs.ndim == 1:
            obs = obs[None]
        if obs.shape[-1] != self.config.obs_dim:
            raise ValueError(f"observation dim {obs.shape[-1]} != {self.config.obs_dim}")
        if not np.all(np.isfinite(obs)):
            raise ValueError("observation contains NaN or inf")
        x = ad.as_tensor(self.normalizer.normalize(obs).astype(self.rep_in.weight.dtype))
        h = ad.tanh(self.rep_norm(self.rep_in(x)))
        return ad.layer_norm(self.rep_tower(h))

    def embed_action(self, actions) -> Tensor:
        return self.action_encoder(self.space.validate(actions))

    def dynamics(self, state: Tensor, actions) -> tuple[Tensor, Tensor]:
        """Returns (next latent state, reward logits)."""
        e = self.embed_action(actions)
        h = self.dyn_in(ad.concat([state, e], axis=-1))
        nxt = ad.layer_norm(self.dyn_tower(h))
        return nxt, self.reward_head(nxt)

    def policy(self, state: Tensor):
        """Discrete: logits Tensor. Continuous: (mean, std) Tensors."""
        out = self.policy_head(state)
        if self.space.discrete:
            return out
        d = self.space.n
        mean = ad.mul(ad.tanh(out[:, :d]), MEAN_SCALE)
        std = ad.softplus(out[:, d:])
        return mean, std

    def value(self, state: Tensor) -> Tensor:
        return self.value_head(state)

    def project(self, state: Tensor) -> Tensor:
        h = ad.relu(self.proj_norm1(self.proj_fc1(state)))
        return self.proj_norm2(self.proj_fc2(h))

    def predict_projection(self, proj: Tensor) -> Tensor:
        return self.pred_fc2(ad.relu(self.pred_norm(self.pred_fc1(proj))))

    # -- numpy inference used by search
    def _policy_np(self, state: Tensor) -> PolicyOutput:
        pol = self.policy(state)
        if self.space.discrete:
            return PolicyOutput(logits=pol.data.astype(np.float64))
        return PolicyOutput(mean=pol[0].data.astype(np.float64), std=pol[1].data.astype(np.float64))

    def initial_inference(self, obs) -> Prediction:
        with no_grad():
            s = self.represent(obs)
            v = logits_to_scalar(self.value(s).data, self.config.value_support)
            return Prediction(state=s.data, value=v, policy=self._policy_np(s))

    def recurrent_inference(self, state: np.ndarray, actions) -> Prediction:
        with no_grad():
            nxt, r_logits = self.dynamics(ad.as_tensor(state), actions)
            r = logits_to_scalar(r_logits.data, self.config.reward_support)
            v = logits_to_scalar(self.value(nxt).data, self.config.value_support)
            return Prediction(state=nxt.data, value=v, policy=self._policy_np(nxt), reward=r)

    # -- snapshots and persistence
    def full_state(self) -> dict[str, np.ndarray]:
        out = self.state_dict()
        for k, v in self.normalizer.state().items():
            out["normalizer:" + k] = v
        out["meta:version"] = np.array(self.version, dtype=np.int64)
        return out

    def load_full_state(self, state: dict[str, np.ndarray]) -> None:
        self.load_state_dict(state)
        self.normalizer.load({k.split(":", 1)[1]: v for k, v in state.items() if k.startswith("normalizer:")})
        self.version = int(np.asarray(state.get("meta:version", 0)).item())

    def snapshot(self) -> "EZModel":
        """Independent copy with read-only parameter arrays."""
        snap = copy.deepcopy(self)
        for p in snap.parameters():
            p.data.setflags(write=False)
            p.grad = None
        snap.eval()
        return snap

    def copy(self) -> "EZModel":
        dup = copy.deepcopy(self)
        for p in dup.parameters():
            p.data = np.array(p.data, copy=True)
            p.grad = None
        return dup
