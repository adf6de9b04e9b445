"""Run orchestration: configuration, data collection, reanalysis, learning,
evaluation, metrics and checkpoints.

Two execution modes share the same role code:

* deterministic: one thread interleaves collection, reanalysis and learning
  in a fixed order, so a fixed seed reproduces every byte of metrics.csv;
* threaded: a data worker, a batch worker and the learner run concurrently
  and talk only through bounded queues and atomic snapshot slots.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .autodiff import OptimizerConfig, load_checkpoint, save_checkpoint
from .envs import Env, make_env
from .model import ActionSpace, EZModel, ModelConfig, Support
from .replay import ReplayBuffer, Trajectory
from .search import SearchConfig, batched_search
from .targets import ValueTargetConfig, reanalyze
from .trainer import Learner, LossError, LossLog, LossWeights, PolicyLossMode, SyncIntervals

log = logging.getLogger("ezv2")


def configure_logging() -> None:
    level = os.environ.get("EZ_LOG_LEVEL", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ValueError(f"EZ_LOG_LEVEL must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    log.setLevel(levels[level])


# ---------------------------------------------------------------------------
# configuration


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class EnvConfig:
    name: str = "chain"
    params: dict = field(default_factory=dict)


@dataclass
class ModelOverrides:
    latent_dim: int = 64
    hidden: int = 64
    n_blocks: int = 2
    action_embed_dim: int = 16
    head_hidden: int = 64
    proj_dim: int = 128
    head_norm: str = "layer"
    value_support: list = field(default_factory=lambda: [-299.0, 299.0, 51])
    reward_support: list = field(default_factory=lambda: [-2.0, 2.0, 51])
    normalize_obs: bool = True


@dataclass
class ReplayConfig:
    capacity: int = 1_000_000
    alpha: float = 1.0
    beta: float = 1.0
    priority_floor: float = 1e-6
    batch_size: int = 256


@dataclass
class TrainConfig:
    total_env_steps: int = 100_000
    warmup_transitions: int = 2_000
    utd: float = 1.0
    self_play_interval: int = 100
    target_interval: int = 400
    num_envs: int = 1
    eval_interval: int = 5_000
    eval_episodes: int = 1
    stop_at_return: float | None = None
    checkpoint_interval: int = 0
    policy_loss_threshold: int = 4
    metrics_flush: int = 100


@dataclass
class WorkerConfig:
    data_workers: int = 1
    batch_workers: int = 1
    queue_depth: int = 8
    deterministic: bool = True


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelOverrides = field(default_factory=ModelOverrides)
    search: SearchConfig = field(default_factory=SearchConfig)
    targets: ValueTargetConfig = field(default_factory=ValueTargetConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    workers: WorkerConfig = field(default_factory=WorkerConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, data: Any, path: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", f"expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in data.items():
        sub = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(sub, "unknown key")
        ftype = _FIELD_TYPES.get((cls, key))
        if ftype is not None:
            kwargs[key] = _build(ftype, val, sub)
        else:
            default = _default_of(fields[key])
            if default is not None and not isinstance(default, (dict, list)) and val is not None:
                ok = isinstance(val, type(default)) or (isinstance(default, float) and isinstance(val, int) and not isinstance(val, bool))
                if not ok:
                    raise ConfigError(sub, f"expected {type(default).__name__}, got {type(val).__name__}")
            kwargs[key] = val
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(path or "<root>", str(exc)) from None


def _default_of(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
        return f.default_factory()  # type: ignore[misc]
    return None


_FIELD_TYPES = {
    (RunConfig, "env"): EnvConfig,
    (RunConfig, "model"): ModelOverrides,
    (RunConfig, "search"): SearchConfig,
    (RunConfig, "targets"): ValueTargetConfig,
    (RunConfig, "loss"): LossWeights,
    (RunConfig, "optimizer"): OptimizerConfig,
    (RunConfig, "replay"): ReplayConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "workers"): WorkerConfig,
}


def config_from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    """Build a RunConfig; ``data`` overrides ``base`` (Table-3 defaults if omitted)."""
    merged = _deep_merge((base or RunConfig()).to_dict(), data)
    over_search = data.get("search") if isinstance(data.get("search"), dict) else {}
    if "num_candidates" in over_search and "num_nonroot_candidates" not in over_search:
        merged["search"]["num_nonroot_candidates"] = None  # re-derive K/2
    cfg = _build(RunConfig, merged, "")
    try:
        make_env(cfg.env.name, **cfg.env.params)
    except (TypeError, ValueError) as exc:
        raise ConfigError("env", str(exc)) from None
    return cfg


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "params":
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(path, "config file not found")
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(path, f"invalid JSON ({exc})") from None
    preset = data.pop("preset", None)
    if preset is not None and preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {preset!r}")
    base = PRESETS[preset]() if preset else None
    return config_from_dict(data, base)


def chain_preset(seed: int = 0) -> RunConfig:
    """Desk-scale discrete run on the 10-state chain."""
    return config_from_dict(
        {
            "env": {"name": "chain", "params": {"n_states": 10, "max_episode_steps": 100}},
            "model": {"latent_dim": 32, "hidden": 32, "head_hidden": 32, "proj_dim": 32, "action_embed_dim": 8, "value_support": [-2.0, 2.0, 51]},
            "search": {"num_simulations": 16, "num_candidates": 8},
            "targets": {"T1": 2_000, "T2": 1_000},
            "replay": {"capacity": 100_000, "batch_size": 32},
            "train": {"total_env_steps": 20_000, "warmup_transitions": 200, "num_envs": 4, "eval_interval": 500, "stop_at_return": None},
            "seed": seed,
        }
    )


def point_mass_preset(seed: int = 0) -> RunConfig:
    """Desk-scale continuous run on the 1-D point mass.

    Each action is held for 4 frames (budgets still count frames) and the
    per-decision discount is 0.9, a horizon of about 40 frames. The supports
    are one-sided because every reward is <= 0.
    """
    return config_from_dict(
        {
            "env": {"name": "point_mass", "params": {"action_repeat": 4}},
            "model": {"latent_dim": 32, "hidden": 32, "head_hidden": 32, "proj_dim": 32, "action_embed_dim": 8, "value_support": [-3000.0, 0.0, 301], "reward_support": [-400.0, 0.0, 401]},
            "search": {"num_simulations": 16, "num_candidates": 8},
            "targets": {"discount": 0.9, "T1": 4_000, "T2": 2_000},
            "replay": {"capacity": 100_000, "batch_size": 32},
            "train": {"total_env_steps": 50_000, "warmup_transitions": 500, "num_envs": 4, "eval_interval": 2_000, "stop_at_return": None},
            "seed": seed,
        }
    )


PRESETS = {"chain": chain_preset, "point_mass": point_mass_preset}


def build_model(cfg: RunConfig, env: Env) -> EZModel:
    m = cfg.model
    mc = ModelConfig(
        obs_dim=env.spec.obs_dim,
        action_space=env.spec.action_space,
        latent_dim=m.latent_dim,
        hidden=m.hidden,
        n_blocks=m.n_blocks,
        action_embed_dim=m.action_embed_dim,
        head_hidden=m.head_hidden,
        proj_dim=m.proj_dim,
        head_norm=m.head_norm,
        value_support=Support(*m.value_support),
        reward_support=Support(*m.reward_support),
    )
    return EZModel(mc, seed=cfg.seed)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: EZModel, env_factory, search_cfg: SearchConfig, episodes: int, seed: int) -> list[float]:
    """Run ``episodes`` lockstep episodes from the env's evaluation start,
    acting with the search's recommended action."""
    rng = np.random.default_rng(seed)
    envs = [env_factory() for _ in range(episodes)]
    obs = [e.reset(None) for e in envs]
    rewards: list[list[float]] = [[] for _ in envs]
    live = list(range(episodes))
    while live:
        res = batched_search(model, search_cfg, rng, obs=np.stack([obs[i] for i in live]))
        still = []
        for j, i in enumerate(live):
            o, r, done, info = envs[i].step(res.a_star[j])
            obs[i] = o
            rewards[i].append(r)
            if not (done or info.get("truncated")):
                still.append(i)
        live = still
    return [envs[i].episode_return(rewards[i]) for i in range(episodes)]


# ---------------------------------------------------------------------------
# the run


METRIC_FIELDS = (
    "env_steps",
    "train_steps",
    "episode_return",
    "total",
    "reward",
    "policy",
    "value",
    "consistency",
    "entropy",
    "sve_ratio",
    "depth_mean",
    "depth_max",
    "target_version",
    "buffer_size",
)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


class _Episode:
    def __init__(self, obs: np.ndarray):
        self.obs = [obs]
        self.actions: list = []
        self.rewards: list[float] = []
        self.version = 0


class Runner:
    """Single-process training run. ``out_dir=None`` keeps everything in memory.

    ``actor`` optionally replaces search for data collection; it maps
    (observations, rng) to one action per environment.
    """

    def __init__(self, cfg: RunConfig, out_dir: str | None = None, actor=None):
        self.cfg = cfg
        self.out_dir = out_dir
        self.actor = actor
        seeds = np.random.SeedSequence(cfg.seed).spawn(5)
        self.data_rng, self.sample_rng, self.reanalyze_rng, self.reset_rng, self.eval_seed_rng = (np.random.default_rng(s) for s in seeds)
        self.envs = [self._make_env() for _ in range(cfg.train.num_envs)]
        self.space: ActionSpace = self.envs[0].spec.action_space
        model = build_model(cfg, self.envs[0])
        self.learner = Learner(
            model,
            cfg.optimizer,
            cfg.loss,
            PolicyLossMode.for_space(self.space, cfg.train.policy_loss_threshold),
            SyncIntervals(cfg.train.self_play_interval, cfg.train.target_interval),
        )
        r = cfg.replay
        self.buffer = ReplayBuffer(r.capacity, r.alpha, r.beta, r.priority_floor, cfg.targets.discount)
        self.search_cfg = self._fit_search(cfg.search)
        self.env_steps = 0  # raw frames, the unit of every budget
        self.agent_steps = 0  # decisions; the update-to-data ratio counts these
        self.train_steps = 0
        self.warmup_at: int | None = None
        self.episodes = [_Episode(e.reset(self.reset_rng)) for e in self.envs]
        self.finished_returns: list[float] = []
        self.pending_returns: list[float] = []
        self.eval_history: list[tuple[int, float]] = []
        self.env_faults = 0
        self.last_components: dict[str, float] | None = None
        self.next_eval = cfg.train.eval_interval
        self.snapshot_versions: list[int] = []
        self._metrics = None
        self._timing = None
        self._started = time.perf_counter()
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "config.json"), "w") as f:
                f.write(cfg.to_json())

    def _make_env(self) -> Env:
        return make_env(self.cfg.env.name, **self.cfg.env.params)

    def _fit_search(self, sc: SearchConfig) -> SearchConfig:
        sc = dataclasses.replace(sc, discount=self.cfg.targets.discount)
        return sc

    # -- file outputs
    def _open_outputs(self, append: bool = False) -> None:
        if not self.out_dir or self._metrics is not None:
            return
        mode = "a" if append else "w"
        self._metrics_f = open(os.path.join(self.out_dir, "metrics.csv"), mode, newline="")
        self._metrics = csv.writer(self._metrics_f)
        self._timing_f = open(os.path.join(self.out_dir, "timing.csv"), mode, newline="")
        self._timing = csv.writer(self._timing_f)
        self._eval_f = open(os.path.join(self.out_dir, "eval.csv"), mode, newline="")
        self._eval = csv.writer(self._eval_f)
        if not append:
            self._metrics.writerow(METRIC_FIELDS)
            self._timing.writerow(("train_steps", "wall_clock"))
            self._eval.writerow(("env_steps", "train_steps", "mean_return"))
        self._rows = 0

    def close(self) -> None:
        if self._metrics is not None:
            for f in (self._metrics_f, self._timing_f, self._eval_f):
                f.close()
            self._metrics = None

    # -- data collection
    def collect_step(self) -> None:
        """One lockstep action in every environment with the self-play snapshot."""
        snap = self.learner.self_play_slot.get()
        obs = np.stack([ep.obs[-1] for ep in self.episodes])
        if self.cfg.model.normalize_obs:
            self.learner.model.normalizer.update(obs)
        if self.actor is not None:
            chosen = self.actor(obs, self.data_rng)
        else:
            chosen = batched_search(snap, self.search_cfg, self.data_rng, obs=obs).a_star
        for i, (env, ep) in enumerate(zip(self.envs, self.episodes)):
            action = chosen[i]
            if not ep.actions:
                ep.version = snap.version
            try:
                o, r, done, info = env.step(action)
            except Exception as exc:  # env fault: drop the episode, restart the env
                log.error("env fault, discarding trajectory: %s", exc)
                self.env_faults += 1
                self.episodes[i] = _Episode(env.reset(self.reset_rng))
                continue
            ep.obs.append(o)
            ep.actions.append(action)
            ep.rewards.append(r)
            self.env_steps += info.get("frames", 1)
            self.agent_steps += 1
            if done or info.get("truncated"):
                self._finish(i, done, snap)

    def _finish(self, i: int, terminal: bool, snap: EZModel) -> None:
        ep = self.episodes[i]
        traj = Trajectory(
            obs=np.stack(ep.obs).astype(np.float32),
            actions=np.asarray(ep.actions),
            rewards=np.asarray(ep.rewards, dtype=np.float64),
            terminal=bool(terminal),
            version=ep.version,
        )
        self.buffer.push_trajectory(traj, model=snap)
        self.snapshot_versions.append(ep.version)
        ret = self.envs[i].episode_return(ep.rewards)
        self.finished_returns.append(ret)
        self.pending_returns.append(ret)
        self.episodes[i] = _Episode(self.envs[i].reset(self.reset_rng))

    # -- learning
    def due_train_steps(self) -> int:
        if self.warmup_at is None:
            if len(self.buffer) < self.cfg.train.warmup_transitions:
                return 0
            self.warmup_at = self.agent_steps
        return int(math.floor((self.agent_steps - self.warmup_at) * self.cfg.train.utd)) - self.train_steps

    def train_once(self) -> dict[str, float]:
        cfg = self.cfg
        batch = self.buffer.sample_batch(cfg.replay.batch_size, self.sample_rng, cfg.loss.unroll)
        targets = reanalyze(
            batch,
            self.learner.target_slot.get(),
            self.search_cfg,
            cfg.targets,
            self.reanalyze_rng,
            self.learner.step,
            online_model=self.learner.model if cfg.targets.value_target == "double" else None,
        )
        try:
            comps, errors = self.learner.train_step(batch, targets)
        except LossError:
            self._dump_batch(batch)
            raise
        self.buffer.update_priorities(batch.meta.indices, errors)
        self.train_steps += 1
        self.last_components = comps
        valid = targets.branch >= 0
        row = {
            "env_steps": self.env_steps,
            "train_steps": self.train_steps,
            "episode_return": float(np.mean(self.pending_returns)) if self.pending_returns else None,
            **{k: comps[k] for k in ("total", "reward", "policy", "value", "consistency", "entropy")},
            "sve_ratio": float(np.mean(targets.branch[valid] == 1)) if valid.any() else None,
            "depth_mean": float(np.mean(targets.search_depth[valid])) if valid.any() else None,
            "depth_max": float(np.max(targets.search_depth[valid])) if valid.any() else None,
            "target_version": targets.version,
            "buffer_size": len(self.buffer),
        }
        self.pending_returns = []
        self._write_metrics(row)
        return comps

    def _write_metrics(self, row: dict) -> None:
        if self._metrics is None:
            return
        self._metrics.writerow([_fmt(row[k]) for k in METRIC_FIELDS])
        self._timing.writerow((self.train_steps, f"{time.perf_counter() - self._started:.3f}"))
        self._rows += 1
        if self._rows % self.cfg.train.metrics_flush == 0:
            self._metrics_f.flush()
            self._timing_f.flush()

    def _dump_batch(self, batch) -> None:
        if not self.out_dir:
            return
        arrays = {"obs": batch.window.obs, "actions": batch.window.actions, "rewards": batch.window.rewards, "indices": batch.meta.indices}
        save_checkpoint(os.path.join(self.out_dir, "failed_batch.ckpt"), arrays, {"train_steps": self.train_steps})

    # -- evaluation
    def evaluate(self, episodes: int | None = None) -> float:
        n = episodes or self.cfg.train.eval_episodes
        seed = int(self.cfg.seed * 1_000_003 + self.env_steps)
        rets = evaluate(self.learner.model.snapshot(), self._make_env, self.search_cfg, n, seed)
        mean = float(np.mean(rets))
        self.eval_history.append((self.env_steps, mean))
        if self.out_dir and self._metrics is not None:
            self._eval.writerow((self.env_steps, self.train_steps, repr(mean)))
            self._eval_f.flush()
        log.info("eval at %d env steps: %.4f", self.env_steps, mean)
        return mean

    # -- main loop
    def run(self, max_env_steps: int | None = None, max_train_steps: int | None = None, max_cpu_seconds: float | None = None) -> dict:
        """Deterministic interleaving: pay down due train steps, evaluate at
        interval boundaries, then collect one lockstep action. Stops at the env-step budget,
        the train-step cap, the CPU-time cap, or once an evaluation reaches
        ``stop_at_return``.

        Each pass pays down outstanding train steps before collecting, so a
        run resumed from a checkpoint taken mid-way through a pay-down picks
        up exactly where the uninterrupted run would be."""
        self._open_outputs(append=self.train_steps > 0)
        cfg = self.cfg.train
        budget = cfg.total_env_steps if max_env_steps is None else max_env_steps
        stop = False
        cpu0 = time.process_time()
        while True:
            if max_cpu_seconds is not None and time.process_time() - cpu0 > max_cpu_seconds:
                break
            for _ in range(max(0, self.due_train_steps())):
                if max_train_steps is not None and self.train_steps >= max_train_steps:
                    stop = True
                    break
                self.train_once()
                if cfg.checkpoint_interval and self.out_dir and self.train_steps % cfg.checkpoint_interval == 0:
                    self.save(os.path.join(self.out_dir, f"checkpoint_{self.train_steps}.ckpt"))
            if stop:
                break
            if cfg.eval_interval and self.env_steps >= self.next_eval:
                self.next_eval += cfg.eval_interval
                ret = self.evaluate()
                if cfg.stop_at_return is not None and ret >= cfg.stop_at_return:
                    break
            if self.env_steps >= budget:
                break
            self.collect_step()
        if self.out_dir:
            self.save(os.path.join(self.out_dir, "final.ckpt"))
        self.close()
        return self.summary()

    def summary(self) -> dict:
        return {
            "env_steps": self.env_steps,
            "train_steps": self.train_steps,
            "episodes": len(self.finished_returns),
            "eval": list(self.eval_history),
            "best_eval": max((r for _, r in self.eval_history), default=None),
            "env_faults": self.env_faults,
            "policy_logprob_clamps": self.learner.clamps.count,
        }

    # -- checkpoints
    def save(self, path: str) -> None:
        arrays = dict(self.learner.state_arrays())
        rep_arrays, rep_meta = self.buffer.state_arrays()
        arrays.update(rep_arrays)
        episodes = []
        for i, ep in enumerate(self.episodes):
            arrays[f"episode:{i}:obs"] = np.stack(ep.obs)
            if ep.actions:
                arrays[f"episode:{i}:actions"] = np.asarray(ep.actions)
            episodes.append({"rewards": [float(r) for r in ep.rewards], "version": ep.version, "env": self.envs[i].get_state()})
        meta = {
            "config": self.cfg.to_dict(),
            "env_steps": self.env_steps,
            "agent_steps": self.agent_steps,
            "train_steps": self.train_steps,
            "learner_step": self.learner.step,
            "clamps": self.learner.clamps.count,
            "warmup_at": self.warmup_at,
            "next_eval": self.next_eval,
            "finished_returns": self.finished_returns,
            "pending_returns": self.pending_returns,
            "eval_history": self.eval_history,
            "snapshot_versions": self.snapshot_versions,
            "env_faults": self.env_faults,
            "rng": {
                name: getattr(self, name).bit_generator.state
                for name in ("data_rng", "sample_rng", "reanalyze_rng", "reset_rng", "eval_seed_rng")
            },
            "replay": rep_meta,
            "episodes": episodes,
            "publications": [self.learner.target_slot.publications, self.learner.self_play_slot.publications],
        }
        save_checkpoint(path, arrays, meta)

    @classmethod
    def from_checkpoint(cls, path: str, out_dir: str | None = None) -> "Runner":
        arrays, meta = load_checkpoint(path)
        cfg = config_from_dict(meta["config"])
        run = cls(cfg, out_dir=None)
        run.out_dir = out_dir
        run.learner.load_state_arrays(arrays, meta["learner_step"], meta["clamps"])
        run.learner.target_slot.publications, run.learner.self_play_slot.publications = meta["publications"]
        run.buffer = ReplayBuffer.from_state(arrays, meta["replay"])
        run.env_steps = meta["env_steps"]
        run.agent_steps = meta["agent_steps"]
        run.train_steps = meta["train_steps"]
        run.warmup_at = meta["warmup_at"]
        run.next_eval = meta["next_eval"]
        run.finished_returns = list(meta["finished_returns"])
        run.pending_returns = list(meta["pending_returns"])
        run.eval_history = [tuple(x) for x in meta["eval_history"]]
        run.snapshot_versions = list(meta["snapshot_versions"])
        run.env_faults = meta["env_faults"]
        for name, state in meta["rng"].items():
            getattr(run, name).bit_generator.state = state
        for i, info in enumerate(meta["episodes"]):
            run.envs[i].set_state(info["env"])
            ep = _Episode(arrays[f"episode:{i}:obs"][0])
            ep.obs = list(arrays[f"episode:{i}:obs"])
            if f"episode:{i}:actions" in arrays:
                ep.actions = list(arrays[f"episode:{i}:actions"])
            ep.rewards = list(info["rewards"])
            ep.version = info["version"]
            run.episodes[i] = ep
        return run


# ---------------------------------------------------------------------------
# threaded mode


class ThreadedRun:
    """Concurrent data worker, batch worker and learner.

    Workers share only the replay buffer (one writer, guarded by a lock),
    the snapshot slots and a bounded queue of reanalyzed batches. Results
    are not bit-reproducible; per-module invariants still hold.
    """

    def __init__(self, runner: Runner):
        self.r = runner
        self.lock = threading.Lock()
        self.q: queue.Queue = queue.Queue(maxsize=runner.cfg.workers.queue_depth)
        self.stop = threading.Event()
        self.errors: list[BaseException] = []
        self.max_queue = 0
        self.batch_ids = 0

    def _data_loop(self) -> None:
        r = self.r
        budget = r.cfg.train.total_env_steps
        try:
            while not self.stop.is_set() and r.env_steps < budget:
                # throttle so the update-to-data ratio stays near the target
                if r.warmup_at is not None and (r.agent_steps - r.warmup_at) * r.cfg.train.utd > r.train_steps + 2 * r.cfg.train.num_envs:
                    time.sleep(0.001)
                    continue
                with self.lock:
                    r.collect_step()
                    if r.warmup_at is None and len(r.buffer) >= r.cfg.train.warmup_transitions:
                        r.warmup_at = r.agent_steps
        except BaseException as exc:  # surfaced by run()
            self.errors.append(exc)
            self.stop.set()

    def _batch_loop(self) -> None:
        r = self.r
        cfg = r.cfg
        try:
            while not self.stop.is_set():
                if r.warmup_at is None:
                    time.sleep(0.001)
                    continue
                with self.lock:
                    batch = r.buffer.sample_batch(cfg.replay.batch_size, r.sample_rng, cfg.loss.unroll)
                bid = self.batch_ids
                self.batch_ids += 1
                try:
                    targets = reanalyze(batch, r.learner.target_slot.get(), r.search_cfg, cfg.targets, r.reanalyze_rng, r.learner.step)
                except Exception as exc:
                    raise RuntimeError(f"reanalysis failed for batch {bid}") from exc
                while not self.stop.is_set():
                    try:
                        self.q.put((bid, batch, targets), timeout=0.05)
                        break
                    except queue.Full:
                        continue
                self.max_queue = max(self.max_queue, self.q.qsize())
        except BaseException as exc:
            self.errors.append(exc)
            self.stop.set()

    def run(self) -> dict:
        r = self.r
        r._open_outputs()
        threads = [threading.Thread(target=self._data_loop, daemon=True)]
        threads += [threading.Thread(target=self._batch_loop, daemon=True) for _ in range(r.cfg.workers.batch_workers)]
        for t in threads:
            t.start()
        budget = r.cfg.train.total_env_steps
        try:
            while not self.stop.is_set():
                if r.env_steps >= budget and r.warmup_at is not None and r.train_steps >= (r.agent_steps - r.warmup_at) * r.cfg.train.utd:
                    break
                if r.env_steps >= budget and r.warmup_at is None:
                    break
                try:
                    bid, batch, targets = self.q.get(timeout=0.05)
                except queue.Empty:
                    continue
                comps, errors = r.learner.train_step(batch, targets)
                with self.lock:
                    r.buffer.update_priorities(batch.meta.indices, errors)
                r.train_steps += 1
                row = {k: None for k in METRIC_FIELDS}
                row.update({"env_steps": r.env_steps, "train_steps": r.train_steps, "target_version": targets.version, "buffer_size": len(r.buffer)})
                row.update({k: comps[k] for k in ("total", "reward", "policy", "value", "consistency", "entropy")})
                r._write_metrics(row)
        finally:
            self.stop.set()
            for t in threads:
                t.join(timeout=10)
        if self.errors:
            raise self.errors[0]
        if r.out_dir:
            r.save(os.path.join(r.out_dir, "final.ckpt"))
        r.close()
        out = r.summary()
        out["max_queue"] = self.max_queue
        return out
