"""Prioritized FIFO replay over whole trajectories.

Every transition gets a global insertion index from a monotone counter and
lives in slot ``index % capacity``. Because eviction removes whole
trajectories oldest-first and new data is appended contiguously, live
indices always fit in the slot ring without collisions.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Trajectory:
    """One episode (or episode fragment).

    ``obs`` has one more row than ``rewards``: the observation after the last
    action, used for bootstrapping and the consistency target. ``terminal``
    says whether that last observation is a true terminal state (as opposed
    to a time-limit cut).
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminal: bool
    version: int = 0

    def __post_init__(self):
        T = len(self.rewards)
        if T < 1:
            raise ValueError("trajectory must contain at least one transition")
        if len(self.actions) != T or len(self.obs) != T + 1:
            raise ValueError(f"inconsistent trajectory lengths: obs {len(self.obs)}, actions {len(self.actions)}, rewards {T}")
        for arr in (self.obs, self.actions, self.rewards):
            arr.setflags(write=False)

    @property
    def length(self) -> int:
        return len(self.rewards)


@dataclass
class Window:
    """Fixed-length training windows starting at sampled positions.

    Position ``k`` of a row is time ``t + k`` of its trajectory. Masks:
    ``state_mask`` marks real pre-action states (``t + k < T``);
    ``obs_mask`` marks positions with an observation (``t + k <= T``);
    ``after_terminal`` marks padding past a true terminal, where reward and
    value targets are zero rather than masked.
    """

    obs: np.ndarray  # (B, U+1, obs_dim)
    actions: np.ndarray  # (B, U) or (B, U, d)
    rewards: np.ndarray  # (B, U)
    state_mask: np.ndarray  # (B, U+1)
    obs_mask: np.ndarray  # (B, U+1)
    after_terminal: np.ndarray  # (B, U+1)

    @property
    def unroll(self) -> int:
        return self.rewards.shape[1]


@dataclass
class SampleMeta:
    indices: np.ndarray  # global insertion index i_s of each row's start
    weights: np.ndarray  # importance weights in (0, 1]
    traj_ids: np.ndarray
    offsets: np.ndarray
    probs: np.ndarray


@dataclass
class SampleBatch:
    meta: SampleMeta
    window: Window
    trajectories: list[Trajectory] = field(repr=False)
    buffer_counter: int = 0

    def __len__(self) -> int:
        return len(self.meta.indices)


def build_window(trajs: list[Trajectory], offsets: np.ndarray, unroll: int) -> Window:
    B = len(trajs)
    first = trajs[0]
    obs_dim = first.obs.shape[1]
    act_shape = first.actions.shape[1:]
    obs = np.zeros((B, unroll + 1, obs_dim), dtype=first.obs.dtype)
    actions = np.zeros((B, unroll) + act_shape, dtype=first.actions.dtype)
    rewards = np.zeros((B, unroll))
    state_mask = np.zeros((B, unroll + 1), bool)
    obs_mask = np.zeros((B, unroll + 1), bool)
    after = np.zeros((B, unroll + 1), bool)
    for b, (tr, t) in enumerate(zip(trajs, offsets)):
        T = tr.length
        pos = t + np.arange(unroll + 1)
        obs[b] = tr.obs[np.minimum(pos, T)]
        state_mask[b] = pos < T
        obs_mask[b] = pos <= T
        after[b] = (pos >= T) & tr.terminal
        live = pos[:unroll] < T
        actions[b, live] = tr.actions[pos[:unroll][live]]
        rewards[b, live] = tr.rewards[pos[:unroll][live]]
    return Window(obs, actions, rewards, state_mask, obs_mask, after)


class SumTree:
    """Array-backed sum tree with vectorized updates and prefix-sum search."""

    def __init__(self, size: int):
        self.size = size
        cap = 1
        while cap < size:
            cap *= 2
        self.cap = cap
        self.tree = np.zeros(2 * cap)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def leaves(self) -> np.ndarray:
        return self.tree[self.cap : self.cap + self.size]

    def update(self, slots: np.ndarray, values: np.ndarray) -> None:
        slots = np.asarray(slots, dtype=np.int64)
        if slots.size == 0:
            return
        self.tree[slots + self.cap] = values
        if self.cap == 1:
            return  # the single leaf is the root
        nodes = np.unique((slots + self.cap) // 2)
        while True:
            self.tree[nodes] = self.tree[2 * nodes] + self.tree[2 * nodes + 1]
            if nodes[0] == 1:
                break
            # halving keeps the array sorted, so dropping repeats is a neighbour test
            nodes = nodes // 2
            if nodes.size > 1:
                nodes = nodes[np.concatenate(([True], nodes[1:] != nodes[:-1]))]

    def find(self, mass: np.ndarray) -> np.ndarray:
        """Leaf index whose cumulative interval contains each ``mass``."""
        mass = np.asarray(mass, dtype=np.float64).copy()
        node = np.ones(mass.shape, dtype=np.int64)
        while node[0] < self.cap:
            left = 2 * node
            lv = self.tree[left]
            go_right = (mass >= lv) & (self.tree[left + 1] > 0)
            mass = np.where(go_right, mass - lv, mass)
            node = np.where(go_right, left + 1, left)
        return node - self.cap


class ReplayBuffer:
    def __init__(
        self,
        capacity: int = 1_000_000,
        alpha: float = 1.0,
        beta: float = 1.0,
        priority_floor: float = 1e-6,
        discount: float = 0.997,
    ):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.alpha = alpha
        self.beta = beta
        self.floor = priority_floor
        self.discount = discount
        self.tree = SumTree(self.capacity)
        self.priority = np.zeros(self.capacity)
        self.slot_index = np.full(self.capacity, -1, dtype=np.int64)
        self.slot_traj = np.full(self.capacity, -1, dtype=np.int64)
        self.trajectories: OrderedDict[int, Trajectory] = OrderedDict()
        self.traj_start: dict[int, int] = {}
        self.counter = 0  # global insertion index of the next transition
        self.next_traj_id = 0
        self.size = 0
        self.stale_updates = 0
        self.evicted_trajectories = 0

    def __len__(self) -> int:
        return self.size

    # -- priorities
    def bellman_priorities(self, traj: Trajectory, model) -> np.ndarray:
        """|v(s_t) - (u_t + gamma v(s_{t+1}))| with the given model, plus the floor."""
        v = np.asarray(model.initial_inference(traj.obs).value, dtype=np.float64)
        nxt = v[1:].copy()
        if traj.terminal:
            nxt[-1] = 0.0
        target = traj.rewards + self.discount * nxt
        return np.abs(v[:-1] - target) + self.floor

    def _set_priorities(self, slots: np.ndarray, prio: np.ndarray) -> None:
        prio = np.maximum(np.asarray(prio, dtype=np.float64), self.floor)
        self.priority[slots] = prio
        self.tree.update(slots, prio**self.alpha)

    # -- ingestion
    def push_trajectory(self, traj: Trajectory, model=None, priorities=None) -> int:
        T = traj.length
        if T > self.capacity:
            raise ValueError(f"trajectory of length {T} exceeds capacity {self.capacity}")
        if priorities is None:
            if model is not None:
                priorities = self.bellman_priorities(traj, model)
            else:
                live = self.priority[self.slot_index >= 0]
                priorities = np.full(T, live.max() if live.size else 1.0)
        priorities = np.asarray(priorities, dtype=np.float64)
        if priorities.shape != (T,) or not np.all(np.isfinite(priorities)):
            raise ValueError("priorities must be finite with one entry per transition")
        while self.size + T > self.capacity:
            self._evict_oldest()
        tid = self.next_traj_id
        self.next_traj_id += 1
        start = self.counter
        idx = start + np.arange(T)
        slots = idx % self.capacity
        self.slot_index[slots] = idx
        self.slot_traj[slots] = tid
        self.trajectories[tid] = traj
        self.traj_start[tid] = start
        self._set_priorities(slots, priorities)
        self.counter += T
        self.size += T
        return tid

    def _evict_oldest(self) -> None:
        tid, traj = self.trajectories.popitem(last=False)
        start = self.traj_start.pop(tid)
        slots = (start + np.arange(traj.length)) % self.capacity
        self.slot_index[slots] = -1
        self.slot_traj[slots] = -1
        self.priority[slots] = 0.0
        self.tree.update(slots, np.zeros(len(slots)))
        self.size -= traj.length
        self.evicted_trajectories += 1

    # -- sampling
    def sample_indices(self, batch_size: int, rng: np.random.Generator, alpha: float | None = None, beta: float | None = None) -> SampleMeta:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        if alpha is not None and alpha != self.alpha:
            self.alpha = alpha
            live = np.flatnonzero(self.slot_index >= 0)
            self.tree.update(live, self.priority[live] ** alpha)
        beta = self.beta if beta is None else beta
        total = self.tree.total
        mass = rng.uniform(0.0, total, size=batch_size)
        slots = self.tree.find(mass)
        # guard against float round-off landing on an empty or zero leaf
        bad = self.slot_index[slots] < 0
        if bad.any():
            live = np.flatnonzero(self.slot_index >= 0)
            slots[bad] = live[np.searchsorted(live, slots[bad]) % len(live)]
        probs = self.tree.leaves()[slots] / total
        w = (self.size * probs) ** (-beta)
        w = w / w.max()
        idx = self.slot_index[slots]
        tids = self.slot_traj[slots]
        offsets = np.array([i - self.traj_start[t] for i, t in zip(idx, tids)], dtype=np.int64)
        return SampleMeta(indices=idx, weights=w, traj_ids=tids, offsets=offsets, probs=probs)

    def sample_batch(self, batch_size: int, rng: np.random.Generator, unroll: int = 5, alpha: float | None = None, beta: float | None = None) -> SampleBatch:
        meta = self.sample_indices(batch_size, rng, alpha, beta)
        trajs = [self.trajectories[int(t)] for t in meta.traj_ids]
        return SampleBatch(meta=meta, window=build_window(trajs, meta.offsets, unroll), trajectories=trajs, buffer_counter=self.counter)

    def update_priorities(self, indices, errors) -> int:
        """Replace priorities of live indices. Returns how many were stale."""
        indices = np.asarray(indices, dtype=np.int64)
        errors = np.asarray(errors, dtype=np.float64)
        slots = indices % self.capacity
        live = self.slot_index[slots] == indices
        stale = int((~live).sum())
        self.stale_updates += stale
        if live.any():
            self._set_priorities(slots[live], np.abs(errors[live]) + self.floor)
        return stale

    def probabilities(self) -> dict[int, float]:
        """Sampling probability of every live index (for tests and audits)."""
        live = np.flatnonzero(self.slot_index >= 0)
        p = self.tree.leaves()[live] / self.tree.total
        return dict(zip(self.slot_index[live].tolist(), p.tolist()))

    # -- state and persistence
    def state_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays: dict[str, np.ndarray] = {}
        trajs = []
        for tid, tr in self.trajectories.items():
            start = self.traj_start[tid]
            slots = (start + np.arange(tr.length)) % self.capacity
            arrays[f"replay:{tid}:obs"] = tr.obs
            arrays[f"replay:{tid}:actions"] = tr.actions
            arrays[f"replay:{tid}:rewards"] = tr.rewards
            arrays[f"replay:{tid}:priority"] = self.priority[slots]
            trajs.append({"id": tid, "start": start, "terminal": tr.terminal, "version": tr.version})
        meta = {
            "capacity": self.capacity,
            "alpha": self.alpha,
            "beta": self.beta,
            "floor": self.floor,
            "discount": self.discount,
            "counter": self.counter,
            "next_traj_id": self.next_traj_id,
            "stale_updates": self.stale_updates,
            "evicted_trajectories": self.evicted_trajectories,
            "trajectories": trajs,
        }
        return arrays, meta

    @classmethod
    def from_state(cls, arrays: dict[str, np.ndarray], meta: dict) -> "ReplayBuffer":
        buf = cls(meta["capacity"], meta["alpha"], meta["beta"], meta["floor"], meta["discount"])
        for info in meta["trajectories"]:
            tid = info["id"]
            tr = Trajectory(
                obs=np.array(arrays[f"replay:{tid}:obs"]),
                actions=np.array(arrays[f"replay:{tid}:actions"]),
                rewards=np.array(arrays[f"replay:{tid}:rewards"]),
                terminal=bool(info["terminal"]),
                version=int(info["version"]),
            )
            buf.counter = info["start"]
            buf.next_traj_id = tid
            buf.push_trajectory(tr, priorities=arrays[f"replay:{tid}:priority"])
        buf.counter = meta["counter"]
        buf.next_traj_id = meta["next_traj_id"]
        buf.stale_updates = meta["stale_updates"]
        buf.evicted_trajectories = meta["evicted_trajectories"]
        return buf

    def save(self, directory: str) -> None:
        """Length-prefixed binary records (one per trajectory) plus a JSON manifest."""
        os.makedirs(directory, exist_ok=True)
        arrays, meta = self.state_arrays()
        records = os.path.join(directory, "trajectories.bin")
        with open(records, "wb") as f:
            for info in meta["trajectories"]:
                tid = info["id"]
                for part in ("obs", "actions", "rewards", "priority"):
                    arr = np.ascontiguousarray(arrays[f"replay:{tid}:{part}"])
                    head = json.dumps({"id": tid, "part": part, "dtype": arr.dtype.str, "shape": list(arr.shape)}).encode()
                    f.write(struct.pack("<I", len(head)))
                    f.write(head)
                    f.write(struct.pack("<Q", arr.nbytes))
                    f.write(arr.tobytes())
        with open(os.path.join(directory, "manifest.json"), "w") as f:
            json.dump(meta, f, indent=1)

    @classmethod
    def load(cls, directory: str) -> "ReplayBuffer":
        with open(os.path.join(directory, "manifest.json")) as f:
            meta = json.load(f)
        arrays: dict[str, np.ndarray] = {}
        with open(os.path.join(directory, "trajectories.bin"), "rb") as f:
            while True:
                raw = f.read(4)
                if not raw:
                    break
                (hlen,) = struct.unpack("<I", raw)
                head = json.loads(f.read(hlen))
                (nbytes,) = struct.unpack("<Q", f.read(8))
                arr = np.frombuffer(f.read(nbytes), dtype=np.dtype(head["dtype"])).reshape(head["shape"])
                arrays[f"replay:{head['id']}:{head['part']}"] = arr.copy()
        return cls.from_state(arrays, meta)
