"""Sampling-based Gumbel tree search.

The search runs over a batch of roots at once. Each tree is stored as flat
arrays indexed ``[root, node, slot]``; every simulation expands exactly one
node, so node ``j + 1`` is the node created by simulation ``j`` in every
tree of the batch.

Root actions are chosen by Sequential Halving over K sampled candidates.
Inside the tree, children are scored deterministically with
``pi'(a) - N(a) / (1 + sum_b N(b))``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Protocol

import numpy as np

from .autodiff import log_softmax_np, softmax_np
from .model import ActionSpace, PolicyOutput, Prediction, sample_squashed, squashed_log_prob


class SearchError(RuntimeError):
    """Model produced non-finite outputs during search."""


class SearchModel(Protocol):
    space: ActionSpace

    def initial_inference(self, obs) -> Prediction: ...

    def recurrent_inference(self, state: np.ndarray, actions) -> Prediction: ...


@dataclass
class SearchConfig:
    num_simulations: int = 32
    num_candidates: int = 16
    num_nonroot_candidates: int | None = None
    root_prior_fraction: float = 0.5
    flatten_factor: float = 2.0
    c_visit: float = 50.0
    c_scale: float = 0.1
    discount: float = 0.997
    normalize_q: bool = True

    def __post_init__(self):
        K = self.num_candidates
        if K < 1 or K & (K - 1):
            raise ValueError(f"num_candidates must be a power of 2, got {K}")
        if self.num_nonroot_candidates is None:
            self.num_nonroot_candidates = max(1, K // 2)
        if not (1 <= self.num_nonroot_candidates < K or K == 1 == self.num_nonroot_candidates):
            raise ValueError("num_nonroot_candidates must satisfy 1 <= K_nonroot < K")
        if self.num_simulations < K:
            raise ValueError("num_simulations must be >= num_candidates")
        if not 0.0 <= self.root_prior_fraction <= 1.0:
            raise ValueError("root_prior_fraction must lie in [0, 1]")
        if self.flatten_factor <= 0:
            raise ValueError("flatten_factor must be positive")

    @classmethod
    def discrete(cls, **kw) -> "SearchConfig":
        kw.setdefault("num_simulations", 16)
        kw.setdefault("num_candidates", 8)
        return cls(**kw)


# ---------------------------------------------------------------------------
# primitives


def gumbel_topk(logits, n: int, rng: np.random.Generator | None = None, gumbel=None) -> np.ndarray:
    """Indices of the top ``n`` entries of ``g + logits`` in descending order.

    Works on a single logit vector or row-wise on a 2-D batch. ``gumbel`` may
    be supplied to fix the noise; otherwise it is drawn from ``rng``.
    """
    idx, _ = _gumbel_topk_with_noise(logits, n, rng, gumbel)
    return idx


def _gumbel_topk_with_noise(logits, n, rng, gumbel):
    logits = np.asarray(logits, dtype=np.float64)
    if n > logits.shape[-1]:
        raise ValueError(f"cannot pick {n} distinct actions out of {logits.shape[-1]}")
    if gumbel is None:
        gumbel = rng.gumbel(size=logits.shape)
    gumbel = np.asarray(gumbel, dtype=np.float64)
    score = gumbel + logits
    # stable sort on -score keeps the lowest index first on ties
    idx = np.argsort(-score, axis=-1, kind="stable")[..., :n]
    return idx, np.take_along_axis(gumbel, idx, axis=-1)


class Phase(NamedTuple):
    """One Sequential Halving phase: ``survivors`` candidates each get
    ``visits`` simulations, then the top ``extra`` survivors get one more."""

    survivors: int
    visits: int
    extra: int = 0


def sequential_halving_schedule(K: int, num_simulations: int) -> list[Phase]:
    """Visit allocation whose total is exactly ``num_simulations``.

    Phase p keeps ``ceil(K / 2**p)`` candidates with
    ``max(1, N // (ceil(log2 K) * m))`` visits each. A phase that would
    overrun the budget is cut to what remains, and the final phase takes
    everything left over.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if num_simulations < K:
        raise ValueError("num_simulations must be >= K")
    L = max(1, math.ceil(math.log2(K))) if K > 1 else 1
    remaining = num_simulations
    phases: list[Phase] = []
    for p in range(L):
        m = max(1, math.ceil(K / 2**p))
        v = max(1, num_simulations // (L * m))
        extra = 0
        if p == L - 1 or m * v > remaining:
            v, extra = divmod(remaining, m)
        phases.append(Phase(m, v, extra))
        remaining -= m * v + extra
    assert remaining == 0
    return phases


def sigma_transform(q, max_visit, cfg: SearchConfig):
    """Monotone map ``(c_visit + max_visit) * c_scale * q``."""
    return (cfg.c_visit + np.asarray(max_visit, dtype=np.float64)) * cfg.c_scale * np.asarray(q, dtype=np.float64)


def completed_q(visits, q, prior_probs) -> np.ndarray:
    """Per-candidate Q; unvisited entries get the prior-weighted mean over
    visited candidates (prior renormalized over the visited set)."""
    visits = np.asarray(visits)
    q = np.asarray(q, dtype=np.float64)
    prior = np.asarray(prior_probs, dtype=np.float64)
    visited = visits > 0
    if not np.all(np.any(visited, axis=-1)):
        raise ValueError("completed_q needs at least one visited candidate")
    w = np.where(visited, prior, 0.0)
    fill = np.sum(w * np.where(visited, q, 0.0), axis=-1, keepdims=True) / np.sum(w, axis=-1, keepdims=True)
    return np.where(visited, q, fill)


def target_policy_weights(prior_logits, cq, max_visit, cfg: SearchConfig, discrete: bool) -> np.ndarray:
    """Discrete: softmax(logits + sigma(cq)). Continuous: softmax(sigma(cq))."""
    sig = sigma_transform(cq, np.asarray(max_visit)[..., None] if np.ndim(max_visit) else max_visit, cfg)
    z = sig + np.asarray(prior_logits, dtype=np.float64) if discrete else sig
    return softmax_np(z, axis=-1)


# ---------------------------------------------------------------------------
# root candidates


@dataclass
class CandidateSet:
    """Root candidates for a batch of states.

    ``actions`` is (B, K) ints or (B, K, d) floats. ``prior_logits`` feed the
    improved policy (discrete logits, zeros for sampled continuous actions).
    ``from_prior`` marks members of the flattened-prior subset A_S2.
    """

    actions: np.ndarray
    prior_logits: np.ndarray
    log_prob: np.ndarray
    from_prior: np.ndarray
    gumbel: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.prior_logits.shape[1]


def sample_root_candidates(policy: PolicyOutput, cfg: SearchConfig, rng: np.random.Generator) -> CandidateSet:
    if policy.discrete:
        logits = np.asarray(policy.logits, dtype=np.float64)
        K = min(cfg.num_candidates, logits.shape[-1])
        idx, g = _gumbel_topk_with_noise(logits, K, rng, None)
        lg = np.take_along_axis(logits, idx, axis=-1)
        lp = np.take_along_axis(log_softmax_np(logits), idx, axis=-1)
        return CandidateSet(actions=idx, prior_logits=lg, log_prob=lp, from_prior=np.zeros(idx.shape, bool), gumbel=g)
    K = cfg.num_candidates
    n_prior = int(math.floor(cfg.root_prior_fraction * K))
    n_policy = K - n_prior
    parts, flags = [], []
    if n_policy:
        a, _ = sample_squashed(policy.mean, policy.std, n_policy, rng)
        parts.append(a)
        flags.append(np.zeros(n_policy, bool))
    if n_prior:
        a, _ = sample_squashed(policy.mean, policy.std * cfg.flatten_factor, n_prior, rng)
        parts.append(a)
        flags.append(np.ones(n_prior, bool))
    actions = np.concatenate(parts, axis=1)
    B = actions.shape[0]
    lp = squashed_log_prob(policy.mean, policy.std, actions)
    from_prior = np.broadcast_to(np.concatenate(flags), (B, K)).copy()
    return CandidateSet(actions=actions, prior_logits=np.zeros((B, K)), log_prob=lp, from_prior=from_prior)


# ---------------------------------------------------------------------------
# results


@dataclass
class SearchResult:
    a_star: np.ndarray | int
    a_star_index: int
    target_policy: np.ndarray
    sve_value: float
    completed_q: np.ndarray
    root_visits: np.ndarray
    candidates: np.ndarray
    from_prior: np.ndarray
    root_value: float
    sim_returns: np.ndarray
    sim_depths: np.ndarray

    def to_json(self) -> str:
        def conv(x):
            return x.tolist() if isinstance(x, np.ndarray) else x

        return json.dumps({k: conv(v) for k, v in self.__dict__.items()})


@dataclass
class BatchSearchResult:
    a_star: np.ndarray
    a_star_index: np.ndarray
    target_policy: np.ndarray
    sve_value: np.ndarray
    completed_q: np.ndarray
    root_visits: np.ndarray
    candidates: np.ndarray
    from_prior: np.ndarray
    root_value: np.ndarray
    sim_returns: np.ndarray
    sim_depths: np.ndarray
    log_prob: np.ndarray = field(repr=False, default=None)

    def __len__(self) -> int:
        return len(self.sve_value)

    def __getitem__(self, i: int) -> SearchResult:
        a = self.a_star[i]
        return SearchResult(
            a_star=int(a) if np.ndim(a) == 0 else a,
            a_star_index=int(self.a_star_index[i]),
            target_policy=self.target_policy[i],
            sve_value=float(self.sve_value[i]),
            completed_q=self.completed_q[i],
            root_visits=self.root_visits[i],
            candidates=self.candidates[i],
            from_prior=self.from_prior[i],
            root_value=float(self.root_value[i]),
            sim_returns=self.sim_returns[i],
            sim_depths=self.sim_depths[i],
        )


# ---------------------------------------------------------------------------
# search


def _check_finite(pred: Prediction, where: str) -> None:
    parts = {"state": pred.state, "value": pred.value}
    if pred.reward is not None:
        parts["reward"] = pred.reward
    bad = [k for k, v in parts.items() if not np.all(np.isfinite(v))]
    if not pred.policy.check_finite():
        bad.append("policy")
    if bad:
        raise SearchError(f"non-finite model output at {where}: {', '.join(bad)}")


class _Trees:
    def __init__(self, root: Prediction, cands: CandidateSet, space: ActionSpace, cfg: SearchConfig, rng):
        self.cfg = cfg
        self.rng = rng
        self.space = space
        B = len(root.value)
        K = cands.size
        self.B, self.K = B, K
        if space.discrete:
            self.Kn = space.n if space.n <= cfg.num_nonroot_candidates else cfg.num_nonroot_candidates
        else:
            self.Kn = cfg.num_nonroot_candidates
        W = max(K, self.Kn)
        M = cfg.num_simulations + 1
        self.rows = np.arange(B)
        self.states = np.zeros((B, M) + root.state.shape[1:], dtype=root.state.dtype)
        self.value = np.zeros((B, M))
        self.reward = np.zeros((B, M))
        if space.discrete:
            self.actions = np.zeros((B, M, W), dtype=np.int64)
        else:
            self.actions = np.zeros((B, M, W, space.n))
        self.prior = np.full((B, M, W), -np.inf)
        self.visits = np.zeros((B, M, W), dtype=np.int64)
        self.wsum = np.zeros((B, M, W))
        self.child = np.full((B, M, W), -1, dtype=np.int64)
        self.states[:, 0] = root.state
        self.value[:, 0] = root.value
        self.actions[:, 0, :K] = cands.actions
        self.prior[:, 0, :K] = cands.prior_logits
        self.qmin = np.asarray(root.value, dtype=np.float64).copy()
        self.qmax = self.qmin.copy()

    # -- Q bookkeeping
    def normalize(self, q: np.ndarray) -> np.ndarray:
        if not self.cfg.normalize_q:
            return q
        lo = self.qmin.reshape((-1,) + (1,) * (q.ndim - 1))
        span = np.maximum(self.qmax - self.qmin, 1e-6).reshape(lo.shape)
        return np.clip((q - lo) / span, 0.0, 1.0)

    def node_q(self, rows, node):
        """(visits, completed & normalized q, prior logits) for one node per row."""
        N = self.visits[rows, node]
        pl = self.prior[rows, node]
        visited = N > 0
        q = np.where(visited, self.wsum[rows, node] / np.maximum(N, 1), 0.0)
        probs = softmax_np(pl, axis=-1)
        w = np.where(visited, probs, 0.0)
        wsum = w.sum(-1)
        fill = np.where(wsum > 0, (w * q).sum(-1) / np.where(wsum > 0, wsum, 1.0), self.value[rows, node])
        cq = np.where(visited, q, fill[:, None])
        return N, self.normalize(cq), pl, fill

    def select_nonroot(self, rows, node) -> np.ndarray:
        N, qn, pl, _ = self.node_q(rows, node)
        valid = np.isfinite(pl)
        sig = sigma_transform(qn, N.max(-1, keepdims=True), self.cfg)
        pi = softmax_np(np.where(valid, pl + sig, -np.inf), axis=-1)
        score = pi - N / (1.0 + N.sum(-1, keepdims=True))
        score = np.where(valid, score, -np.inf)
        return np.argmax(score, axis=-1)

    def expand(self, new_id: int, pred: Prediction) -> None:
        self.states[:, new_id] = pred.state
        self.value[:, new_id] = pred.value
        self.reward[:, new_id] = pred.reward
        Kn = self.Kn
        pol = pred.policy
        if self.space.discrete:
            logits = np.asarray(pol.logits, dtype=np.float64)
            if Kn == logits.shape[-1]:
                idx = np.broadcast_to(np.arange(Kn), (self.B, Kn))
            else:
                idx = gumbel_topk(logits, Kn, self.rng)
            self.actions[:, new_id, :Kn] = idx
            self.prior[:, new_id, :Kn] = np.take_along_axis(logits, idx, axis=-1)
        else:
            a, _ = sample_squashed(pol.mean, pol.std, Kn, self.rng)
            self.actions[:, new_id, :Kn] = a
            self.prior[:, new_id, :Kn] = 0.0

    def backup(self, path_nodes, path_edges, path_valid, leaf_value) -> tuple[np.ndarray, np.ndarray]:
        g = np.asarray(leaf_value, dtype=np.float64).copy()
        rows = self.rows
        gamma = self.cfg.discount
        depth = np.zeros(self.B, dtype=np.int64)
        for node, edge, valid in zip(reversed(path_nodes), reversed(path_edges), reversed(path_valid)):
            c = self.child[rows, node, edge]
            g = np.where(valid, self.reward[rows, c] + gamma * g, g)
            self.visits[rows, node, edge] += valid
            self.wsum[rows, node, edge] += np.where(valid, g, 0.0)
            self.qmin = np.where(valid, np.minimum(self.qmin, g), self.qmin)
            self.qmax = np.where(valid, np.maximum(self.qmax, g), self.qmax)
            depth += valid
        return g, depth


def batched_search(
    model: SearchModel,
    cfg: SearchConfig,
    rng: np.random.Generator,
    obs=None,
    root: Prediction | None = None,
) -> BatchSearchResult:
    """Run one search per root. Pass observations or a precomputed root prediction."""
    if root is None:
        root = model.initial_inference(obs)
    _check_finite(root, "root")
    space = model.space
    cands = sample_root_candidates(root.policy, cfg, rng)
    trees = _Trees(root, cands, space, cfg, rng)
    B, K, N = trees.B, trees.K, cfg.num_simulations
    rows = trees.rows
    zeros = np.zeros(B, dtype=np.int64)
    sim_returns = np.zeros((B, N))
    sim_depths = np.zeros((B, N), dtype=np.int64)

    def rank(survivors: np.ndarray) -> np.ndarray:
        visits, qn, pl, _ = trees.node_q(rows, zeros)
        sig = sigma_transform(qn[:, :K], visits.max(-1, keepdims=True), cfg)
        if space.discrete:
            score = cands.gumbel + pl[:, :K] + sig
            tie = np.zeros_like(score)
        else:
            score = sig
            tie = cands.log_prob
        s = np.take_along_axis(score, survivors, axis=1)
        t = np.take_along_axis(tie, survivors, axis=1)
        order = np.lexsort((survivors, -t, -s), axis=-1)
        return np.take_along_axis(survivors, order, axis=1)

    def simulate(j: int, root_edge: np.ndarray) -> None:
        node = zeros.copy()
        edge = root_edge.copy()
        path_nodes, path_edges, path_valid = [node], [edge], [np.ones(B, bool)]
        active = np.ones(B, bool)
        while True:
            nxt = trees.child[rows, node, edge]
            active = active & (nxt >= 0)
            if not active.any():
                break
            node = np.where(active, nxt, node)
            edge = np.where(active, trees.select_nonroot(rows, node), edge)
            path_nodes.append(node)
            path_edges.append(edge)
            path_valid.append(active)
        pred = model.recurrent_inference(trees.states[rows, node], trees.actions[rows, node, edge])
        _check_finite(pred, f"simulation {j}")
        new_id = j + 1
        trees.child[rows, node, edge] = new_id
        trees.expand(new_id, pred)
        g, depth = trees.backup(path_nodes, path_edges, path_valid, pred.value)
        sim_returns[:, j] = g
        sim_depths[:, j] = depth

    survivors = np.broadcast_to(np.arange(K), (B, K)).copy()
    j = 0
    for phase in sequential_halving_schedule(K, N):
        survivors = rank(survivors)[:, : phase.survivors]
        for _ in range(phase.visits):
            for slot in range(phase.survivors):
                simulate(j, survivors[:, slot])
                j += 1
        for slot in range(phase.extra):
            simulate(j, survivors[:, slot])
            j += 1
    best = rank(survivors)[:, 0]

    visits, qn, pl, fill = trees.node_q(rows, zeros)
    root_visits = visits[:, :K]
    cq = qn[:, :K]
    max_visit = root_visits.max(-1)
    if space.discrete:
        logits = np.asarray(root.policy.logits, dtype=np.float64)
        full_q = np.broadcast_to(trees.normalize(fill[:, None]), logits.shape).copy()
        np.put_along_axis(full_q, cands.actions, cq, axis=1)
        pi = target_policy_weights(logits, full_q, max_visit, cfg, discrete=True)
        a_star = np.take_along_axis(cands.actions, best[:, None], axis=1)[:, 0]
    else:
        pi = target_policy_weights(None, cq, max_visit, cfg, discrete=False)
        a_star = cands.actions[rows, best]
    sve = (np.asarray(root.value, dtype=np.float64) + sim_returns.sum(axis=1)) / (N + 1)
    raw_q = np.where(root_visits > 0, trees.wsum[:, 0, :K] / np.maximum(root_visits, 1), fill[:, None])
    return BatchSearchResult(
        a_star=a_star,
        a_star_index=best,
        target_policy=pi,
        sve_value=sve,
        completed_q=raw_q,
        root_visits=root_visits,
        candidates=cands.actions,
        from_prior=cands.from_prior,
        root_value=np.asarray(root.value, dtype=np.float64),
        sim_returns=sim_returns,
        sim_depths=sim_depths,
        log_prob=cands.log_prob,
    )


def run_search(model: SearchModel, cfg: SearchConfig, rng: np.random.Generator, obs=None, root: Prediction | None = None) -> SearchResult:
    """Single-root convenience wrapper over :func:`batched_search`."""
    if obs is not None:
        obs = np.asarray(obs)[None] if np.ndim(obs) == 1 else obs
    return batched_search(model, cfg, rng, obs=obs, root=root)[0]
