"""Toy environments with exact oracles, plus model stubs for search tests.

Oracles are computed by code paths independent of the agent: value
iteration and exhaustive policy enumeration for the chain, convex
trajectory optimization for the point mass, and closed-form values for
the linear model stub.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .model import ActionSpace, PolicyOutput, Prediction


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    action_space: ActionSpace
    max_episode_steps: int
    action_repeat: int = 1


class Env:
    spec: EnvSpec
    name: str = "env"

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        raise NotImplementedError

    def step(self, action) -> tuple[np.ndarray, float, bool, dict]:
        raise NotImplementedError

    def get_state(self) -> dict:
        raise NotImplementedError

    def set_state(self, state: dict) -> None:
        raise NotImplementedError

    def episode_return(self, rewards) -> float:
        """Score used for evaluation; undiscounted unless the env says otherwise."""
        return float(np.sum(rewards))


# ---------------------------------------------------------------------------
# chain MDP


class ChainMDP(Env):
    """States 0..n-1; action 1 moves right, 0 moves left (floored at 0).

    Any action taken in the goal state n-1 pays reward 1 and ends the
    episode, so the optimal value from the start is gamma**(n-1).
    Observations are one-hot. With ``corridor=True`` both actions move
    right, so every policy has the same value.
    """

    name = "chain"

    def __init__(self, n_states: int = 10, gamma: float = 0.997, max_episode_steps: int = 100, corridor: bool = False):
        if n_states < 2:
            raise ValueError("chain needs n_states >= 2")
        self.n = n_states
        self.gamma = gamma
        self.corridor = corridor
        self.spec = EnvSpec(n_states, ActionSpace("discrete", 2), max_episode_steps)
        self.state = 0
        self.t = 0

    def transition(self, state: int, action: int) -> tuple[int, float, bool]:
        if action not in (0, 1):
            raise ValueError(f"chain action must be 0 or 1, got {action}")
        if state == self.n - 1:
            return state, 1.0, True
        nxt = state + 1 if action == 1 or self.corridor else max(state - 1, 0)
        return nxt, 0.0, False

    def observe(self, state: int) -> np.ndarray:
        obs = np.zeros(self.n, dtype=np.float32)
        obs[state] = 1.0
        return obs

    def reset(self, rng=None) -> np.ndarray:
        self.state, self.t = 0, 0
        return self.observe(0)

    def get_state(self) -> dict:
        return {"state": int(self.state), "t": int(self.t)}

    def set_state(self, state: dict) -> None:
        self.state, self.t = int(state["state"]), int(state["t"])

    def episode_return(self, rewards) -> float:
        """Discounted return, comparable with the optimal start value."""
        rewards = np.asarray(rewards, dtype=np.float64)
        return float(np.sum(self.gamma ** np.arange(len(rewards)) * rewards))

    def step(self, action):
        self.state, r, done = self.transition(self.state, int(np.asarray(action).reshape(())))
        self.t += 1
        truncated = not done and self.t >= self.spec.max_episode_steps
        return self.observe(self.state), r, done, {"truncated": truncated}

    # -- oracles
    def value_iteration(self, tol: float = 1e-10) -> np.ndarray:
        V = np.zeros(self.n)
        while True:
            new = np.empty_like(V)
            for s in range(self.n):
                best = -np.inf
                for a in (0, 1):
                    nxt, r, done = self.transition(s, a)
                    best = max(best, r + (0.0 if done else self.gamma * V[nxt]))
                new[s] = best
            if np.max(np.abs(new - V)) < tol:
                return new
            V = new

    def policy_value(self, policy: tuple[int, ...]) -> np.ndarray:
        """Exact value of a deterministic policy by solving the linear system."""
        P = np.zeros((self.n, self.n))
        R = np.zeros(self.n)
        for s in range(self.n):
            nxt, r, done = self.transition(s, policy[s])
            R[s] = r
            if not done:
                P[s, nxt] = self.gamma
        return np.linalg.solve(np.eye(self.n) - P, R)

    def brute_force_values(self) -> np.ndarray:
        best = np.full(self.n, -np.inf)
        for pol in itertools.product((0, 1), repeat=self.n):
            best = np.maximum(best, self.policy_value(pol))
        return best

    def random_policy_value(self) -> float:
        """Expected discounted return from the start under uniform random actions."""
        P = np.zeros((self.n, self.n))
        R = np.zeros(self.n)
        for s in range(self.n):
            for a in (0, 1):
                nxt, r, done = self.transition(s, a)
                R[s] += 0.5 * r
                if not done:
                    P[s, nxt] += 0.5 * self.gamma
        return float(np.linalg.solve(np.eye(self.n) - P, R)[0])


def chain_mdp(n_states: int = 10, gamma: float = 0.997, max_episode_steps: int = 100) -> tuple[ChainMDP, np.ndarray]:
    env = ChainMDP(n_states, gamma, max_episode_steps)
    return env, env.value_iteration()


# ---------------------------------------------------------------------------
# point mass


class PointMass1D(Env):
    """Double integrator: x' = x + dt v, v' = v + dt a, reward -x'^2, 200 steps.

    Training episodes start uniformly in x in [-1, 1], v in [-0.5, 0.5];
    evaluation starts at (1, 0).
    """

    name = "point_mass"
    dt = 0.1

    def __init__(self, horizon: int = 200, eval_start: tuple[float, float] = (1.0, 0.0)):
        self.spec = EnvSpec(2, ActionSpace("continuous", 1), horizon)
        self.eval_start = eval_start
        self.x = 0.0
        self.v = 0.0
        self.t = 0

    def transition(self, x: float, v: float, a: float) -> tuple[float, float, float]:
        if not -1.0 - 1e-6 <= a <= 1.0 + 1e-6:
            raise ValueError(f"point-mass action {a} outside [-1, 1]")
        a = min(max(a, -1.0), 1.0)
        x2 = x + self.dt * v
        v2 = v + self.dt * a
        return x2, v2, -(x2 * x2)

    def observe(self) -> np.ndarray:
        return np.array([self.x, self.v], dtype=np.float32)

    def reset(self, rng=None) -> np.ndarray:
        if rng is None:
            self.x, self.v = self.eval_start
        else:
            self.x = float(rng.uniform(-1.0, 1.0))
            self.v = float(rng.uniform(-0.5, 0.5))
        self.t = 0
        return self.observe()

    def get_state(self) -> dict:
        return {"x": float(self.x), "v": float(self.v), "t": int(self.t)}

    def set_state(self, state: dict) -> None:
        self.x, self.v, self.t = float(state["x"]), float(state["v"]), int(state["t"])

    def reset_to(self, x: float, v: float) -> np.ndarray:
        self.x, self.v, self.t = float(x), float(v), 0
        return self.observe()

    def step(self, action):
        a = float(np.asarray(action, dtype=np.float64).reshape(-1)[0])
        self.x, self.v, r = self.transition(self.x, self.v, a)
        self.t += 1
        done = False
        truncated = self.t >= self.spec.max_episode_steps
        return self.observe(), r, done, {"truncated": truncated}

    def rollout_return(self, actions, x0: float = 1.0, v0: float = 0.0) -> float:
        x, v, total = x0, v0, 0.0
        for a in actions:
            x, v, r = self.transition(x, v, float(a))
            total += r
        return total


def _point_mass_affine(x0: float, v0: float, horizon: int, dt: float):
    """Positions x_1..x_H as c + G a (exact for the double integrator)."""
    t = np.arange(1, horizon + 1)
    c = x0 + dt * v0 * t
    G = np.zeros((horizon, horizon))
    for i in range(horizon):  # row i -> x_{i+1}
        k = np.arange(i)  # actions a_0..a_{i-1}; a_k moves x_{i+1} by dt^2 (i-k)
        G[i, k] = dt * dt * (i - k)
    return c, G


def _fista(a, c, G, lip, iters):
    """Projected accelerated gradient on ||c + G a||^2 over the box [-1, 1]."""
    y, tk = a.copy(), 1.0
    for _ in range(iters):
        grad = 2.0 * (c + y @ G.T) @ G
        a_new = np.clip(y - grad / lip, -1.0, 1.0)
        tk_new = 0.5 * (1 + math.sqrt(1 + 4 * tk * tk))
        y = a_new + ((tk - 1) / tk_new) * (a_new - a)
        a, tk = a_new, tk_new
    return a


def shooting_oracle(
    x0: float = 1.0,
    v0: float = 0.0,
    horizon: int = 200,
    restarts: int = 10_000,
    iters: int = 400,
    polish_iters: int = 100_000,
    seed: int = 0,
) -> tuple[float, np.ndarray]:
    """Best undiscounted return from (x0, v0) by multi-start projected
    gradient (FISTA) on the open-loop action sequence. Every start runs
    ``iters`` steps; the best one is then polished for ``polish_iters`` more,
    since the problem is badly conditioned and short runs stop well short of
    the optimum. Returns (return, actions)."""
    c, G = _point_mass_affine(x0, v0, horizon, PointMass1D.dt)
    lip = 2.0 * np.linalg.norm(G, 2) ** 2
    rng = np.random.default_rng(seed)
    best_ret, best_a = -np.inf, None
    chunk = 2000
    for start in range(0, restarts, chunk):
        n = min(chunk, restarts - start)
        a = _fista(rng.uniform(-1, 1, size=(n, horizon)), c, G, lip, iters)
        rets = -np.sum((c + a @ G.T) ** 2, axis=1)
        i = int(np.argmax(rets))
        if rets[i] > best_ret:
            best_ret, best_a = float(rets[i]), a[i].copy()
    if polish_iters:
        best_a = _fista(best_a, c, G, lip, polish_iters)
        best_ret = float(-np.sum((c + G @ best_a) ** 2))
    return best_ret, best_a


@lru_cache(maxsize=4)
def point_mass_oracle_return(x0: float = 1.0, v0: float = 0.0, horizon: int = 200) -> float:
    ret, actions = shooting_oracle(x0, v0, horizon)
    # re-simulate through the env so the oracle matches its reward convention
    return PointMass1D(horizon).rollout_return(actions, x0, v0)


def point_mass_1d(horizon: int = 200) -> tuple[PointMass1D, float]:
    env = PointMass1D(horizon)
    return env, point_mass_oracle_return(*env.eval_start, horizon)


# ---------------------------------------------------------------------------
# model stubs


@dataclass(frozen=True)
class NoiseModel:
    eps_s: float = 0.0
    eps_r: float = 0.0
    eps_v: float = 0.0

    def __post_init__(self):
        if min(self.eps_s, self.eps_r, self.eps_v) < 0:
            raise ValueError("noise magnitudes must be >= 0")


class LinearModelStub:
    """Known linear MDP behind the search model interface.

    True dynamics s' = rho s (actions have no effect), reward R(s) = c s[0],
    so V(s) = c s[0] / (1 - gamma rho) for every policy. Calls return the
    truth plus i.i.d. Gaussian noise: each predicted state is the true
    successor plus noise with E||noise||^2 = eps_s^2 (errors do not
    compound), rewards get eps_r noise, values eps_v noise.

    The latent carries ``[true state, predicted state]`` so the stub can keep
    the truth alongside its noisy estimate.
    """

    def __init__(self, noise: NoiseModel, dim: int = 4, rho: float = 0.9, coef: float = 1.0, gamma: float = 0.997, seed: int = 0):
        self.noise = noise
        self.dim = dim
        self.rho = rho
        self.coef = coef
        self.gamma = gamma
        self.space = ActionSpace("continuous", 1)
        self.rng = np.random.default_rng(seed)
        self.reward_calls = 0

    @property
    def lipschitz_reward(self) -> float:
        return abs(self.coef)

    @property
    def lipschitz_value(self) -> float:
        return abs(self.coef) / (1.0 - self.gamma * self.rho)

    def reward_fn(self, s: np.ndarray) -> np.ndarray:
        return self.coef * s[..., 0]

    def true_value(self, s: np.ndarray) -> np.ndarray:
        return self.coef * np.asarray(s)[..., 0] / (1.0 - self.gamma * self.rho)

    def _policy(self, B: int) -> PolicyOutput:
        return PolicyOutput(mean=np.zeros((B, 1)), std=np.ones((B, 1)))

    def _value(self, s: np.ndarray) -> np.ndarray:
        v = self.true_value(s)
        if self.noise.eps_v:
            v = v + self.rng.normal(0.0, self.noise.eps_v, size=v.shape)
        return v

    def initial_inference(self, obs) -> Prediction:
        s = np.asarray(obs, dtype=np.float64).reshape(-1, self.dim)
        return Prediction(state=np.concatenate([s, s], axis=1), value=self._value(s), policy=self._policy(len(s)))

    def recurrent_inference(self, state, actions) -> Prediction:
        state = np.asarray(state, dtype=np.float64)
        true, pred = state[:, : self.dim], state[:, self.dim :]
        self.reward_calls += len(state)
        r = self.reward_fn(pred)
        if self.noise.eps_r:
            r = r + self.rng.normal(0.0, self.noise.eps_r, size=r.shape)
        true_next = self.rho * true
        pred_next = true_next
        if self.noise.eps_s:
            pred_next = true_next + self.rng.normal(0.0, self.noise.eps_s / math.sqrt(self.dim), size=true_next.shape)
        return Prediction(
            state=np.concatenate([true_next, pred_next], axis=1),
            value=self._value(pred_next),
            policy=self._policy(len(state)),
            reward=r,
        )


class ChainModelStub:
    """Exact model of a :class:`ChainMDP` behind the search interface.

    Latents are one-hot over the n chain states plus one absorbing state
    entered after the goal pays out; ``values`` supplies V for chain states.
    """

    def __init__(self, env: ChainMDP, values: np.ndarray):
        self.env = env
        self.values = np.asarray(values, dtype=np.float64)
        self.space = env.spec.action_space

    def _onehot(self, idx: np.ndarray) -> np.ndarray:
        out = np.zeros((len(idx), self.env.n + 1))
        out[np.arange(len(idx)), idx] = 1.0
        return out

    def initial_inference(self, obs) -> Prediction:
        idx = np.argmax(np.asarray(obs).reshape(-1, self.env.n), axis=1)
        B = len(idx)
        return Prediction(state=self._onehot(idx), value=self.values[idx], policy=PolicyOutput(logits=np.zeros((B, 2))))

    def recurrent_inference(self, state, actions) -> Prediction:
        idx = np.argmax(np.asarray(state), axis=1)
        absorbing = self.env.n
        nxt = np.empty_like(idx)
        rew = np.zeros(len(idx))
        for i, (s, a) in enumerate(zip(idx, np.asarray(actions))):
            if s == absorbing:
                nxt[i] = absorbing
                continue
            s2, r, done = self.env.transition(int(s), int(a))
            nxt[i] = absorbing if done else s2
            rew[i] = r
        value = np.where(nxt == absorbing, 0.0, self.values[np.minimum(nxt, self.env.n - 1)])
        return Prediction(state=self._onehot(nxt), value=value, policy=PolicyOutput(logits=np.zeros((len(idx), 2))), reward=rew)


def known_model_env(noise: NoiseModel, **kw) -> LinearModelStub:
    return LinearModelStub(noise, **kw)


class BanditStub:
    """Exact-Q model of a one-step bandit.

    The first action from the root pays q(a) and moves to an absorbing state
    whose rewards and values are all zero, so every backed-up return through
    candidate a equals q(a) exactly.

    ``q_fn`` maps actions (B, K) ints or (B, K, d) floats, along with the
    root index, to q values; ``policy`` is the root PolicyOutput.
    """

    def __init__(self, space: ActionSpace, policy: PolicyOutput, q_fn: Callable[[np.ndarray], np.ndarray]):
        self.space = space
        self.root_policy = policy
        self.q_fn = q_fn

    def initial_inference(self, obs) -> Prediction:
        B = len(self.root_policy)
        state = np.concatenate([np.zeros((B, 1)), np.arange(B, dtype=np.float64)[:, None]], axis=1)
        return Prediction(state=state, value=np.zeros(B), policy=self.root_policy)

    def recurrent_inference(self, state, actions) -> Prediction:
        state = np.asarray(state, dtype=np.float64)
        at_root = state[:, 0] == 0
        rows = state[:, 1].astype(np.int64)
        q = self.q_fn(np.asarray(actions), rows)
        reward = np.where(at_root, q, 0.0)
        nxt = state.copy()
        nxt[:, 0] = 1.0
        B = len(state)
        if self.space.discrete:
            pol = PolicyOutput(logits=np.zeros((B, self.space.n)))
        else:
            pol = PolicyOutput(mean=np.zeros((B, self.space.n)), std=np.ones((B, self.space.n)))
        return Prediction(state=nxt, value=np.zeros(B), policy=pol, reward=reward)


class ActionRepeat(Env):
    """Hold each agent action for ``k`` frames and sum the frame rewards.

    ``info["frames"]`` reports how many frames were actually stepped, so
    budgets can keep counting raw environment steps.
    """

    def __init__(self, env: Env, k: int):
        if k < 1:
            raise ValueError(f"action_repeat must be >= 1, got {k}")
        self.env = env
        self.k = k
        self.name = env.name
        s = env.spec
        self.spec = EnvSpec(s.obs_dim, s.action_space, math.ceil(s.max_episode_steps / k), k)

    def reset(self, rng=None) -> np.ndarray:
        return self.env.reset(rng)

    def step(self, action):
        total, frames = 0.0, 0
        for _ in range(self.k):
            obs, r, done, info = self.env.step(action)
            total += r
            frames += 1
            if done or info.get("truncated"):
                break
        return obs, total, done, {**info, "frames": frames}

    def get_state(self) -> dict:
        return self.env.get_state()

    def set_state(self, state: dict) -> None:
        self.env.set_state(state)

    def episode_return(self, rewards) -> float:
        return self.env.episode_return(rewards)

    def __getattr__(self, name):
        if name == "env":  # not yet set during construction
            raise AttributeError(name)
        return getattr(self.env, name)


def make_env(name: str, action_repeat: int = 1, **kw) -> Env:
    if name == "chain":
        env: Env = ChainMDP(**kw)
    elif name == "point_mass":
        env = PointMass1D(**kw)
    else:
        raise ValueError(f"unknown env {name!r}")
    return ActionRepeat(env, action_repeat) if action_repeat != 1 else env
