"""Analytic toy environments with deterministic, vectorized dynamics

States and actions may carry any number of leading batch dimensions.
Every environment accepts actions in [-1, 1]^|A| and terminates only at
its horizon.
"""
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Protocol, Tuple, Type, Union

import numpy as np

from amopt.core.errors import ActionBoundsError, ConfigError, ShapeError
from amopt.core.rng import substream

Seed = Union[int, np.random.Generator]


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    horizon: int

    def as_dict(self) -> Dict[str, Union[str, int]]:
        return {"name": self.name, "state_dim": self.state_dim, "action_dim": self.action_dim, "horizon": self.horizon}


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    reward: float
    done: bool


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


def _rng(seed: Seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else substream(int(seed), "env")


class Env:
    """Base class: subclasses define ``spec``, ``initial_state`` and ``dynamics``"""

    spec: EnvSpec

    def reset(self, seed: Seed) -> np.ndarray:
        return self.initial_state(_rng(seed))

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def dynamics(self, state: np.ndarray, action: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(next_state, reward) for batched inputs; no bounds checking"""
        raise NotImplementedError

    def check_action(self, action) -> np.ndarray:
        action = np.asarray(action, dtype=np.float64)
        if action.shape[-1] != self.spec.action_dim:
            raise ShapeError("step", f"action width {action.shape[-1]} != {self.spec.action_dim}")
        if not np.all(np.isfinite(action)) or np.any(np.abs(action) > 1.0):
            raise ActionBoundsError(f"{self.spec.name}: action {action.tolist()} outside [-1, 1]")
        return action

    def step(self, state: np.ndarray, action, t: int = 0) -> StepResult:
        action = self.check_action(action)
        next_state, reward = self.dynamics(np.asarray(state, dtype=np.float64), action)
        return StepResult(next_state=next_state, reward=float(reward), done=t + 1 >= self.spec.horizon)

    def reward(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        return self.dynamics(np.asarray(state, dtype=np.float64), np.asarray(action, dtype=np.float64))[1]


class MultiModalBandit(Env):
    """One-step task with two equally good action modes at +c and -c"""

    CENTER = np.array([0.6, 0.6])
    WIDTH = 0.08

    spec = EnvSpec("multimodal_bandit", state_dim=1, action_dim=2, horizon=1)

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(1)

    def dynamics(self, state, action):
        near = np.exp(-np.sum((action - self.CENTER) ** 2, axis=-1) / self.WIDTH)
        far = np.exp(-np.sum((action + self.CENTER) ** 2, axis=-1) / self.WIDTH)
        return np.zeros_like(state), near + far


class PointMassTwoGoals(Env):
    """Planar point mass with velocity control toward either of two goals"""

    DT = 0.1
    GOALS = np.array([[1.0, 0.0], [-1.0, 0.0]])
    GOAL_WIDTH = 0.5
    ACTION_COST = 0.01
    LIMIT = 2.0
    START_SPREAD = 0.2

    spec = EnvSpec("point_mass_two_goals", state_dim=4, action_dim=2, horizon=50)

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        pos = rng.uniform(-self.START_SPREAD, self.START_SPREAD, size=2)
        return np.concatenate([pos, np.zeros(2)])

    def dynamics(self, state, action):
        pos, vel = state[..., :2], state[..., 2:]
        dist2 = np.sum((pos[..., None, :] - self.GOALS) ** 2, axis=-1)
        reward = np.max(np.exp(-dist2 / self.GOAL_WIDTH), axis=-1) - self.ACTION_COST * np.sum(action**2, axis=-1)
        vel = np.clip(vel + self.DT * action, -self.LIMIT, self.LIMIT)
        pos = np.clip(pos + self.DT * vel, -self.LIMIT, self.LIMIT)
        return np.concatenate([pos, vel], axis=-1), reward


def angle_normalize(theta: np.ndarray) -> np.ndarray:
    return ((theta + math.pi) % (2.0 * math.pi)) - math.pi


class PendulumSwingUp(Env):
    """Torque-limited pendulum observed as (cos theta, sin theta, omega)"""

    G = 10.0
    MASS = 1.0
    LENGTH = 1.0
    DT = 0.05
    MAX_SPEED = 8.0
    TORQUE_SCALE = 2.0
    REWARD_SCALE = 0.1

    spec = EnvSpec("pendulum_swingup", state_dim=3, action_dim=1, horizon=200)

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        theta = rng.uniform(-math.pi, math.pi)
        omega = rng.uniform(-1.0, 1.0)
        return np.array([math.cos(theta), math.sin(theta), omega])

    def dynamics(self, state, action):
        theta = np.arctan2(state[..., 1], state[..., 0])
        omega = state[..., 2]
        torque = self.TORQUE_SCALE * action[..., 0]
        cost = angle_normalize(theta) ** 2 + 0.1 * omega**2 + 0.001 * torque**2

        omega = omega + (3.0 * self.G / (2.0 * self.LENGTH) * np.sin(theta) + 3.0 / (self.MASS * self.LENGTH**2) * torque) * self.DT
        omega = np.clip(omega, -self.MAX_SPEED, self.MAX_SPEED)
        theta = theta + omega * self.DT
        next_state = np.stack([np.cos(theta), np.sin(theta), omega], axis=-1)
        return next_state, -self.REWARD_SCALE * cost


ENVS: Dict[str, Type[Env]] = {
    MultiModalBandit.spec.name: MultiModalBandit,
    PointMassTwoGoals.spec.name: PointMassTwoGoals,
    PendulumSwingUp.spec.name: PendulumSwingUp,
}


def make_env(name: str) -> Env:
    if name not in ENVS:
        raise ConfigError(f"env.name: unknown environment '{name}' (expected one of {sorted(ENVS)})")
    return ENVS[name]()


def rollout_uniform(env: Env, seed: Seed, n_steps: int) -> List[Transition]:
    """Transitions under i.i.d. uniform actions, re-resetting at every episode end"""
    rng = _rng(seed)
    transitions: List[Transition] = []
    state, t = env.reset(rng), 0
    for _ in range(n_steps):
        action = rng.uniform(-1.0, 1.0, size=env.spec.action_dim)
        result = env.step(state, action, t)
        transitions.append(Transition(state, action, result.reward, result.next_state, result.done))
        if result.done:
            state, t = env.reset(rng), 0
        else:
            state, t = result.next_state, t + 1
    return transitions


class StochasticPolicy(Protocol):
    """Samples actions for a batch of states with their log-ratio to the uniform prior"""

    def sample(self, states: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        ...


class UniformPolicy:
    """Uniform actions; the log-ratio to the uniform prior is 0"""

    def __init__(self, action_dim: int):
        self.action_dim = action_dim

    def sample(self, states, rng):
        n = states.shape[0]
        return rng.uniform(-1.0, 1.0, size=(n, self.action_dim)), np.zeros(n)


class FixedActionPolicy:
    def __init__(self, action: np.ndarray, log_ratio: float = 0.0):
        self.action = np.asarray(action, dtype=np.float64)
        self.log_ratio = log_ratio

    def sample(self, states, rng):
        n = states.shape[0]
        return np.broadcast_to(self.action, (n, self.action.size)).copy(), np.full(n, self.log_ratio)


def mc_return(
    env: Env,
    policy: Union[StochasticPolicy, Callable],
    state: np.ndarray,
    action: np.ndarray,
    gamma: float,
    alpha: float,
    n_samples: int,
    rng: np.random.Generator,
    t: int = 0,
) -> Tuple[float, float]:
    """(mean, standard error) of the soft return after taking ``action`` in ``state``

    Every sample executes ``action`` first, then follows ``policy`` until the
    horizon; later rewards are reduced by alpha times the policy's log-ratio.
    """
    action = env.check_action(action)
    states = np.repeat(np.asarray(state, dtype=np.float64)[None, :], n_samples, axis=0)
    actions = np.repeat(action[None, :], n_samples, axis=0)
    states, rewards = env.dynamics(states, actions)
    totals = np.array(rewards, dtype=np.float64)
    discount = 1.0
    for _ in range(t + 1, env.spec.horizon):
        discount *= gamma
        if discount == 0.0:
            break
        actions, log_ratio = policy.sample(states, rng)
        states, rewards = env.dynamics(states, env.check_action(actions))
        totals = totals + discount * (rewards - alpha * log_ratio)
    stderr = float(totals.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    return float(totals.mean()), stderr
