"""Toy environments, uniform rollouts and Monte-Carlo returns"""
import math

import numpy as np
import pytest

from amopt.core.errors import ActionBoundsError, ConfigError, ShapeError
from amopt.services.envs import (
    ENVS,
    FixedActionPolicy,
    MultiModalBandit,
    PendulumSwingUp,
    PointMassTwoGoals,
    UniformPolicy,
    angle_normalize,
    make_env,
    mc_return,
    rollout_uniform,
)
from amopt.services.replay import ReplayBuffer


def test_bandit_has_two_equal_modes():
    env = MultiModalBandit()
    state = env.reset(0)
    plus = env.step(state, [0.6, 0.6]).reward
    minus = env.step(state, [-0.6, -0.6]).reward
    assert plus == pytest.approx(minus)
    assert plus > env.step(state, [0.0, 0.0]).reward
    assert env.step(state, [0.6, 0.6]).done


def test_bandit_grid_has_exactly_two_opposite_maxima():
    env = MultiModalBandit()
    axis = np.linspace(-1.0, 1.0, 200)
    grid = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1)
    rewards = env.reward(np.zeros((200, 200, 1)), grid)
    best = np.argwhere(rewards >= rewards.max() - 1e-9)
    assert len(best) == 2
    np.testing.assert_allclose(axis[best[0]], -axis[best[1]], atol=1e-12)


def test_rewards_are_bounded_on_every_env(rng):
    theta = rng.uniform(-math.pi, math.pi, size=5000)
    states = {
        "multimodal_bandit": np.zeros((5000, 1)),
        "point_mass_two_goals": rng.uniform(-2.0, 2.0, size=(5000, 4)),
        "pendulum_swingup": np.stack([np.cos(theta), np.sin(theta), rng.uniform(-8.0, 8.0, size=5000)], axis=-1),
    }
    for name, s in states.items():
        env = make_env(name)
        actions = rng.choice([-1.0, 1.0], size=(5000, env.spec.action_dim)) * rng.uniform(0.0, 1.0, size=(5000, 1)) ** 0.25
        assert np.all(np.abs(env.reward(s, actions)) <= 2.5), name


def test_reset_is_deterministic_per_seed():
    env = PointMassTwoGoals()
    np.testing.assert_array_equal(env.reset(3), env.reset(3))
    assert not np.array_equal(env.reset(3), env.reset(4))


def test_episodes_end_at_the_horizon():
    env = PointMassTwoGoals()
    state = env.reset(0)
    for t in range(env.spec.horizon):
        result = env.step(state, [0.1, -0.1], t)
        state = result.next_state
        assert result.done == (t == env.spec.horizon - 1)


def test_point_mass_rewards_goal_proximity():
    env = PointMassTwoGoals()
    at_goal = env.reward(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(2))
    far = env.reward(np.array([0.0, 1.5, 0.0, 0.0]), np.zeros(2))
    assert at_goal == pytest.approx(1.0)
    assert far < at_goal


def test_pendulum_upright_is_best():
    env = PendulumSwingUp()
    upright = env.reward(np.array([1.0, 0.0, 0.0]), np.zeros(1))
    hanging = env.reward(np.array([-1.0, 0.0, 0.0]), np.zeros(1))
    assert upright == pytest.approx(0.0)
    assert hanging == pytest.approx(-0.1 * math.pi**2)
    next_state, _ = env.dynamics(np.array([1.0, 0.0, 0.0]), np.zeros(1))
    np.testing.assert_allclose(next_state, [1.0, 0.0, 0.0])


def test_angle_normalize_range():
    theta = np.linspace(-10, 10, 101)
    wrapped = angle_normalize(theta)
    assert np.all(wrapped >= -math.pi) and np.all(wrapped < math.pi)
    np.testing.assert_allclose(np.cos(wrapped), np.cos(theta), atol=1e-12)


def test_batched_dynamics_match_single_steps(rng):
    env = PointMassTwoGoals()
    states = rng.normal(size=(5, 4))
    actions = rng.uniform(-1, 1, size=(5, 2))
    batch_next, batch_reward = env.dynamics(states, actions)
    for k in range(5):
        result = env.step(states[k], actions[k])
        np.testing.assert_allclose(result.next_state, batch_next[k])
        assert result.reward == pytest.approx(batch_reward[k])


def test_actions_are_validated():
    env = MultiModalBandit()
    with pytest.raises(ActionBoundsError):
        env.step(env.reset(0), [1.5, 0.0])
    with pytest.raises(ActionBoundsError):
        env.step(env.reset(0), [np.nan, 0.0])
    with pytest.raises(ShapeError):
        env.step(env.reset(0), [0.0])


def test_registry():
    assert set(ENVS) == {"multimodal_bandit", "point_mass_two_goals", "pendulum_swingup"}
    with pytest.raises(ConfigError):
        make_env("cartpole")


def test_uniform_rollout_fills_replay():
    env = PointMassTwoGoals()
    transitions = rollout_uniform(env, seed=1, n_steps=120)
    assert sum(t.done for t in transitions) == 2
    replay = ReplayBuffer(4, 2, capacity=100)
    replay.extend(transitions)
    assert len(replay) == 100
    # oldest entries were overwritten
    np.testing.assert_array_equal(replay.s[0], transitions[100].s)


def test_replay_sampling(rng):
    replay = ReplayBuffer(1, 2, capacity=10)
    with pytest.raises(ValueError):
        replay.sample(4, rng)
    replay.extend(rollout_uniform(MultiModalBandit(), seed=0, n_steps=3))
    batch = replay.sample(16, rng)
    assert len(batch) == 16
    assert batch.s.shape == (16, 1) and batch.a.shape == (16, 2)
    assert np.all(batch.done == 1.0)


def test_mc_return_on_one_step_task_is_the_reward(rng):
    env = MultiModalBandit()
    mean, stderr = mc_return(env, UniformPolicy(2), np.zeros(1), np.array([0.6, 0.6]), 0.99, 1.0, 10, rng)
    assert mean == pytest.approx(env.reward(np.zeros(1), np.array([0.6, 0.6])))
    assert stderr == 0.0


def test_mc_return_discounts_and_charges_log_ratio(rng):
    env = PointMassTwoGoals()
    state = np.array([1.0, 0.0, 0.0, 0.0])
    zero = np.zeros(2)
    mean, _ = mc_return(env, FixedActionPolicy(zero, log_ratio=0.5), state, zero, 0.5, 1.0, 3, rng, t=env.spec.horizon - 3)
    # three steps at rest on the goal: 1 + 0.5 (1 - 0.5) + 0.25 (1 - 0.5)
    assert mean == pytest.approx(1.0 + 0.5 * 0.5 + 0.25 * 0.5)
