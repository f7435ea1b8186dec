"""Shared fixtures and the slow marker"""
import numpy as np
import pytest

from amopt.core.run_config import parse_run_config


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow reproduction tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training reproductions (enable with --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_config():
    """A bandit run small enough to train in a few seconds"""

    def build(**overrides):
        flat = {
            "env.name": "multimodal_bandit",
            "networks.hidden_units": "16",
            "networks.q_hidden_units": "16",
            "networks.model_hidden_units": "16",
            "train.batch": "8",
            "train.initial_random_steps": "20",
            "train.total_steps": "40",
            "train.eval_every": "20",
            "train.checkpoint_every": "40",
            "train.eval_episodes": "2",
            "iterative.n_iterations": "2",
            "iterative.n_action_samples": "4",
            "objective.n_action_samples": "4",
            "mb.pretrain_updates": "5",
            "eval.n_states": "4",
            "eval.gap_steps": "3",
            "eval.n_runs": "3",
            "eval.n_pairs": "3",
            "eval.n_mc": "4",
            "eval.grid": "5",
            "eval.compare_budget": "3",
            "eval.cem_pop": "8",
            "eval.cem_elite": "2",
        }
        flat.update({key: str(value) for key, value in overrides.items()})
        return parse_run_config(flat)

    return build


class OffsetValue:
    """Wraps an action value and adds a constant"""

    def __init__(self, inner, offset: float):
        self.inner = inner
        self.offset = offset

    def value(self, s, a):
        return self.inner.value(s, a) + self.offset


@pytest.fixture
def offset_value():
    return OffsetValue
