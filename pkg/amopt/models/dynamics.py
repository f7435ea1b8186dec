"""Learned deterministic model: residual dynamics and reward networks"""
import math
from typing import Dict, Tuple

import numpy as np

from amopt.core import autodiff as ad
from amopt.core.autodiff import Tensor
from amopt.models.layers import MLP, Linear, Module

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class DynamicsNet(Module):
    """(s, a) -> residual delta_s; mean next state is s + delta_s"""

    def __init__(self, state_dim: int, action_dim: int, rng: np.random.Generator, hidden_units: int = 256, n_layers: int = 2):
        super().__init__()
        self.state_dim = state_dim
        self.body = MLP(
            self.params, "body", state_dim + action_dim, hidden_units, n_layers, rng,
            activation="leaky_relu", layer_norm=True,
        )
        self.head = Linear(self.params, "residual", hidden_units, state_dim, rng)
        self.log_std = self.params.add("log_std", np.zeros(state_dim))

    def __call__(self, s, a) -> Tensor:
        s = ad.as_tensor(s)
        return s + self.head(self.body(ad.concat([s, ad.as_tensor(a)], axis=-1)))


class RewardNet(Module):
    """(s, a) -> reward mean"""

    def __init__(self, state_dim: int, action_dim: int, rng: np.random.Generator, hidden_units: int = 256, n_layers: int = 2):
        super().__init__()
        self.body = MLP(
            self.params, "body", state_dim + action_dim, hidden_units, n_layers, rng,
            activation="leaky_relu", layer_norm=True,
        )
        self.head = Linear(self.params, "reward", hidden_units, 1, rng)
        self.log_std = self.params.add("log_std", np.zeros(1))

    def __call__(self, s, a) -> Tensor:
        x = ad.concat([ad.as_tensor(s), ad.as_tensor(a)], axis=-1)
        return ad.reshape(self.head(self.body(x)), (x.shape[0],))


def gaussian_nll(target, mean: Tensor, log_std: Tensor) -> Tensor:
    """Per-row Gaussian negative log-likelihood summed over the last axis"""
    z = (ad.as_tensor(target) - mean) / ad.exp(log_std)
    per_dim = 0.5 * ad.square(z) + log_std + HALF_LOG_2PI
    if per_dim.ndim == 1:
        return per_dim
    return ad.sum_(per_dim, axis=-1)


class ModelPair:
    def __init__(self, state_dim: int, action_dim: int, rng: np.random.Generator, hidden_units: int = 256):
        self.dynamics = DynamicsNet(state_dim, action_dim, rng, hidden_units=hidden_units)
        self.reward = RewardNet(state_dim, action_dim, rng, hidden_units=hidden_units)

    def predict(self, s, a) -> Tuple[Tensor, Tensor]:
        return self.dynamics(s, a), self.reward(s, a)

    def modules(self) -> Dict[str, Module]:
        return {"dynamics": self.dynamics, "reward": self.reward}
