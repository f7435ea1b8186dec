"""Soft action-value networks and the twin ensemble with target copies"""
from typing import List, Union

import numpy as np

from amopt.core import autodiff as ad
from amopt.core.autodiff import Tensor
from amopt.models.layers import MLP, HighwayBlock, Linear, Module


class QNetA(Module):
    """2 x 256 ReLU, sequential, no layer norm"""

    arch = "A"

    def __init__(self, state_dim: int, action_dim: int, rng: np.random.Generator, hidden_units: int = 256, n_layers: int = 2):
        super().__init__()
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.hidden_units = hidden_units
        self.n_layers = n_layers
        self.body = MLP(self.params, "body", state_dim + action_dim, hidden_units, n_layers, rng, activation="relu")
        self.head = Linear(self.params, "head", hidden_units, 1, rng)

    def __call__(self, s, a) -> Tensor:
        return q_forward(self, s, a)

    def features(self, x: Tensor) -> Tensor:
        return self.body(x)


class QNetB(Module):
    """3 x 512 ELU highway blocks with layer norm"""

    arch = "B"

    def __init__(self, state_dim: int, action_dim: int, rng: np.random.Generator, hidden_units: int = 512, n_layers: int = 3):
        super().__init__()
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.hidden_units = hidden_units
        self.n_layers = n_layers
        self.projection = Linear(self.params, "projection", state_dim + action_dim, hidden_units, rng)
        self.blocks = [HighwayBlock(self.params, f"block.{i}", hidden_units, rng) for i in range(n_layers)]
        self.head = Linear(self.params, "head", hidden_units, 1, rng)

    def __call__(self, s, a) -> Tensor:
        return q_forward(self, s, a)

    def features(self, x: Tensor) -> Tensor:
        x = self.projection(x)
        for block in self.blocks:
            x = block(x)
        return x


QNetwork = Union[QNetA, QNetB]


def q_forward(net: QNetwork, s, a) -> Tensor:
    """Q(s, a) for a batch of rows; returns shape [batch]"""
    x = ad.concat([ad.as_tensor(s), ad.as_tensor(a)], axis=-1)
    return ad.reshape(net.head(net.features(x)), (x.shape[0],))


def make_q_network(arch: str, state_dim: int, action_dim: int, rng: np.random.Generator, hidden_units: int) -> QNetwork:
    if arch == "A":
        return QNetA(state_dim, action_dim, rng, hidden_units=hidden_units)
    if arch == "B":
        return QNetB(state_dim, action_dim, rng, hidden_units=hidden_units)
    raise ValueError(f"unknown Q architecture: {arch}")


class QEnsemble:
    """Two live Q-networks and their slowly tracking target copies"""

    def __init__(self, arch: str, state_dim: int, action_dim: int, rng: np.random.Generator, hidden_units: int):
        self.arch = arch
        self.q1 = make_q_network(arch, state_dim, action_dim, rng, hidden_units)
        self.q2 = make_q_network(arch, state_dim, action_dim, rng, hidden_units)
        self.q1_target = make_q_network(arch, state_dim, action_dim, rng, hidden_units)
        self.q2_target = make_q_network(arch, state_dim, action_dim, rng, hidden_units)
        self.q1_target.params.copy_from(self.q1.params)
        self.q2_target.params.copy_from(self.q2.params)

    @property
    def live(self) -> List[QNetwork]:
        return [self.q1, self.q2]

    @property
    def targets(self) -> List[QNetwork]:
        return [self.q1_target, self.q2_target]

    def values(self, s, a, target: bool = False) -> List[Tensor]:
        nets = self.targets if target else self.live
        return [net(s, a) for net in nets]

    def zero_grad(self) -> None:
        for net in self.live + self.targets:
            net.params.zero_grad()

    def modules(self):
        return {"q1": self.q1, "q2": self.q2, "q1_target": self.q1_target, "q2_target": self.q2_target}
