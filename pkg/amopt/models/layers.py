"""Building blocks shared by every network"""
import math
from typing import Callable, Dict, List, Optional

import numpy as np

from amopt.core import autodiff as ad
from amopt.core.autodiff import ParamStore, Tensor

Activation = Callable[[Tensor], Tensor]

ACTIVATIONS: Dict[str, Activation] = {
    "relu": ad.relu,
    "leaky_relu": ad.leaky_relu,
    "elu": ad.elu,
    "tanh": ad.tanh,
}


class Module:
    """A network whose parameters live in one ParamStore"""

    def __init__(self):
        self.params = ParamStore()

    def num_parameters(self) -> int:
        return self.params.num_parameters()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return self.params.state_dict()

    def load_state_dict(self, values: Dict[str, np.ndarray]) -> None:
        self.params.load_state_dict(values)


class Linear:
    """Affine map with fan-in uniform initialization"""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        n_in: int,
        n_out: int,
        rng: np.random.Generator,
        scale: float = 1.0,
        bias: Optional[float] = None,
    ):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = store.add(f"{name}.weight", rng.uniform(-bound, bound, (n_in, n_out)) * scale)
        bias_init = rng.uniform(-bound, bound, n_out) * scale if bias is None else np.full(n_out, bias)
        self.bias = store.add(f"{name}.bias", bias_init)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.weight, self.bias)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        self.gain = store.add(f"{name}.gain", np.ones(dim))
        self.bias = store.add(f"{name}.bias", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x) * self.gain + self.bias


class MLP:
    """Sequential stack of Linear -> [LayerNorm] -> activation"""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        n_in: int,
        width: int,
        n_layers: int,
        rng: np.random.Generator,
        activation: str = "relu",
        layer_norm: bool = False,
    ):
        self.activation = ACTIVATIONS[activation]
        self.layers: List[Linear] = []
        self.norms: List[Optional[LayerNorm]] = []
        for i in range(n_layers):
            self.layers.append(Linear(store, f"{name}.{i}", n_in if i == 0 else width, width, rng))
            self.norms.append(LayerNorm(store, f"{name}.{i}.norm", width) if layer_norm else None)
        self.out_dim = width

    def __call__(self, x: Tensor) -> Tensor:
        for layer, norm in zip(self.layers, self.norms):
            x = layer(x)
            if norm is not None:
                x = norm(x)
            x = self.activation(x)
        return x


class HighwayBlock:
    """out = gate * h + (1 - gate) * x with h = elu(norm(W x + b))"""

    def __init__(self, store: ParamStore, name: str, width: int, rng: np.random.Generator):
        self.transform = Linear(store, f"{name}.transform", width, width, rng)
        self.norm = LayerNorm(store, f"{name}.norm", width)
        self.gate = Linear(store, f"{name}.gate", width, width, rng)

    def gate_values(self, x: Tensor) -> Tensor:
        return ad.sigmoid(self.gate(x))

    def __call__(self, x: Tensor, gate: Optional[Tensor] = None) -> Tensor:
        h = ad.elu(self.norm(self.transform(x)))
        if gate is None:
            gate = self.gate_values(x)
        return ad.convex_combine(gate, h, x)
