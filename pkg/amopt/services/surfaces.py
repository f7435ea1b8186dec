"""Analytic action-value surfaces

They expose the same ``value(s, a)`` interface as the critic ensemble, so
every objective and optimizer runs on them unchanged. Used to train and
check optimizers where the true optimum is known.
"""
from typing import Optional, Sequence

import numpy as np

from amopt.core import autodiff as ad
from amopt.core.autodiff import Tensor


class QuadraticSurface:
    """Q(s, a) = -scale * |a - a*(s)|^2

    a*(s) is ``target`` when given, otherwise ``gain`` times the first |A|
    state entries (a family of surfaces indexed by the state).
    """

    def __init__(self, action_dim: int, target: Optional[Sequence[float]] = None, gain: float = 0.5, scale: float = 1.0):
        self.action_dim = action_dim
        self.target = None if target is None else np.asarray(target, dtype=np.float64)
        self.gain = gain
        self.scale = scale

    def optimum(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        if self.target is not None:
            return np.broadcast_to(self.target, (s.shape[0], self.action_dim)).copy()
        return self.gain * s[:, : self.action_dim]

    def value(self, s: np.ndarray, a: Tensor) -> Tensor:
        diff = ad.as_tensor(a) - self.optimum(s)
        return -self.scale * ad.sum_(ad.square(diff), axis=-1)


class TwoBumpSurface:
    """Q(a) = w1 exp(-|a - c|^2 / width) + w2 exp(-|a + c|^2 / width)"""

    def __init__(self, center: Sequence[float], weights: Sequence[float] = (1.0, 1.0), width: float = 0.08):
        self.center = np.asarray(center, dtype=np.float64)
        self.weights = tuple(float(w) for w in weights)
        self.width = width

    @property
    def action_dim(self) -> int:
        return self.center.size

    def value(self, s: np.ndarray, a: Tensor) -> Tensor:
        a = ad.as_tensor(a)
        near = ad.exp(ad.sum_(ad.square(a - self.center), axis=-1) * (-1.0 / self.width))
        far = ad.exp(ad.sum_(ad.square(a + self.center), axis=-1) * (-1.0 / self.width))
        return self.weights[0] * near + self.weights[1] * far

    def numpy_value(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        near = np.exp(-np.sum((a - self.center) ** 2, axis=-1) / self.width)
        far = np.exp(-np.sum((a + self.center) ** 2, axis=-1) / self.width)
        return self.weights[0] * near + self.weights[1] * far


def surface_states(state_dim: int, n: int, rng: np.random.Generator, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    """States indexing a quadratic surface family, uniform in a box"""
    return rng.uniform(low, high, size=(n, state_dim))
