"""Tanh-squashed diagonal Gaussian policy distribution"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from amopt.core import autodiff as ad
from amopt.core.autodiff import Tensor
from amopt.core.errors import NumericalError, ShapeError

LOG_SIGMA_MIN = -20.0
LOG_SIGMA_MAX = 2.0
LOG_2 = math.log(2.0)
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PolicyParams:
    """Pre-squash mean and log standard deviation, one row per state"""

    mu: Tensor
    log_sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape:
            raise ShapeError("PolicyParams", f"mu {self.mu.shape} and log_sigma {self.log_sigma.shape} differ")

    @classmethod
    def from_sigma(cls, mu, sigma) -> "PolicyParams":
        sigma = np.asarray(sigma, dtype=np.float64)
        if not np.all(sigma > 0) or not np.all(np.isfinite(sigma)):
            raise NumericalError("sigma must be finite and strictly positive")
        return cls(ad.as_tensor(np.asarray(mu, dtype=np.float64)), Tensor(np.log(sigma)))

    @classmethod
    def initial(cls, batch: int, action_dim: int, mu: float = 0.0, sigma: float = 1.0) -> "PolicyParams":
        return cls(
            Tensor(np.full((batch, action_dim), mu)),
            Tensor(np.full((batch, action_dim), math.log(sigma))),
        )

    @classmethod
    def from_vector(cls, vector: Tensor) -> "PolicyParams":
        """Split a [..., 2|A|] tensor laid out as [mu, log_sigma]"""
        width = vector.shape[-1]
        if width % 2:
            raise ShapeError("PolicyParams", f"vector width {width} is not even")
        half = width // 2
        return cls(vector[..., :half], vector[..., half:])

    @property
    def sigma(self) -> Tensor:
        return ad.exp(self.log_sigma)

    @property
    def action_dim(self) -> int:
        return self.mu.shape[-1]

    def as_vector(self) -> Tensor:
        return ad.concat([self.mu, self.log_sigma], axis=-1)

    def detach(self) -> "PolicyParams":
        return PolicyParams(ad.detach(self.mu), ad.detach(self.log_sigma))

    def leaves(self) -> "PolicyParams":
        """Copies marked as differentiable inputs"""
        return PolicyParams(
            Tensor(self.mu.data.copy(), requires_grad=True),
            Tensor(self.log_sigma.data.copy(), requires_grad=True),
        )

    def numpy(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.mu.data, self.log_sigma.data

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.mu.data)) and np.all(np.isfinite(self.log_sigma.data)))


@dataclass(frozen=True)
class ActionSample:
    a: Tensor
    u: Tensor
    noise: Optional[Tensor]


class SquashedGaussian:
    """Diagonal Gaussian in pre-squash space followed by tanh

    With ``squash=False`` the tanh is skipped; that mode only exists so
    closed-form Gaussian expectations can serve as test oracles.
    """

    def __init__(self, squash: bool = True):
        self.squash = squash

    def sample(self, lam: PolicyParams, noise) -> ActionSample:
        noise = ad.as_tensor(noise)
        if noise.shape[-1] != lam.action_dim:
            raise ShapeError("sample", f"noise width {noise.shape[-1]} != action dim {lam.action_dim}")
        u = lam.mu + lam.sigma * noise
        a = ad.tanh(u) if self.squash else u
        return ActionSample(a=a, u=u, noise=noise)

    def action_sample(self, lam: PolicyParams, a: np.ndarray) -> ActionSample:
        """Recover the pre-squash value of a given action"""
        a = np.asarray(a, dtype=np.float64)
        u = np.arctanh(a) if self.squash else a
        noise = (u - lam.mu.data) / np.exp(lam.log_sigma.data)
        return ActionSample(a=Tensor(a), u=Tensor(u), noise=Tensor(noise))

    def log_prob(self, lam: PolicyParams, sample: ActionSample) -> Tensor:
        """log density of the action, summed over action dimensions"""
        z = (sample.u - lam.mu) / lam.sigma
        gaussian = -0.5 * ad.square(z) - lam.log_sigma - HALF_LOG_2PI
        if self.squash:
            # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
            gaussian = gaussian - 2.0 * (LOG_2 - sample.u - ad.softplus(-2.0 * sample.u))
        return ad.sum_(gaussian, axis=-1)

    def kl_to_uniform(self, lam: PolicyParams, noise) -> Tensor:
        """Monte-Carlo KL to U(-1, 1)^|A|; noise is [n_samples, ..., |A|]"""
        sample = self.sample(lam, noise)
        return ad.mean(self.log_prob(lam, sample), axis=0) + lam.action_dim * LOG_2

    def entropy(self, lam: PolicyParams, noise) -> Tensor:
        sample = self.sample(lam, noise)
        return -ad.mean(self.log_prob(lam, sample), axis=0)

    def mode(self, lam: PolicyParams) -> np.ndarray:
        """Deterministic action used for evaluation"""
        return np.tanh(lam.mu.data) if self.squash else lam.mu.data.copy()


def sample_reparam(lam: PolicyParams, noise, squash: bool = True) -> ActionSample:
    return SquashedGaussian(squash).sample(lam, noise)


def log_prob(lam: PolicyParams, sample: ActionSample, squash: bool = True) -> Tensor:
    return SquashedGaussian(squash).log_prob(lam, sample)


def kl_to_uniform(lam: PolicyParams, n_samples: int, rng: np.random.Generator, squash: bool = True) -> Tensor:
    noise = rng.standard_normal((n_samples,) + lam.mu.shape)
    return SquashedGaussian(squash).kl_to_uniform(lam, noise)


def gaussian_kl(p: PolicyParams, q: PolicyParams) -> Tensor:
    """Closed-form KL(p || q) between diagonal Gaussians, summed over the last axis"""
    var_ratio = ad.exp(2.0 * (p.log_sigma - q.log_sigma))
    mean_term = ad.square(p.mu - q.mu) / ad.exp(2.0 * q.log_sigma)
    per_dim = (q.log_sigma - p.log_sigma) + 0.5 * (var_ratio + mean_term) - 0.5
    return ad.sum_(per_dim, axis=-1)
