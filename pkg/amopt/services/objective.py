"""The regularized policy objective J, pessimistic values and the temperature"""
import math
from dataclasses import dataclass, replace
from typing import Optional, Protocol, Sequence, Tuple

import numpy as np
import structlog

from amopt.core import autodiff as ad
from amopt.core.autodiff import ParamStore, Tensor
from amopt.core.errors import NumericalError
from amopt.core.run_config import ObjectiveConfig
from amopt.models.critic import QEnsemble
from amopt.models.distributions import LOG_2, PolicyParams, SquashedGaussian

logger = structlog.get_logger(__name__)


class ActionValue(Protocol):
    """Anything that scores a batch of (state, action) rows"""

    def value(self, s: np.ndarray, a: Tensor) -> Tensor:
        ...


def pessimistic_q(qs: Sequence[float], beta: float) -> float:
    """Ensemble mean minus beta times the population standard deviation"""
    values = np.asarray(qs, dtype=np.float64)
    if values.size == 0:
        raise ValueError("pessimistic_q needs at least one value")
    if values.size == 2:
        # mean - std of two values is exactly their minimum when beta == 1
        lo, hi = min(values[0], values[1]), max(values[0], values[1])
        half = 0.5 * (hi - lo)
        if beta == 1.0:
            return float(lo)
        return float(lo + half - beta * half)
    return float(values.mean() - beta * values.std())


def pessimistic_q_tensor(qs: Sequence[Tensor], beta: float) -> Tensor:
    """Differentiable version over a list of same-shaped tensors"""
    n = len(qs)
    mean_q = qs[0]
    for q in qs[1:]:
        mean_q = mean_q + q
    mean_q = mean_q / n
    if beta == 0.0:
        return mean_q
    if n == 2:
        # |q1 - q2| / 2 is the population std of two values
        spread = ad.sqrt(ad.square(qs[0] - qs[1])) * 0.5
        return mean_q - beta * spread
    var = ad.square(qs[0] - mean_q)
    for q in qs[1:]:
        var = var + ad.square(q - mean_q)
    return mean_q - beta * ad.sqrt(var / n)


class PessimisticQ:
    """Pessimistic estimate from the live or target critics of an ensemble"""

    def __init__(self, ens: QEnsemble, beta: float, target: bool = False):
        self.ens = ens
        self.beta = beta
        self.target = target

    def value(self, s: np.ndarray, a: Tensor) -> Tensor:
        return pessimistic_q_tensor(self.ens.values(s, a, target=self.target), self.beta)


def _tile_states(s: np.ndarray, n: int) -> np.ndarray:
    return np.tile(np.asarray(s, dtype=np.float64), (n, 1))


def objective_samples(
    lam: PolicyParams,
    s: np.ndarray,
    value: ActionValue,
    noise: np.ndarray,
    alpha: float,
    squash: bool = True,
) -> Tuple[Tensor, Tensor]:
    """(pre-squash samples u [N, B, |A|], per-sample scores [N, B])

    score = Q(s, a) - alpha (log pi(a | s) + |A| log 2)
    """
    noise = np.asarray(noise, dtype=np.float64)
    n, batch, action_dim = noise.shape
    dist = SquashedGaussian(squash)
    sample = dist.sample(lam, noise)
    q = value.value(_tile_states(s, n), ad.reshape(sample.a, (n * batch, action_dim)))
    q = ad.reshape(q, (n, batch))
    if alpha == 0.0:
        return sample.u, q
    log_ratio = dist.log_prob(lam, sample) + action_dim * LOG_2
    return sample.u, q - alpha * log_ratio


def estimate_J(
    lam: PolicyParams,
    s: np.ndarray,
    value: ActionValue,
    noise: np.ndarray,
    alpha: float,
    squash: bool = True,
) -> Tensor:
    """Monte-Carlo J per state under fixed noise of shape [N, B, |A|]"""
    _, scores = objective_samples(lam, s, value, noise, alpha, squash)
    return ad.mean(scores, axis=0)


def grad_lambda_J(
    lam: PolicyParams,
    s: np.ndarray,
    value: ActionValue,
    noise: np.ndarray,
    alpha: float,
    squash: bool = True,
) -> Tuple[np.ndarray, np.ndarray]:
    """(J per state, dJ/d[mu, log sigma]) with the inputs treated as leaves

    Each state's J depends only on its own row of lambda, so the gradient of
    the summed objective gives every per-state gradient at once.
    """
    leaves = lam.leaves()
    with ad.enable_grad():
        j = estimate_J(leaves, s, value, noise, alpha, squash)
        total = ad.sum_(j)
        if not total.requires_grad:
            zeros = np.zeros(lam.mu.shape[:-1] + (2 * lam.action_dim,))
            return j.data.copy(), zeros
        g_mu, g_log_sigma = ad.grad(total, [leaves.mu, leaves.log_sigma])
    return j.data.copy(), np.concatenate([g_mu, g_log_sigma], axis=-1)


@dataclass(frozen=True)
class PolicyObjective:
    """What a policy optimizer maximizes: an action value, a temperature and a sample count"""

    value: ActionValue
    alpha: float
    n_samples: int = 10
    squash: bool = True

    @classmethod
    def from_config(cls, value: ActionValue, obj: ObjectiveConfig, alpha: Optional[float] = None, n_samples: Optional[int] = None) -> "PolicyObjective":
        return cls(
            value=value,
            alpha=obj.alpha if alpha is None else alpha,
            n_samples=obj.n_action_samples if n_samples is None else n_samples,
            squash=obj.squash,
        )

    def with_value(self, value: ActionValue) -> "PolicyObjective":
        return replace(self, value=value)

    def draw(self, rng: np.random.Generator, batch: int, action_dim: int) -> np.ndarray:
        return rng.standard_normal((self.n_samples, batch, action_dim))

    def estimate(self, lam: PolicyParams, s: np.ndarray, noise: np.ndarray) -> Tensor:
        return estimate_J(lam, s, self.value, noise, self.alpha, self.squash)

    def evaluate(self, lam: PolicyParams, s: np.ndarray, noise: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.estimate(lam.detach(), s, noise).data.copy()

    def gradient(self, lam: PolicyParams, s: np.ndarray, noise: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return grad_lambda_J(lam, s, self.value, noise, self.alpha, self.squash)


def entropy_estimate(lam: PolicyParams, noise: np.ndarray, squash: bool = True) -> np.ndarray:
    """-E[log pi(a)] per state, without gradient"""
    with ad.no_grad():
        return SquashedGaussian(squash).entropy(lam.detach(), noise).data.copy()


class Temperature:
    """alpha held as log alpha and tuned with Adam toward an entropy target"""

    def __init__(self, alpha: float, target_entropy: float, lr: float = 3e-4, learn: bool = True):
        self.params = ParamStore()
        self.log_alpha = self.params.add("log_alpha", np.array([math.log(alpha)]))
        self.target_entropy = target_entropy
        self.lr = lr
        self.learn = learn

    @property
    def alpha(self) -> float:
        return float(math.exp(self.log_alpha.data[0]))

    def state_dict(self):
        return self.params.state_dict()

    def load_state_dict(self, values) -> None:
        self.params.load_state_dict(values)


def temperature_update(temp: Temperature, entropy: float, target_entropy: Optional[float] = None, lr: Optional[float] = None) -> Temperature:
    """One Adam step on L(log alpha) = log alpha * (entropy - target)

    The gradient (entropy - target) is negative when entropy is below the
    target, so descent raises alpha; above the target it lowers alpha.
    """
    if not temp.learn:
        return temp
    target = temp.target_entropy if target_entropy is None else target_entropy
    g = float(entropy) - float(target)
    if not math.isfinite(g):
        raise NumericalError(f"non-finite entropy estimate {entropy}")
    temp.log_alpha.grad = np.array([g])
    ad.adam_step(temp.params, temp.lr if lr is None else lr)
    logger.debug("temperature_updated", alpha=temp.alpha, entropy=float(entropy), target=float(target))
    return temp
