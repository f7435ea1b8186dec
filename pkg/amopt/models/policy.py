"""Direct and iterative amortized policy networks"""
from dataclasses import dataclass

import numpy as np

from amopt.core import autodiff as ad
from amopt.core.autodiff import Tensor
from amopt.core.errors import ShapeError
from amopt.models.distributions import LOG_SIGMA_MAX, LOG_SIGMA_MIN, PolicyParams
from amopt.models.layers import MLP, LayerNorm, Linear, Module

OUTPUT_SCALE = 1e-2
GATE_BIAS = 1.0


class DirectPolicyNet(Module):
    """s -> (mu, log sigma) in a single forward pass"""

    def __init__(self, state_dim: int, action_dim: int, rng: np.random.Generator, hidden_units: int = 256, n_layers: int = 2):
        super().__init__()
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.body = MLP(self.params, "body", state_dim, hidden_units, n_layers, rng, activation="relu")
        self.mu_head = Linear(self.params, "mu", hidden_units, action_dim, rng, scale=OUTPUT_SCALE)
        self.log_sigma_head = Linear(self.params, "log_sigma", hidden_units, action_dim, rng, scale=OUTPUT_SCALE)

    def __call__(self, s) -> PolicyParams:
        return direct_forward(self, s)


def direct_forward(net: DirectPolicyNet, s) -> PolicyParams:
    s = ad.as_tensor(s)
    if s.shape[-1] != net.state_dim:
        raise ShapeError("direct_forward", f"state width {s.shape[-1]} != {net.state_dim}")
    h = net.body(s)
    log_sigma = ad.clamp(net.log_sigma_head(h), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    return PolicyParams(net.mu_head(h), log_sigma)


@dataclass(frozen=True)
class IterativeUpdate:
    """Proposed parameters and gates, both laid out as [mu, log sigma]"""

    delta: Tensor
    omega: Tensor


class IterativePolicyNet(Module):
    """(s, lambda, grad_lambda J) -> (delta, omega)

    Each of the three inputs passes through its own layer norm before they
    are concatenated. The gradient input is treated as a constant.
    """

    def __init__(self, state_dim: int, action_dim: int, rng: np.random.Generator, hidden_units: int = 256, n_layers: int = 2):
        super().__init__()
        self.state_dim = state_dim
        self.action_dim = action_dim
        width = 2 * action_dim
        self.state_norm = LayerNorm(self.params, "norm.state", state_dim)
        self.lambda_norm = LayerNorm(self.params, "norm.lambda", width)
        self.grad_norm = LayerNorm(self.params, "norm.grad", width)
        self.body = MLP(self.params, "body", state_dim + 2 * width, hidden_units, n_layers, rng, activation="relu")
        self.delta_head = Linear(self.params, "delta", hidden_units, width, rng, scale=OUTPUT_SCALE)
        self.gate_head = Linear(self.params, "gate", hidden_units, width, rng, scale=OUTPUT_SCALE, bias=GATE_BIAS)

    def __call__(self, s, lam: PolicyParams, grad) -> IterativeUpdate:
        return iterative_forward(self, s, lam, grad)


def iterative_forward(net: IterativePolicyNet, s, lam: PolicyParams, grad) -> IterativeUpdate:
    s = ad.as_tensor(s)
    grad = ad.detach(ad.as_tensor(grad))
    lam_vec = lam.as_vector()
    if s.shape[-1] != net.state_dim:
        raise ShapeError("iterative_forward", f"state width {s.shape[-1]} != {net.state_dim}")
    if grad.shape != lam_vec.shape:
        raise ShapeError("iterative_forward", f"gradient {grad.shape} does not match lambda {lam_vec.shape}")

    x = ad.concat([net.state_norm(s), net.lambda_norm(lam_vec), net.grad_norm(grad)], axis=-1)
    h = net.body(x)
    return IterativeUpdate(delta=net.delta_head(h), omega=ad.sigmoid(net.gate_head(h)))
