"""Model-based value estimation

A learned deterministic model (residual dynamics plus reward) is rolled out
for a few steps under a distilled direct rollout policy, and the critic's
estimate is corrected with geometrically weighted model temporal
differences (Retrace with unit traces).
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Tuple

import numpy as np
import structlog

from amopt.core import autodiff as ad
from amopt.core.autodiff import Tensor
from amopt.core.errors import CompatibilityError, NumericalError
from amopt.core.rng import substream
from amopt.models.critic import QEnsemble
from amopt.models.distributions import LOG_2, PolicyParams, SquashedGaussian, gaussian_kl
from amopt.models.dynamics import ModelPair, gaussian_nll
from amopt.models.policy import DirectPolicyNet, direct_forward
from amopt.services.objective import pessimistic_q_tensor
from amopt.services.replay import Batch, ReplayBuffer

logger = structlog.get_logger(__name__)


class Predictor(Protocol):
    def predict(self, s, a) -> Tuple[Tensor, Tensor]:
        ...


class ValueEstimator(Protocol):
    def q(self, s, a) -> Tensor:
        ...

    def sample_value(self, s, rng: np.random.Generator) -> Tuple[Tensor, Tensor]:
        """(soft state value V(s), the action sampled to estimate it)"""
        ...


# ---------------------------------------------------------------------------
# Model learning
# ---------------------------------------------------------------------------


def model_losses(batch: Batch, models: ModelPair) -> Tuple[Tensor, Tensor]:
    next_mean = models.dynamics(batch.s, batch.a)
    reward_mean = models.reward(batch.s, batch.a)
    nll_dyn = ad.mean(gaussian_nll(batch.s_next, next_mean, models.dynamics.log_std))
    nll_rew = ad.mean(gaussian_nll(batch.r, reward_mean, models.reward.log_std))
    return nll_dyn, nll_rew


def model_update(batch: Batch, models: ModelPair, lr: float) -> Tuple[float, float]:
    """One Adam step on the Gaussian NLL of next state and reward"""
    with ad.enable_grad():
        nll_dyn, nll_rew = model_losses(batch, models)
        total = nll_dyn + nll_rew
        if not np.isfinite(total.item()):
            raise NumericalError(f"non-finite model loss (dynamics {nll_dyn.item()}, reward {nll_rew.item()})")
        ad.backward(total)
    models.dynamics.params.adam_step(lr)
    models.reward.params.adam_step(lr)
    return nll_dyn.item(), nll_rew.item()


def pretrain_model(models: ModelPair, replay: ReplayBuffer, updates: int, batch_size: int, lr: float, rng: np.random.Generator) -> Tuple[float, float]:
    """Fit the model on the initial random data before value learning starts"""
    losses = (float("nan"), float("nan"))
    for i in range(updates):
        losses = model_update(replay.sample(batch_size, rng), models, lr)
    logger.info("model_pretrained", updates=updates, nll_dyn=losses[0], nll_rew=losses[1])
    return losses


# ---------------------------------------------------------------------------
# Retrace
# ---------------------------------------------------------------------------


class SoftValueEstimator:
    """Pessimistic critic values and one-sample soft state values under a direct policy"""

    def __init__(self, ens: QEnsemble, rollout_policy: DirectPolicyNet, beta: float, alpha: float, target: bool = False, squash: bool = True):
        self.ens = ens
        self.rollout_policy = rollout_policy
        self.beta = beta
        self.alpha = alpha
        self.target = target
        self.dist = SquashedGaussian(squash)

    def q(self, s, a) -> Tensor:
        return pessimistic_q_tensor(self.ens.values(s, a, target=self.target), self.beta)

    def sample_action(self, s, rng: np.random.Generator) -> Tuple[Tensor, Tensor]:
        """(action, log pi(a|s) + |A| log 2) from one reparameterized draw"""
        lam = direct_forward(self.rollout_policy, s)
        noise = rng.standard_normal(lam.mu.shape)
        sample = self.dist.sample(lam, noise)
        return sample.a, self.dist.log_prob(lam, sample) + lam.action_dim * LOG_2

    def sample_value(self, s, rng: np.random.Generator) -> Tuple[Tensor, Tensor]:
        a, log_ratio = self.sample_action(s, rng)
        return self.q(s, a) - self.alpha * log_ratio, a


def retrace_q(
    s,
    a,
    models: Predictor,
    estimator: ValueEstimator,
    gamma: float,
    retrace_lambda: float,
    horizon: int,
    rng: np.random.Generator,
) -> Tensor:
    """Q(s0, a0) + sum_{k=0..h} (gamma lambda)^k delta_k over one model rollout

    delta_k = r_k + gamma V(s_{k+1}) - Q(s_k, a_k). The action sampled for
    V(s_{k+1}) is the action taken at step k + 1. Differentiable in ``a``
    when the model and the estimator are.
    """
    q_k = ad.as_tensor(estimator.q(s, a))
    total = q_k
    s_k, a_k = s, a
    weight = 1.0
    for k in range(horizon + 1):
        s_next, reward = models.predict(s_k, a_k)
        v_next, a_next = estimator.sample_value(s_next, rng)
        delta = ad.as_tensor(reward) + gamma * ad.as_tensor(v_next) - q_k
        total = total + weight * delta
        weight *= gamma * retrace_lambda
        if k < horizon:
            q_k = ad.as_tensor(estimator.q(s_next, a_next))
            s_k, a_k = s_next, a_next
    return total


class RetraceValue:
    """Model-based action value with the same interface as the pessimistic critic"""

    def __init__(
        self,
        models: ModelPair,
        estimator: SoftValueEstimator,
        gamma: float,
        retrace_lambda: float,
        horizon: int,
        rng: np.random.Generator,
        n_rollouts: int = 1,
    ):
        self.models = models
        self.estimator = estimator
        self.gamma = gamma
        self.retrace_lambda = retrace_lambda
        self.horizon = horizon
        self.rng = rng
        self.n_rollouts = n_rollouts

    def value(self, s, a) -> Tensor:
        total = None
        for _ in range(self.n_rollouts):
            estimate = retrace_q(s, a, self.models, self.estimator, self.gamma, self.retrace_lambda, self.horizon, self.rng)
            total = estimate if total is None else total + estimate
        return total if self.n_rollouts == 1 else total / self.n_rollouts


# ---------------------------------------------------------------------------
# Rollout policy distillation and planning views
# ---------------------------------------------------------------------------


def distill_rollout_policy(rollout_net: DirectPolicyNet, target: PolicyParams, states: np.ndarray, lr: float) -> float:
    """One Adam step on mean KL(pi_target || pi_rollout); returns the KL before the step"""
    target = target.detach()
    with ad.enable_grad():
        kl = ad.mean(gaussian_kl(target, direct_forward(rollout_net, states)))
        if not np.isfinite(kl.item()):
            raise NumericalError("non-finite distillation loss")
        ad.backward(kl)
    rollout_net.params.adam_step(lr)
    return kl.item()


def planned_trajectory(s: np.ndarray, lam: PolicyParams, models: ModelPair, rollout_policy: DirectPolicyNet, horizon: int, squash: bool = True) -> np.ndarray:
    """Model-predicted states [h + 2, B, |S|] when acting with the mode of lam, then the rollout policy"""
    dist = SquashedGaussian(squash)
    states = [np.asarray(s, dtype=np.float64)]
    with ad.no_grad():
        action = dist.mode(lam)
        for k in range(horizon + 1):
            next_state, _ = models.predict(states[-1], action)
            states.append(next_state.data.copy())
            action = dist.mode(direct_forward(rollout_policy, states[-1]))
    return np.stack(states)


# ---------------------------------------------------------------------------
# Transfer
# ---------------------------------------------------------------------------


@dataclass
class TransferReport:
    env: str
    optimizer_kind: str
    pre_returns: List[float]
    post_returns: List[float]
    reference_returns: List[float]
    post_improvement: List[float] = field(default_factory=list)
    actions_identical: bool = False
    objective_independent: bool = False
    trajectories: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def mean_post_improvement(self) -> float:
        return float(np.mean(self.post_improvement)) if self.post_improvement else 0.0


def _run_episodes(env, agent, value_agent, episodes: int, seed: int, squash: bool = True):
    """Evaluation episodes where ``agent``'s optimizer maximizes ``value_agent``'s objective"""
    env_rng, opt_rng = substream(seed, "eval"), substream(seed, "diagnostics")
    objective = value_agent.objective(value_agent.action_value(substream(seed, "retrace")))
    optimizer = agent.optimizer()
    dist = SquashedGaussian(squash)

    returns, actions, improvements, first_trace = [], [], [], None
    for _ in range(episodes):
        state, total = env.reset(env_rng), 0.0
        for t in range(env.spec.horizon):
            lam, trace = optimizer.optimize(state[None, :], objective, opt_rng)
            if first_trace is None:
                first_trace = trace
            action = dist.mode(lam)[0]
            actions.append(action)
            improvements.append(float(trace.improvement().mean()))
            result = env.step(state, action, t)
            total += result.reward
            state = result.next_state
            if result.done:
                break
        returns.append(total)
    return returns, np.array(actions), improvements, first_trace


def transfer_eval(mf_agent, mb_agent, env, episodes: int, seed: int) -> TransferReport:
    """Evaluate the model-free optimizer on its own objective and on the model-based one

    No weights change. ``pre`` uses the model-free agent's objective, ``post``
    the model-based agent's objective with the model-free optimizer, and the
    reference is the model-based agent acting on its own objective.
    """
    if mf_agent.env_spec.name != mb_agent.env_spec.name:
        raise CompatibilityError(f"checkpoints were trained on different environments: {mf_agent.env_spec.name} vs {mb_agent.env_spec.name}")

    squash = mf_agent.cfg.objective.squash
    pre, pre_actions, _, _ = _run_episodes(env, mf_agent, mf_agent, episodes, seed, squash)
    post, post_actions, improvement, trace = _run_episodes(env, mf_agent, mb_agent, episodes, seed, squash)
    reference, _, _, _ = _run_episodes(env, mb_agent, mb_agent, episodes, seed, squash)

    report = TransferReport(
        env=env.spec.name,
        optimizer_kind=mf_agent.kind,
        pre_returns=pre,
        post_returns=post,
        reference_returns=reference,
        post_improvement=improvement,
        actions_identical=bool(pre_actions.shape == post_actions.shape and np.array_equal(pre_actions, post_actions)),
        objective_independent=mf_agent.kind == "direct",
    )
    if mb_agent.models is not None and trace is not None:
        state = env.reset(substream(seed, "eval"))[None, :]
        for k, (mu, log_sigma) in enumerate(zip(trace.mus, trace.log_sigmas)):
            lam = PolicyParams(Tensor(mu), Tensor(log_sigma))
            report.trajectories[k] = planned_trajectory(state, lam, mb_agent.models, mb_agent.rollout_net, mb_agent.cfg.mb.horizon, squash)[:, 0, :]
    logger.info(
        "transfer_evaluated",
        env=report.env,
        optimizer_kind=report.optimizer_kind,
        pre=float(np.mean(pre)),
        post=float(np.mean(post)),
        reference=float(np.mean(reference)),
        mean_post_improvement=report.mean_post_improvement,
    )
    return report
