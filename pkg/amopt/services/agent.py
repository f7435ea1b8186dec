"""The agent: policy optimizer, critics, temperature and optional model"""
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import structlog

from amopt import __version__
from amopt.core import autodiff as ad
from amopt.core.errors import CompatibilityError
from amopt.core.rng import substream
from amopt.core.run_config import RunConfig, dump_run_config, load_run_config
from amopt.core.storage import atomic_write_text, read_checkpoint, write_checkpoint
from amopt.models.critic import QEnsemble
from amopt.models.distributions import LOG_2, PolicyParams, SquashedGaussian
from amopt.models.dynamics import ModelPair
from amopt.models.policy import DirectPolicyNet, IterativePolicyNet
from amopt.services.envs import EnvSpec, make_env
from amopt.services.model_based import RetraceValue, SoftValueEstimator
from amopt.services.objective import ActionValue, PessimisticQ, PolicyObjective, Temperature
from amopt.services.policy_optimizers import OptimizeTrace, PolicyOptimizer, make_optimizer

logger = structlog.get_logger(__name__)

PolicyNet = Union[DirectPolicyNet, IterativePolicyNet]


class Agent:
    """Everything a run trains, addressed by checkpoint prefix"""

    def __init__(self, cfg: RunConfig, env_spec: EnvSpec, rng: np.random.Generator):
        self.cfg = cfg
        self.env_spec = env_spec
        state_dim, action_dim = env_spec.state_dim, env_spec.action_dim
        net_cfg = cfg.networks

        if cfg.optimizer_kind == "iterative":
            self.policy: PolicyNet = IterativePolicyNet(state_dim, action_dim, rng, hidden_units=net_cfg.hidden_units)
        else:
            self.policy = DirectPolicyNet(state_dim, action_dim, rng, hidden_units=net_cfg.hidden_units)
        self.ens = QEnsemble(net_cfg.q_arch, state_dim, action_dim, rng, net_cfg.q_hidden_units)

        target_entropy = cfg.objective.target_entropy
        if target_entropy is None:
            target_entropy = -float(action_dim)
        self.temperature = Temperature(cfg.objective.alpha, target_entropy, cfg.objective.alpha_lr, cfg.objective.learn_alpha)

        self.models: Optional[ModelPair] = None
        self.rollout_policy: Optional[DirectPolicyNet] = None
        if cfg.mb.enabled:
            self.models = ModelPair(state_dim, action_dim, rng, hidden_units=net_cfg.model_hidden_units)
            if self.kind == "iterative":
                self.rollout_policy = DirectPolicyNet(state_dim, action_dim, rng, hidden_units=net_cfg.hidden_units)

        self.dist = SquashedGaussian(cfg.objective.squash)

    @property
    def kind(self) -> str:
        return self.cfg.optimizer_kind

    @property
    def action_dim(self) -> int:
        return self.env_spec.action_dim

    @property
    def rollout_net(self) -> DirectPolicyNet:
        """Direct network used inside model rollouts"""
        return self.rollout_policy if self.rollout_policy is not None else self.policy

    def action_value(self, rng: Optional[np.random.Generator] = None) -> ActionValue:
        """The value the policy optimizer maximizes when acting"""
        beta = self.cfg.objective.beta_act
        if self.models is None:
            return PessimisticQ(self.ens, beta)
        mb = self.cfg.mb
        estimator = SoftValueEstimator(self.ens, self.rollout_net, beta, self.temperature.alpha, squash=self.cfg.objective.squash)
        rng = rng if rng is not None else substream(self.cfg.seed, "retrace")
        return RetraceValue(self.models, estimator, self.cfg.train.gamma, mb.retrace_lambda, mb.horizon, rng, mb.n_rollouts)

    def objective(self, value: Optional[ActionValue] = None) -> PolicyObjective:
        n_samples = self.cfg.iterative.n_action_samples if self.kind == "iterative" else self.cfg.objective.n_action_samples
        return PolicyObjective.from_config(
            value if value is not None else self.action_value(),
            self.cfg.objective,
            alpha=self.temperature.alpha,
            n_samples=n_samples,
        )

    def optimizer(self) -> PolicyOptimizer:
        return make_optimizer(self.kind, self.action_dim, net=self.policy, iter_cfg=self.cfg.iterative)

    def policy_params(
        self,
        states: np.ndarray,
        rng: np.random.Generator,
        value: Optional[ActionValue] = None,
        n_iterations: Optional[int] = None,
    ) -> Tuple[PolicyParams, OptimizeTrace]:
        value = value if value is not None else self.action_value(rng)
        with ad.no_grad():
            return self.optimizer().optimize(np.atleast_2d(states), self.objective(value), rng, n_iterations=n_iterations)

    def act(self, state: np.ndarray, rng: np.random.Generator, deterministic: bool = False) -> Tuple[np.ndarray, OptimizeTrace]:
        lam, trace = self.policy_params(state[None, :], rng)
        if deterministic:
            return self.dist.mode(lam)[0], trace
        noise = rng.standard_normal(lam.mu.shape)
        with ad.no_grad():
            action = self.dist.sample(lam, noise).a.data[0]
        return action, trace

    def sample(self, states: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Stochastic actions and their log-ratio to the uniform prior"""
        lam, _ = self.policy_params(states, rng)
        noise = rng.standard_normal(lam.mu.shape)
        with ad.no_grad():
            sample = self.dist.sample(lam, noise)
            log_ratio = self.dist.log_prob(lam, sample).data + self.action_dim * LOG_2
        return sample.a.data.copy(), log_ratio

    def modules(self) -> Dict[str, object]:
        modules: Dict[str, object] = {"policy": self.policy, **self.ens.modules(), "temperature": self.temperature}
        if self.models is not None:
            modules.update(self.models.modules())
        if self.rollout_policy is not None:
            modules["rollout_policy"] = self.rollout_policy
        return modules

    def state_dict(self) -> Dict[str, np.ndarray]:
        values: Dict[str, np.ndarray] = {}
        for prefix, module in self.modules().items():
            for name, value in module.state_dict().items():
                values[f"{prefix}/{name}"] = value
        return values

    def load_state_dict(self, values: Dict[str, np.ndarray]) -> None:
        grouped: Dict[str, Dict[str, np.ndarray]] = {}
        for key, value in values.items():
            prefix, _, name = key.partition("/")
            grouped.setdefault(prefix, {})[name] = value
        modules = self.modules()
        unexpected = sorted(set(grouped) - set(modules))
        if unexpected:
            raise CompatibilityError(f"checkpoint holds networks this configuration does not build: {unexpected}")
        for prefix, module in modules.items():
            if prefix not in grouped:
                raise CompatibilityError(f"checkpoint is missing network '{prefix}'")
            module.load_state_dict(grouped[prefix])


def build_agent(cfg: RunConfig) -> Agent:
    env = make_env(cfg.env.name)
    return Agent(cfg, env.spec, substream(cfg.seed, "init"))


def save_agent(agent: Agent, directory: Union[str, Path], step: int) -> Path:
    """Checkpoint directory with params.amopt, meta.json and the resolved config"""
    directory = Path(directory)
    meta = {
        "env": agent.env_spec.name,
        "optimizer_kind": agent.kind,
        "step": int(step),
        "version": __version__,
    }
    write_checkpoint(directory, agent.state_dict(), meta)
    atomic_write_text(directory / "config.env", dump_run_config(agent.cfg))
    return directory


def load_agent(directory: Union[str, Path], cfg: Optional[RunConfig] = None) -> Tuple[Agent, dict]:
    directory = Path(directory)
    values, meta = read_checkpoint(directory)
    cfg = cfg if cfg is not None else load_run_config(directory / "config.env")
    if meta.get("env") != cfg.env.name:
        raise CompatibilityError(f"checkpoint env {meta.get('env')} does not match its config env {cfg.env.name}")
    agent = build_agent(cfg)
    agent.load_state_dict(values)
    logger.info("checkpoint_loaded", path=str(directory), env=cfg.env.name, optimizer_kind=agent.kind, step=meta.get("step"))
    return agent, meta
