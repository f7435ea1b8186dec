"""Soft actor-critic training with a direct or iterative policy optimizer"""
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import structlog

from amopt.core import autodiff as ad
from amopt.core.config import settings
from amopt.core.errors import NumericalError
from amopt.core.rng import RngStreams
from amopt.core.run_config import RunConfig, dump_run_config
from amopt.core.storage import CsvLog, atomic_write_text
from amopt.models.distributions import LOG_2, PolicyParams
from amopt.models.policy import direct_forward
from amopt.services.agent import Agent, save_agent
from amopt.services.envs import Env, Transition, make_env
from amopt.services.model_based import (
    RetraceValue,
    SoftValueEstimator,
    distill_rollout_policy,
    model_update,
    pretrain_model,
)
from amopt.services.objective import (
    PolicyObjective,
    entropy_estimate,
    pessimistic_q_tensor,
    temperature_update,
)
from amopt.services.policy_optimizers import optimize_adam, optimize_iterative
from amopt.services.replay import Batch, ReplayBuffer

logger = structlog.get_logger(__name__)

METRIC_COLUMNS = ["step", "episode_return", "J_improvement", "alpha", "q_loss", "policy_loss", "wall_clock_ns"]
MB_METRIC_COLUMNS = ["model_nll_dyn", "model_nll_rew", "distill_kl"]
EVAL_COLUMNS = ["step", "eval_return_mean", "eval_return_std", "wall_clock_ns"]


def _check_finite(name: str, value: float) -> float:
    if not np.isfinite(value):
        raise NumericalError(f"non-finite {name}: {value}")
    return value


# ---------------------------------------------------------------------------
# Updates
# ---------------------------------------------------------------------------


def critic_targets(batch: Batch, agent: Agent, cfg: RunConfig, rng: np.random.Generator) -> np.ndarray:
    """y = r + gamma (1 - done) (pessimistic target Q(s', a') - alpha (log pi(a'|s') + |A| log 2))

    With model-based value targets, non-terminal targets come from Retrace
    over the learned model instead.
    """
    alpha = agent.temperature.alpha
    beta_train = cfg.objective.beta_train
    with ad.no_grad():
        if agent.models is not None and cfg.mb.mb_value_targets:
            estimator = SoftValueEstimator(agent.ens, agent.rollout_net, beta_train, alpha, target=True, squash=cfg.objective.squash)
            retrace = RetraceValue(agent.models, estimator, cfg.train.gamma, cfg.mb.retrace_lambda, cfg.mb.horizon, rng, cfg.mb.n_rollouts)
            y = retrace.value(batch.s, batch.a).data
            return np.where(batch.done > 0, batch.r, y)

        lam, _ = agent.policy_params(batch.s_next, rng)
        noise = rng.standard_normal(lam.mu.shape)
        sample = agent.dist.sample(lam, noise)
        log_ratio = agent.dist.log_prob(lam, sample).data + agent.action_dim * LOG_2
        q_next = pessimistic_q_tensor(agent.ens.values(batch.s_next, sample.a, target=True), beta_train).data
    return batch.r + cfg.train.gamma * (1.0 - batch.done) * (q_next - alpha * log_ratio)


def critic_update(batch: Batch, agent: Agent, cfg: RunConfig, rng: np.random.Generator) -> float:
    """One Adam step on both live critics; loss is the sum of their mean squared errors"""
    y = critic_targets(batch, agent, cfg, rng)
    with ad.enable_grad():
        q1, q2 = agent.ens.values(batch.s, batch.a)
        loss = ad.mean(ad.square(q1 - y)) + ad.mean(ad.square(q2 - y))
        _check_finite("critic loss", loss.item())
        ad.backward(loss)
    agent.ens.q1.params.adam_step(cfg.train.lr)
    agent.ens.q2.params.adam_step(cfg.train.lr)
    return loss.item()


@dataclass
class PolicyStep:
    loss: float
    entropy: float
    lam: PolicyParams
    improvement: float = 0.0


def policy_update(states: np.ndarray, agent: Agent, cfg: RunConfig, rng: np.random.Generator) -> PolicyStep:
    """One Adam step on -mean_s J(lambda(s))

    For the iterative optimizer lambda is the unrolled K-step output; the
    objective gradients fed to the network inside the unroll are constants.
    Gradients that reach the critics are discarded.
    """
    states = np.asarray(states, dtype=np.float64)
    objective = agent.objective(agent.action_value(rng))
    loss_objective = PolicyObjective(objective.value, objective.alpha, cfg.objective.n_loss_samples, objective.squash)
    improvement = 0.0
    with ad.enable_grad():
        if agent.kind == "iterative":
            lam, trace = optimize_iterative(agent.policy, states, objective, cfg.iterative, rng, differentiable=True)
            improvement = float(trace.improvement().mean())
        else:
            lam = direct_forward(agent.policy, states)
        noise = loss_objective.draw(rng, states.shape[0], agent.action_dim)
        loss = -ad.mean(loss_objective.estimate(lam, states, noise))
        _check_finite("policy loss", loss.item())
        ad.backward(loss)
    agent.ens.zero_grad()
    if agent.models is not None:
        for module in agent.models.modules().values():
            module.params.zero_grad()
    if agent.rollout_policy is not None:
        agent.rollout_policy.params.zero_grad()
    agent.policy.params.adam_step(cfg.train.lr)
    entropy = float(entropy_estimate(lam, noise, cfg.objective.squash).mean())
    return PolicyStep(loss=loss.item(), entropy=entropy, lam=lam.detach(), improvement=improvement)


def polyak_update(ens, tau: float) -> None:
    """target <- (1 - tau) target + tau live, per parameter"""
    for live, target in zip(ens.live, ens.targets):
        for name, param in target.params.items():
            param.data = (1.0 - tau) * param.data + tau * live.params[name].data


def update_step(agent: Agent, replay: ReplayBuffer, cfg: RunConfig, streams: RngStreams) -> Dict[str, float]:
    batch = replay.sample(cfg.train.batch, streams["replay-sampling"])
    stats: Dict[str, float] = {}
    if agent.models is not None:
        stats["model_nll_dyn"], stats["model_nll_rew"] = model_update(batch, agent.models, cfg.train.lr)
    stats["q_loss"] = critic_update(batch, agent, cfg, streams["policy-noise"])
    step = policy_update(batch.s, agent, cfg, streams["policy-noise"])
    stats["policy_loss"] = step.loss
    temperature_update(agent.temperature, step.entropy)
    if agent.rollout_policy is not None:
        stats["distill_kl"] = distill_rollout_policy(agent.rollout_policy, step.lam, batch.s, cfg.train.lr)
    polyak_update(agent.ens, cfg.train.tau)
    return stats


# ---------------------------------------------------------------------------
# Evaluation episodes
# ---------------------------------------------------------------------------


def evaluate_policy(
    agent: Agent,
    env: Env,
    episodes: int,
    rng: np.random.Generator,
    extra_iterations: int = 0,
    extra_adam_steps: int = 0,
    adam_lr: float = 5e-3,
) -> np.ndarray:
    """Returns of episodes acting with tanh(mu) of the optimized lambda

    ``extra_iterations`` adds amortized iterations at test time (iterative
    only); ``extra_adam_steps`` refines lambda further with gradient ascent.
    """
    n_iterations = None
    if agent.kind == "iterative" and extra_iterations:
        n_iterations = agent.cfg.iterative.n_iterations + extra_iterations
    returns = []
    for _ in range(episodes):
        state, total = env.reset(rng), 0.0
        for t in range(env.spec.horizon):
            s = state[None, :]
            value = agent.action_value(rng)
            lam, _ = agent.policy_params(s, rng, value=value, n_iterations=n_iterations)
            if extra_adam_steps:
                lam, _ = optimize_adam(lam.detach(), s, agent.objective(value), extra_adam_steps, adam_lr, rng)
            result = env.step(state, agent.dist.mode(lam)[0], t)
            total += result.reward
            state = result.next_state
            if result.done:
                break
        returns.append(total)
    return np.array(returns)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class RunArtifacts:
    run_dir: Path
    metrics_path: Path
    eval_path: Path
    config_path: Path
    checkpoints: List[Path] = field(default_factory=list)
    final_step: int = 0
    agent: Optional[Agent] = None


@dataclass
class EpisodeStats:
    started_ns: int = 0
    episode_return: float = 0.0
    improvements: List[float] = field(default_factory=list)
    updates: List[Dict[str, float]] = field(default_factory=list)

    def row(self, step: int, alpha: float) -> Dict[str, float]:
        row: Dict[str, float] = {
            "step": step,
            "episode_return": self.episode_return,
            "J_improvement": float(np.mean(self.improvements)) if self.improvements else 0.0,
            "alpha": alpha,
            "wall_clock_ns": time.perf_counter_ns() - self.started_ns if settings.RECORD_WALL_CLOCK else 0,
        }
        for key in ["q_loss", "policy_loss"] + MB_METRIC_COLUMNS:
            values = [u[key] for u in self.updates if key in u]
            row[key] = float(np.mean(values)) if values else 0.0
        return row


def _write_snapshot(run_dir: Path, step: int, metrics: CsvLog, error: NumericalError) -> None:
    snapshot = {"step": step, "error": error.detail, "last_metrics": metrics.last()}
    atomic_write_text(run_dir / "nan_snapshot.json", json.dumps(snapshot, indent=2, sort_keys=True, default=float) + "\n")
    logger.error("numerical_failure", step=step, detail=error.detail)


def train(cfg: RunConfig, run_dir) -> RunArtifacts:
    """Uniform random steps, then one policy step and one update per env step"""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config_path = run_dir / "config.env"
    atomic_write_text(config_path, dump_run_config(cfg))

    env = make_env(cfg.env.name)
    streams = RngStreams(cfg.seed)
    agent = Agent(cfg, env.spec, streams["init"])
    tcfg = cfg.train
    replay = ReplayBuffer(env.spec.state_dim, env.spec.action_dim, min(tcfg.replay_capacity, tcfg.total_steps))

    columns = METRIC_COLUMNS + (MB_METRIC_COLUMNS if cfg.mb.enabled else [])
    metrics = CsvLog(run_dir / "metrics.csv", columns)
    evals = CsvLog(run_dir / "eval.csv", EVAL_COLUMNS)
    artifacts = RunArtifacts(run_dir, metrics.path, evals.path, config_path, agent=agent)

    logger.info(
        "training_started",
        env=cfg.env.name,
        optimizer_kind=agent.kind,
        seed=cfg.seed,
        total_steps=tcfg.total_steps,
        n_iterations=cfg.iterative.n_iterations if agent.kind == "iterative" else 0,
        run_dir=str(run_dir),
    )

    state, t = env.reset(streams["env"]), 0
    episode = EpisodeStats(started_ns=time.perf_counter_ns())
    step = 0
    try:
        for step in range(1, tcfg.total_steps + 1):
            if step <= tcfg.initial_random_steps:
                action = streams["policy-noise"].uniform(-1.0, 1.0, size=env.spec.action_dim)
            else:
                action, trace = agent.act(state, streams["policy-noise"])
                episode.improvements.append(float(trace.improvement().mean()))

            result = env.step(state, action, t)
            replay.add(Transition(state, action, result.reward, result.next_state, result.done))
            episode.episode_return += result.reward

            if agent.models is not None and step == tcfg.initial_random_steps and cfg.mb.pretrain_updates:
                pretrain_model(agent.models, replay, cfg.mb.pretrain_updates, tcfg.batch, tcfg.lr, streams["replay-sampling"])

            if step > tcfg.initial_random_steps:
                for _ in range(tcfg.updates_per_env_step):
                    episode.updates.append(update_step(agent, replay, cfg, streams))

            if result.done:
                row = episode.row(step, agent.temperature.alpha)
                metrics.append(row)
                logger.debug("episode_finished", **row)
                state, t = env.reset(streams["env"]), 0
                episode = EpisodeStats(started_ns=time.perf_counter_ns())
            else:
                state, t = result.next_state, t + 1

            if step % tcfg.eval_every == 0:
                started = time.perf_counter_ns()
                returns = evaluate_policy(agent, env, tcfg.eval_episodes, streams.fresh("eval"))
                evals.append({
                    "step": step,
                    "eval_return_mean": float(returns.mean()),
                    "eval_return_std": float(returns.std()),
                    "wall_clock_ns": time.perf_counter_ns() - started if settings.RECORD_WALL_CLOCK else 0,
                })
                evals.flush()
                metrics.flush()
                logger.info("evaluation_finished", step=step, eval_return_mean=float(returns.mean()), alpha=agent.temperature.alpha)

            if step % tcfg.checkpoint_every == 0 or step == tcfg.total_steps:
                metrics.flush()
                artifacts.checkpoints.append(save_agent(agent, run_dir / "checkpoints" / f"step_{step}", step))
    except NumericalError as e:
        metrics.flush()
        _write_snapshot(run_dir, step, metrics, e)
        raise

    metrics.flush()
    evals.flush()
    artifacts.final_step = step
    logger.info("training_finished", run_dir=str(run_dir), steps=step, episodes=len(metrics.rows))
    return artifacts
