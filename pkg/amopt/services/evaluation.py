"""Diagnostics: amortization gap, value bias, policy modes, objective slices, optimizer comparison"""
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import structlog

from amopt.core import autodiff as ad
from amopt.core.autodiff import Tensor
from amopt.core.errors import ConfigError
from amopt.core.rng import substream
from amopt.core.storage import read_csv
from amopt.models.distributions import PolicyParams, SquashedGaussian
from amopt.services.envs import Env, StochasticPolicy, mc_return
from amopt.services.objective import ActionValue, PolicyObjective
from amopt.services.policy_optimizers import IterativeOptimizer, OptimizeTrace, PolicyOptimizer, optimize_adam, optimize_iterative

logger = structlog.get_logger(__name__)

SIGMA_SPACE_NOTE = "lambda = (mu, log sigma); sigma is optimized in log space"


# ---------------------------------------------------------------------------
# Amortization gap
# ---------------------------------------------------------------------------


@dataclass
class GapReport:
    j_amortized: np.ndarray
    j_optimized: np.ndarray
    settings: Dict[str, object] = field(default_factory=dict)

    @property
    def gaps(self) -> np.ndarray:
        return self.j_optimized - self.j_amortized

    @property
    def mean(self) -> float:
        return float(self.gaps.mean())

    @property
    def std(self) -> float:
        return float(self.gaps.std())


def amortization_gap(
    optimizer: PolicyOptimizer,
    states: np.ndarray,
    objective: PolicyObjective,
    rng: np.random.Generator,
    lr: float = 5e-3,
    steps: int = 100,
    n_iterations: Optional[int] = None,
) -> GapReport:
    """Gradient ascent from the amortized lambda; gap = best J found - J at the start

    Both J values come from the same ascent trace, so every gap is >= 0.
    """
    lam, _ = optimizer.optimize(states, objective, rng, n_iterations=n_iterations)
    _, trace = optimize_adam(lam.detach(), states, objective, steps, lr, rng)
    report = GapReport(
        j_amortized=trace.objectives[0].copy(),
        j_optimized=trace.best_so_far()[-1].copy(),
        settings={
            "optimizer": optimizer.kind.value,
            "n_iterations": n_iterations,
            "adam_lr": lr,
            "adam_steps": steps,
            "states": int(np.asarray(states).shape[0]),
        },
    )
    logger.info("amortization_gap", optimizer=optimizer.kind.value, n_iterations=n_iterations, mean=report.mean, std=report.std)
    return report


# ---------------------------------------------------------------------------
# Value bias
# ---------------------------------------------------------------------------


@dataclass
class BiasReport:
    q_estimates: np.ndarray
    mc_returns: np.ndarray
    mc_stderr: np.ndarray

    @property
    def biases(self) -> np.ndarray:
        return self.q_estimates - self.mc_returns

    @property
    def mean(self) -> float:
        return float(self.biases.mean())

    @property
    def std(self) -> float:
        return float(self.biases.std())


def collect_uniform_pairs(env: Env, n_pairs: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(states, actions, time steps) visited by a uniform random policy"""
    states, actions, times = [], [], []
    state, t = env.reset(rng), 0
    while len(states) < n_pairs:
        action = rng.uniform(-1.0, 1.0, size=env.spec.action_dim)
        states.append(state)
        actions.append(action)
        times.append(t)
        result = env.step(state, action, t)
        if result.done:
            state, t = env.reset(rng), 0
        else:
            state, t = result.next_state, t + 1
    return np.array(states), np.array(actions), np.array(times)


def value_bias(
    env: Env,
    policy: StochasticPolicy,
    value: ActionValue,
    gamma: float,
    alpha: float,
    seed: int,
    n_pairs: int = 100,
    n_mc: int = 100,
) -> BiasReport:
    """Critic estimate minus a Monte-Carlo soft return on uniformly collected pairs"""
    states, actions, times = collect_uniform_pairs(env, n_pairs, substream(seed, "bias-pairs"))
    with ad.no_grad():
        q = value.value(states, Tensor(actions)).data.copy()
    mc_rng = substream(seed, "bias-rollouts")
    returns, errors = [], []
    for s, a, t in zip(states, actions, times):
        mean, stderr = mc_return(env, policy, s, a, gamma, alpha, n_mc, mc_rng, t=int(t))
        returns.append(mean)
        errors.append(stderr)
    report = BiasReport(q, np.array(returns), np.array(errors))
    logger.info("value_bias", mean=report.mean, std=report.std, pairs=n_pairs, mc_samples=n_mc)
    return report


# ---------------------------------------------------------------------------
# Policy modes
# ---------------------------------------------------------------------------


@dataclass
class ModeReport:
    distances: np.ndarray  # [states, runs, runs]
    means: np.ndarray  # [runs, states, |A|] after tanh
    histogram: np.ndarray
    bin_edges: np.ndarray
    action_dim: int

    @property
    def max_distance(self) -> float:
        return float(self.distances.max())

    @property
    def max_per_state(self) -> np.ndarray:
        return self.distances.max(axis=(1, 2))

    @property
    def max_state(self) -> int:
        return int(np.argmax(self.max_per_state))

    @property
    def bound(self) -> float:
        return 2.0 * math.sqrt(self.action_dim)

    def pairwise(self) -> List[Tuple[int, int, int, float]]:
        runs = self.distances.shape[1]
        return [
            (b, i, j, float(self.distances[b, i, j]))
            for b in range(self.distances.shape[0])
            for i, j in combinations(range(runs), 2)
        ]


def mode_analysis(
    optimizer: PolicyOptimizer,
    states: np.ndarray,
    objective: PolicyObjective,
    rng: np.random.Generator,
    n_runs: int = 10,
    bins: int = 20,
) -> ModeReport:
    """Distances between tanh-transformed means across repeated optimizations of each state"""
    dist = SquashedGaussian(objective.squash)
    means = np.stack([dist.mode(optimizer.optimize(states, objective, rng)[0]) for _ in range(n_runs)])
    diffs = means[:, None, :, :] - means[None, :, :, :]
    distances = np.sqrt(np.sum(diffs * diffs, axis=-1)).transpose(2, 0, 1)

    action_dim = means.shape[-1]
    upper = np.triu_indices(n_runs, k=1)
    values = distances[:, upper[0], upper[1]].ravel()
    histogram, edges = np.histogram(values, bins=bins, range=(0.0, 2.0 * math.sqrt(action_dim)))
    report = ModeReport(distances, means, histogram, edges, action_dim)
    logger.info("mode_analysis", optimizer=optimizer.kind.value, max_distance=report.max_distance, max_state=report.max_state)
    return report


# ---------------------------------------------------------------------------
# Objective slices
# ---------------------------------------------------------------------------


@dataclass
class SliceReport:
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray  # values[a, b] = J at mu_i = xs[a], mu_j = ys[b]
    dims: Tuple[int, int]
    path: Optional[np.ndarray] = None  # refinement iterates [(mu_i, mu_j)]


def symmetric_grid(bound: float, n: int) -> np.ndarray:
    """n points on [-bound, bound], exactly antisymmetric about 0"""
    xs = bound * np.linspace(-1.0, 1.0, n)
    return 0.5 * (xs - xs[::-1])


def objective_slice_2d(
    state: np.ndarray,
    lam_base: PolicyParams,
    dims: Tuple[int, int],
    grid: int,
    objective: PolicyObjective,
    rng: np.random.Generator,
    bound: float = 3.0,
) -> SliceReport:
    """J over a grid of two mean components, the rest of lambda frozen

    All cells share the same antithetic noise (eps and -eps), so a surface
    symmetric under a -> -a gives a grid symmetric under mu -> -mu.
    """
    i, j = dims
    action_dim = lam_base.action_dim
    if i == j:
        raise ConfigError(f"slice dims must differ, got ({i}, {j})")
    if not (0 <= i < action_dim and 0 <= j < action_dim):
        raise ConfigError(f"slice dims ({i}, {j}) outside the action dimension {action_dim}")

    xs = symmetric_grid(bound, grid)
    half = max(objective.n_samples // 2, 1)
    eps = rng.standard_normal((half, 1, action_dim))
    noise = np.broadcast_to(np.concatenate([eps, -eps]), (2 * half, grid * grid, action_dim))

    mu = np.repeat(lam_base.mu.data[:1], grid * grid, axis=0)
    log_sigma = np.repeat(lam_base.log_sigma.data[:1], grid * grid, axis=0)
    mu[:, i] = np.repeat(xs, grid)
    mu[:, j] = np.tile(xs, grid)
    states = np.repeat(np.asarray(state, dtype=np.float64).reshape(1, -1), grid * grid, axis=0)
    values = objective.evaluate(PolicyParams(Tensor(mu), Tensor(log_sigma)), states, noise).reshape(grid, grid)
    return SliceReport(xs=xs, ys=xs.copy(), values=values, dims=(i, j))


def refinement_path(optimizer: IterativeOptimizer, state: np.ndarray, lam_base: PolicyParams, dims: Tuple[int, int], objective: PolicyObjective, rng: np.random.Generator, n_iterations: Optional[int] = None) -> np.ndarray:
    """Iterative refinement restricted to two mean components; returns [(mu_i, mu_j)] per iterate"""
    action_dim = lam_base.action_dim
    frozen = np.ones(2 * action_dim)
    frozen[list(dims)] = 0.0
    _, trace = optimize_iterative(
        optimizer.net, np.atleast_2d(state), objective, optimizer.cfg, rng,
        n_iterations=n_iterations, frozen_mask=frozen, lam0=lam_base.detach(),
    )
    return np.array([[mu[0, dims[0]], mu[0, dims[1]]] for mu in trace.mus])


# ---------------------------------------------------------------------------
# Optimizer comparison
# ---------------------------------------------------------------------------


@dataclass
class ComparisonReport:
    curves: Dict[str, np.ndarray]  # mean J per iteration
    best_so_far: Dict[str, np.ndarray]
    wall_clock_ns: Dict[str, np.ndarray]

    def iterations_to_reach(self, name: str, level: float) -> Optional[int]:
        """First iteration whose mean J is at least ``level``"""
        hits = np.nonzero(self.curves[name] >= level)[0]
        return int(hits[0]) if hits.size else None


def optimizer_comparison(
    optimizers: Mapping[str, PolicyOptimizer],
    states: np.ndarray,
    objective: PolicyObjective,
    budget: int,
    seed: int,
) -> ComparisonReport:
    """Mean J-versus-iteration curves; every optimizer gets the same noise stream"""
    curves, best, clock = {}, {}, {}
    for name, optimizer in optimizers.items():
        _, trace = optimizer.optimize(states, objective, substream(seed, "compare"), n_iterations=budget)
        curves[name] = trace.mean_objective()
        best[name] = trace.best_so_far().mean(axis=1)
        clock[name] = np.cumsum(trace.wall_clock_ns)
        logger.info("optimizer_compared", optimizer=name, initial=float(curves[name][0]), final=float(curves[name][-1]))
    return ComparisonReport(curves, best, clock)


# ---------------------------------------------------------------------------
# States and training curves
# ---------------------------------------------------------------------------


def collect_on_policy_states(agent, env: Env, n: int, rng: np.random.Generator) -> np.ndarray:
    """States visited by fresh evaluation episodes acting with tanh(mu)"""
    states: List[np.ndarray] = []
    while len(states) < n:
        state = env.reset(rng)
        for t in range(env.spec.horizon):
            states.append(state)
            if len(states) >= n:
                break
            action, _ = agent.act(state, rng, deterministic=True)
            result = env.step(state, action, t)
            if result.done:
                break
            state = result.next_state
    return np.array(states)


def improvement_curve(metrics_path) -> Tuple[np.ndarray, np.ndarray]:
    """(step, J_improvement) per logged episode of a training run"""
    header, rows = read_csv(Path(metrics_path))
    if "J_improvement" not in header:
        raise ConfigError(f"{metrics_path} has no J_improvement column")
    step_col, imp_col = header.index("step"), header.index("J_improvement")
    steps = np.array([int(row[step_col]) for row in rows], dtype=np.int64)
    values = np.array([float(row[imp_col]) for row in rows])
    return steps, values


def trace_curve(traces: Sequence[OptimizeTrace]) -> np.ndarray:
    """Mean improvement over the initialization, per iteration, pooled over traces"""
    return np.mean([t.mean_objective() - t.mean_objective()[0] for t in traces], axis=0)
