"""Policy optimizers: direct and iterative amortization, Adam and CEM

Every optimizer maximizes the same per-state objective J(lambda) and
records an OptimizeTrace. Iterative, Adam and CEM draw the first action
noise of every step before anything else, so under a shared seed and a
shared initialization they report the same iteration-0 value.
"""
import contextlib
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import structlog

from amopt.core import autodiff as ad
from amopt.core.autodiff import ParamStore, Tensor
from amopt.core.config import settings
from amopt.core.errors import ConfigError, NumericalError, ShapeError
from amopt.core.run_config import IterOptConfig
from amopt.core.storage import write_csv
from amopt.models.distributions import LOG_SIGMA_MAX, LOG_SIGMA_MIN, PolicyParams
from amopt.models.policy import DirectPolicyNet, IterativePolicyNet, direct_forward, iterative_forward
from amopt.services.objective import PolicyObjective, objective_samples

logger = structlog.get_logger(__name__)

DIVERGENCE_LIMIT = 1e6
CEM_SIGMA_FLOOR = 1e-3
ITERATION_ZERO_NOTE = "iteration 0 is J at the initialization, before any update"


def _now() -> int:
    return time.perf_counter_ns() if settings.RECORD_WALL_CLOCK else 0


@dataclass
class OptimizeTrace:
    """Per-iteration snapshots; entry k holds lambda and J before update k"""

    kind: str
    mus: List[np.ndarray] = field(default_factory=list)
    log_sigmas: List[np.ndarray] = field(default_factory=list)
    objectives: List[np.ndarray] = field(default_factory=list)
    wall_clock_ns: List[int] = field(default_factory=list)

    def record(self, lam: PolicyParams, objective: np.ndarray, started_ns: int) -> None:
        objective = np.asarray(objective, dtype=np.float64)
        if not np.all(np.isfinite(objective)):
            raise NumericalError(f"{self.kind}: non-finite objective at iteration {len(self.objectives)}")
        self.mus.append(lam.mu.data.copy())
        self.log_sigmas.append(lam.log_sigma.data.copy())
        self.objectives.append(objective.copy())
        self.wall_clock_ns.append(_now() - started_ns if started_ns else 0)

    def __len__(self) -> int:
        return len(self.objectives)

    @property
    def n_iterations(self) -> int:
        return len(self.objectives) - 1

    def as_array(self) -> np.ndarray:
        """[iterations + 1, states]"""
        return np.stack(self.objectives)

    def best_so_far(self) -> np.ndarray:
        return np.maximum.accumulate(self.as_array(), axis=0)

    def mean_objective(self) -> np.ndarray:
        return self.as_array().mean(axis=1)

    def improvement(self) -> np.ndarray:
        """J after the last update minus J at the initialization, per state"""
        objectives = self.as_array()
        return objectives[-1] - objectives[0]

    def to_csv(self, path: Union[str, Path]) -> Path:
        rows = [(k, float(j.mean()), ns) for k, (j, ns) in enumerate(zip(self.objectives, self.wall_clock_ns))]
        return write_csv(path, ["iteration", "J", "wall_clock_ns"], rows, comments=[f"optimizer={self.kind}", ITERATION_ZERO_NOTE])


def gated_update(lam: PolicyParams, omega, delta) -> PolicyParams:
    """lambda <- omega * lambda + (1 - omega) * delta in (mu, log sigma) space"""
    vector = lam.as_vector()
    omega, delta = ad.as_tensor(omega), ad.as_tensor(delta)
    if omega.shape != vector.shape or delta.shape != vector.shape:
        raise ShapeError("gated_update", f"lambda {vector.shape}, omega {omega.shape}, delta {delta.shape}")
    return PolicyParams.from_vector(ad.convex_combine(omega, vector, delta))


def _clamped(lam: PolicyParams) -> PolicyParams:
    return PolicyParams(lam.mu, ad.clamp(lam.log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX))


def optimize_direct(net: DirectPolicyNet, s: np.ndarray, objective: Optional[PolicyObjective] = None, rng: Optional[np.random.Generator] = None) -> Tuple[PolicyParams, OptimizeTrace]:
    """One forward pass; the trace holds a single entry"""
    started = _now()
    lam = direct_forward(net, s)
    trace = OptimizeTrace(kind="direct")
    if objective is None or rng is None:
        objective_value = np.zeros(lam.mu.shape[0])
    else:
        objective_value = objective.evaluate(lam, s, objective.draw(rng, lam.mu.shape[0], net.action_dim))
    trace.record(lam, objective_value, started)
    return lam, trace


def optimize_iterative(
    net: IterativePolicyNet,
    s: np.ndarray,
    objective: PolicyObjective,
    cfg: IterOptConfig,
    rng: np.random.Generator,
    n_iterations: Optional[int] = None,
    differentiable: bool = False,
    frozen_mask: Optional[np.ndarray] = None,
    lam0: Optional[PolicyParams] = None,
) -> Tuple[PolicyParams, OptimizeTrace]:
    """Refine lambda with the learned update network

    With ``differentiable=True`` the returned lambda keeps the unrolled chain
    back to the network parameters; the objective gradients fed to the network
    are always constants. ``frozen_mask`` ([2|A|] or [B, 2|A|], laid out as
    [mu, log sigma]) marks components that keep their initial value.
    """
    s = np.asarray(s, dtype=np.float64)
    batch, action_dim = s.shape[0], net.action_dim
    n_iterations = cfg.n_iterations if n_iterations is None else n_iterations
    lam = PolicyParams.initial(batch, action_dim, cfg.init_mu, cfg.init_sigma) if lam0 is None else lam0
    keep = None if frozen_mask is None else np.broadcast_to(np.asarray(frozen_mask, dtype=np.float64), (batch, 2 * action_dim))

    trace = OptimizeTrace(kind="iterative")
    scope = contextlib.nullcontext() if differentiable else ad.no_grad()
    with scope:
        for k in range(n_iterations):
            started = _now()
            noise = objective.draw(rng, batch, action_dim)
            objective_value, gradient = objective.gradient(lam.detach(), s, noise)
            if not np.all(np.isfinite(gradient)):
                raise NumericalError(f"non-finite objective gradient at iteration {k}")
            trace.record(lam, objective_value, started)

            update = iterative_forward(net, s, lam, gradient)
            proposed = gated_update(lam, update.omega, update.delta)
            if keep is not None:
                proposed = PolicyParams.from_vector(ad.convex_combine(keep, lam.as_vector(), proposed.as_vector()))
            lam = _clamped(proposed)
            if not lam.is_finite():
                raise NumericalError(f"non-finite policy parameters after iteration {k}")

        started = _now()
        final = objective.evaluate(lam, s, objective.draw(rng, batch, action_dim))
        trace.record(lam, final, started)
    return lam, trace


def _check_divergence(kind: str, mu: np.ndarray, log_sigma: np.ndarray, step: int) -> None:
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(log_sigma))):
        raise NumericalError(f"{kind}: non-finite policy parameters at step {step}")
    if max(np.abs(mu).max(), np.abs(log_sigma).max()) > DIVERGENCE_LIMIT:
        raise NumericalError(f"{kind}: policy parameters diverged (|lambda| > {DIVERGENCE_LIMIT:g}) at step {step}")


def optimize_adam(
    lam0: PolicyParams,
    s: np.ndarray,
    objective: PolicyObjective,
    steps: int,
    lr: float,
    rng: np.random.Generator,
) -> Tuple[PolicyParams, OptimizeTrace]:
    """Gradient ascent on J over (mu, log sigma) with fresh noise every step"""
    if steps < 1:
        raise ConfigError("optimize_adam: steps must be at least 1")
    s = np.asarray(s, dtype=np.float64)
    batch, action_dim = lam0.mu.shape
    store = ParamStore()
    mu = store.add("mu", lam0.mu.data.copy())
    log_sigma = store.add("log_sigma", lam0.log_sigma.data.copy())

    trace = OptimizeTrace(kind="adam")
    for step in range(steps):
        started = _now()
        noise = objective.draw(rng, batch, action_dim)
        with ad.enable_grad():
            j = objective.estimate(PolicyParams(mu, log_sigma), s, noise)
            trace.record(PolicyParams(mu, log_sigma), j.data, started)
            g_mu, g_log_sigma = ad.grad(ad.sum_(j), [mu, log_sigma])
        # ascent: Adam descends on the negated gradient
        mu.grad, log_sigma.grad = -g_mu, -g_log_sigma
        store.adam_step(lr)
        log_sigma.data = np.clip(log_sigma.data, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        _check_divergence("adam", mu.data, log_sigma.data, step)

    lam = PolicyParams(Tensor(mu.data.copy()), Tensor(log_sigma.data.copy()))
    started = _now()
    trace.record(lam, objective.evaluate(lam, s, objective.draw(rng, batch, action_dim)), started)
    return lam, trace


def cem_fit(u: np.ndarray, scores: np.ndarray, n_elite: int) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and floored std of the top-scoring pre-squash samples

    ``u`` is [pop, B, |A|], ``scores`` is [pop, B].
    """
    order = np.argsort(-scores, axis=0, kind="stable")[:n_elite]
    elite = np.take_along_axis(u, order[..., None], axis=0)
    return elite.mean(axis=0), np.maximum(elite.std(axis=0), CEM_SIGMA_FLOOR)


def optimize_cem(
    lam0: PolicyParams,
    s: np.ndarray,
    objective: PolicyObjective,
    steps: int,
    pop: int,
    elite: int,
    step_size: float,
    rng: np.random.Generator,
) -> Tuple[PolicyParams, OptimizeTrace]:
    """Cross-entropy method in pre-squash space, interpolating toward the elite fit"""
    if elite > pop:
        raise ConfigError(f"optimize_cem: elite ({elite}) must not exceed pop ({pop})")
    s = np.asarray(s, dtype=np.float64)
    batch, action_dim = lam0.mu.shape
    mu, log_sigma = lam0.mu.data.copy(), lam0.log_sigma.data.copy()

    trace = OptimizeTrace(kind="cem")
    with ad.no_grad():
        for step in range(steps):
            started = _now()
            lam = PolicyParams(Tensor(mu), Tensor(log_sigma))
            trace.record(lam, objective.evaluate(lam, s, objective.draw(rng, batch, action_dim)), started)

            noise = rng.standard_normal((pop, batch, action_dim))
            u, scores = objective_samples(lam, s, objective.value, noise, objective.alpha, objective.squash)
            elite_mu, elite_sigma = cem_fit(u.data, scores.data, elite)
            mu = mu + step_size * (elite_mu - mu)
            log_sigma = np.clip(log_sigma + step_size * (np.log(elite_sigma) - log_sigma), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
            _check_divergence("cem", mu, log_sigma, step)

        lam = PolicyParams(Tensor(mu), Tensor(log_sigma))
        started = _now()
        trace.record(lam, objective.evaluate(lam, s, objective.draw(rng, batch, action_dim)), started)
    return lam, trace


class OptimizerKind(str, Enum):
    DIRECT = "direct"
    ITERATIVE = "iterative"
    ADAM = "adam"
    CEM = "cem"


class PolicyOptimizer:
    """Uniform front end so diagnostics can loop over optimizer kinds"""

    kind: OptimizerKind

    def optimize(
        self,
        s: np.ndarray,
        objective: PolicyObjective,
        rng: np.random.Generator,
        n_iterations: Optional[int] = None,
    ) -> Tuple[PolicyParams, OptimizeTrace]:
        raise NotImplementedError


class DirectOptimizer(PolicyOptimizer):
    kind = OptimizerKind.DIRECT

    def __init__(self, net: DirectPolicyNet):
        self.net = net

    def optimize(self, s, objective, rng, n_iterations=None):
        with ad.no_grad():
            return optimize_direct(self.net, s, objective, rng)


class IterativeOptimizer(PolicyOptimizer):
    kind = OptimizerKind.ITERATIVE

    def __init__(self, net: IterativePolicyNet, cfg: IterOptConfig):
        self.net = net
        self.cfg = cfg

    def optimize(self, s, objective, rng, n_iterations=None):
        return optimize_iterative(self.net, s, objective, self.cfg, rng, n_iterations=n_iterations)


class AdamOptimizer(PolicyOptimizer):
    kind = OptimizerKind.ADAM

    def __init__(self, action_dim: int, lr: float = 0.01, steps: int = 50, init_mu: float = 0.0, init_sigma: float = 1.0):
        self.action_dim = action_dim
        self.lr = lr
        self.steps = steps
        self.init_mu = init_mu
        self.init_sigma = init_sigma

    def optimize(self, s, objective, rng, n_iterations=None):
        lam0 = PolicyParams.initial(np.asarray(s).shape[0], self.action_dim, self.init_mu, self.init_sigma)
        return optimize_adam(lam0, s, objective, self.steps if n_iterations is None else n_iterations, self.lr, rng)


class CEMOptimizer(PolicyOptimizer):
    kind = OptimizerKind.CEM

    def __init__(
        self,
        action_dim: int,
        pop: int = 100,
        elite: int = 10,
        step_size: float = 0.01,
        steps: int = 50,
        init_mu: float = 0.0,
        init_sigma: float = 1.0,
    ):
        self.action_dim = action_dim
        self.pop = pop
        self.elite = elite
        self.step_size = step_size
        self.steps = steps
        self.init_mu = init_mu
        self.init_sigma = init_sigma

    def optimize(self, s, objective, rng, n_iterations=None):
        lam0 = PolicyParams.initial(np.asarray(s).shape[0], self.action_dim, self.init_mu, self.init_sigma)
        steps = self.steps if n_iterations is None else n_iterations
        return optimize_cem(lam0, s, objective, steps, self.pop, self.elite, self.step_size, rng)


def make_optimizer(
    kind: Union[str, OptimizerKind],
    action_dim: int,
    net=None,
    iter_cfg: Optional[IterOptConfig] = None,
    adam_lr: float = 0.01,
    cem_pop: int = 100,
    cem_elite: int = 10,
    cem_step: float = 0.01,
) -> PolicyOptimizer:
    try:
        kind = OptimizerKind(kind)
    except ValueError:
        raise ConfigError(f"unknown optimizer kind: {kind}") from None

    iter_cfg = iter_cfg or IterOptConfig()
    if kind == OptimizerKind.DIRECT:
        if not isinstance(net, DirectPolicyNet):
            raise ConfigError("the direct optimizer needs a direct policy network")
        return DirectOptimizer(net)
    if kind == OptimizerKind.ITERATIVE:
        if not isinstance(net, IterativePolicyNet):
            raise ConfigError("the iterative optimizer needs an iterative policy network")
        return IterativeOptimizer(net, iter_cfg)
    if kind == OptimizerKind.ADAM:
        return AdamOptimizer(action_dim, lr=adam_lr, init_mu=iter_cfg.init_mu, init_sigma=iter_cfg.init_sigma)
    return CEMOptimizer(
        action_dim, pop=cem_pop, elite=cem_elite, step_size=cem_step,
        init_mu=iter_cfg.init_mu, init_sigma=iter_cfg.init_sigma,
    )
