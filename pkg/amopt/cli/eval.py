"""`amopt eval`: diagnostics against a frozen checkpoint"""
import argparse
from pathlib import Path
from typing import List, Optional, Tuple

import structlog

from amopt.core.errors import ConfigError
from amopt.core.rng import substream
from amopt.core.run_config import overlay_eval
from amopt.services.agent import Agent, load_agent
from amopt.services.envs import make_env
from amopt.services.evaluation import (
    amortization_gap,
    collect_on_policy_states,
    improvement_curve,
    mode_analysis,
    objective_slice_2d,
    optimizer_comparison,
    refinement_path,
    trace_curve,
    value_bias,
)
from amopt.services.objective import PessimisticQ
from amopt.services.policy_optimizers import OptimizerKind, make_optimizer
from amopt.services.reports import (
    write_bias_report,
    write_comparison_report,
    write_gap_report,
    write_improvement_report,
    write_mode_report,
    write_slice_report,
)

logger = structlog.get_logger(__name__)

EVAL_KINDS = ("gap", "bias", "modes", "compare", "slice", "improvement")


def register(subparsers) -> None:
    parser = subparsers.add_parser("eval", help="Run a diagnostic on a checkpoint")
    parser.add_argument("kind", choices=EVAL_KINDS)
    parser.add_argument("--checkpoint", required=True, help="Checkpoint directory (params.amopt + meta.json)")
    parser.add_argument("--out", default=None, help="Report directory (default: <run>/reports/<kind>_step<n>)")
    parser.add_argument("--config", default=None, help="Overrides for eval.* keys only")
    parser.add_argument("--states", type=int, default=None, help="Number of on-policy states")
    parser.add_argument("--dims", default="0,1", help="Mean components of the slice, as i,j")
    parser.add_argument("--grid", type=int, default=None, help="Slice grid size per axis")
    parser.add_argument("--optimizers", default=None, help="Comma-separated optimizer kinds to compare (default: <agent kind>,adam,cem)")
    parser.add_argument("--budget", type=int, default=None, help="Iterations per optimizer in compare")
    parser.add_argument("--extra-iterations", type=int, default=None, help="Additional amortized iterations for gap")
    parser.set_defaults(handler=cmd_eval)


def parse_dims(text: str) -> Tuple[int, int]:
    try:
        i, j = (int(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"--dims expects two integers 'i,j', got '{text}'") from None
    return i, j


def parse_optimizers(text: str) -> List[str]:
    names = [name.strip() for name in text.split(",") if name.strip()]
    valid = {kind.value for kind in OptimizerKind}
    unknown = [name for name in names if name not in valid]
    if not names or unknown:
        raise ConfigError(f"--optimizers must list kinds from {sorted(valid)}, got '{text}'")
    return names


def run_dir_of(checkpoint: Path) -> Path:
    return checkpoint.parent.parent if checkpoint.parent.name == "checkpoints" else checkpoint


def default_out(checkpoint: Path, kind: str, step: Optional[int]) -> Path:
    return run_dir_of(checkpoint) / "reports" / f"{kind}_step{step}"


def run_eval(agent: Agent, kind: str, args: argparse.Namespace, out_dir: Path) -> List[Path]:
    cfg = agent.cfg
    ecfg = cfg.eval
    seed = cfg.seed
    env = make_env(cfg.env.name)
    n_states = args.states if args.states is not None else ecfg.n_states
    states = collect_on_policy_states(agent, env, n_states, substream(seed, "diagnostic-states"))
    rng = substream(seed, "diagnostics")

    if kind == "gap":
        extra = args.extra_iterations if args.extra_iterations is not None else 0
        n_iterations = cfg.iterative.n_iterations + extra if agent.kind == "iterative" and extra else None
        report = amortization_gap(agent.optimizer(), states, agent.objective(), rng, ecfg.gap_lr, ecfg.gap_steps, n_iterations)
        return [write_gap_report(report, out_dir)]

    if kind == "bias":
        bias = value_bias(
            env, agent, PessimisticQ(agent.ens, 1.0), cfg.train.gamma, agent.temperature.alpha, seed,
            n_pairs=ecfg.n_pairs, n_mc=ecfg.n_mc,
        )
        return [write_bias_report(bias, out_dir)]

    if kind == "modes":
        modes = mode_analysis(agent.optimizer(), states, agent.objective(), rng, ecfg.n_runs, ecfg.histogram_bins)
        return write_mode_report(modes, out_dir)

    if kind == "compare":
        optimizers = {
            name: make_optimizer(
                name, agent.action_dim, net=agent.policy, iter_cfg=cfg.iterative,
                adam_lr=ecfg.adam_lr, cem_pop=ecfg.cem_pop, cem_elite=ecfg.cem_elite, cem_step=ecfg.cem_step,
            )
            for name in parse_optimizers(args.optimizers or f"{agent.kind},adam,cem")
        }
        budget = args.budget if args.budget is not None else ecfg.compare_budget
        comparison = optimizer_comparison(optimizers, states, agent.objective(), budget, seed)
        return write_comparison_report(comparison, out_dir)

    if kind == "improvement":
        optimizer = agent.optimizer()
        objective = agent.objective()
        traces = [optimizer.optimize(states, objective, rng)[1] for _ in range(ecfg.n_runs)]
        metrics = run_dir_of(Path(args.checkpoint)) / "metrics.csv"
        training = improvement_curve(metrics) if metrics.is_file() else None
        return write_improvement_report(trace_curve(traces), out_dir, training)

    dims = parse_dims(args.dims)
    grid = args.grid if args.grid is not None else ecfg.grid
    objective = agent.objective()
    lam_base, _ = agent.policy_params(states[:1], rng)
    report = objective_slice_2d(states[0], lam_base, dims, grid, objective, rng, bound=ecfg.slice_bounds)
    if agent.kind == "iterative":
        report.path = refinement_path(agent.optimizer(), states[0], lam_base, dims, objective, rng)
    return write_slice_report(report, out_dir)


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = Path(args.checkpoint)
    agent, meta = load_agent(checkpoint)
    if args.config:
        agent.cfg = overlay_eval(agent.cfg, args.config)
    out_dir = Path(args.out) if args.out else default_out(checkpoint, args.kind, meta.get("step"))
    out_dir.mkdir(parents=True, exist_ok=True)

    paths = run_eval(agent, args.kind, args, out_dir)
    logger.info("eval_finished", kind=args.kind, out_dir=str(out_dir), files=[p.name for p in paths])
    for path in paths:
        print(path)
    return 0
