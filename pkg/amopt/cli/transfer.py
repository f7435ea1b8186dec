"""`amopt transfer`: model-free optimizer on a model-based objective"""
import argparse
from pathlib import Path

import structlog

from amopt.services.agent import load_agent
from amopt.services.envs import make_env
from amopt.services.model_based import transfer_eval
from amopt.services.reports import write_transfer_report

logger = structlog.get_logger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("transfer", help="Zero-shot transfer from a model-free to a model-based objective")
    parser.add_argument("--mf", required=True, help="Model-free checkpoint directory")
    parser.add_argument("--mb", required=True, help="Model-based checkpoint directory")
    parser.add_argument("--out", default=None, help="Report directory (default: <mf checkpoint>/transfer)")
    parser.set_defaults(handler=cmd_transfer)


def cmd_transfer(args: argparse.Namespace) -> int:
    mf_agent, _ = load_agent(args.mf)
    mb_agent, _ = load_agent(args.mb)
    cfg = mf_agent.cfg
    report = transfer_eval(mf_agent, mb_agent, make_env(cfg.env.name), cfg.train.eval_episodes, cfg.seed)

    out_dir = Path(args.out) if args.out else Path(args.mf) / "transfer"
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in write_transfer_report(report, out_dir):
        print(path)
    logger.info("transfer_finished", out_dir=str(out_dir), objective_independent=report.objective_independent)
    return 0
