"""`amopt train`: run training from a config file"""
import argparse
from pathlib import Path
from typing import Optional

import structlog

from amopt.core.config import Settings
from amopt.core.run_config import RunConfig, load_run_config
from amopt.services.training import train

logger = structlog.get_logger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="Train an agent from a run config")
    parser.add_argument("--config", required=True, help="Flat section.key = value run config")
    parser.add_argument("--out", default=None, help="Run directory (default: RUNS_DIR/<env>_<kind>_seed<seed>)")
    parser.set_defaults(handler=cmd_train)


def resolve_run_dir(cfg: RunConfig, out: Optional[str], settings: Settings) -> Path:
    if out:
        return Path(out)
    if cfg.out_dir:
        return Path(cfg.out_dir)
    return Path(settings.RUNS_DIR) / f"{cfg.env.name}_{cfg.optimizer_kind}_seed{cfg.seed}"


def cmd_train(args: argparse.Namespace) -> int:
    settings = Settings()
    cfg = load_run_config(args.config)
    if settings.SEED is not None:
        cfg = cfg.with_seed(settings.SEED)
    run_dir = resolve_run_dir(cfg, args.out, settings)
    artifacts = train(cfg, run_dir)
    logger.info("run_finished", run_dir=str(artifacts.run_dir), steps=artifacts.final_step)
    print(artifacts.run_dir)
    return 0
