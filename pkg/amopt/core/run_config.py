"""Run configuration: typed sections, flat dotted file format, resolution"""
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from amopt.core.errors import ConfigError

EnvName = Literal["multimodal_bandit", "point_mass_two_goals", "pendulum_swingup"]
OptimizerKindName = Literal["direct", "iterative"]

DEFAULT_BETA_TRAIN = {"iterative": 2.5, "direct": 1.0}


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class EnvConfig(Section):
    name: EnvName


class ObjectiveConfig(Section):
    """Temperature, pessimism and sample counts of the policy objective"""

    alpha: float = Field(1.0, gt=0)
    beta_act: float = Field(1.0, ge=0)
    beta_train: Optional[float] = Field(None, ge=0)
    n_action_samples: int = Field(10, ge=1)
    n_loss_samples: int = Field(1, ge=1)
    squash: bool = True
    target_entropy: Optional[float] = None
    alpha_lr: float = Field(3e-4, gt=0)
    learn_alpha: bool = True


class IterOptConfig(Section):
    n_iterations: int = Field(5, ge=1)
    n_action_samples: int = Field(10, ge=1)
    init_mu: float = 0.0
    init_sigma: float = Field(1.0, gt=0)


class TrainConfig(Section):
    gamma: float = Field(0.99, ge=0, le=1)
    tau: float = Field(5e-3, ge=0, le=1)
    lr: float = Field(3e-4, gt=0)
    batch: int = Field(256, ge=1)
    initial_random_steps: int = Field(5000, ge=0)
    updates_per_env_step: int = Field(1, ge=0)
    total_steps: int = Field(30000, ge=1)
    replay_capacity: int = Field(1_000_000, ge=1)
    optimizer_kind: OptimizerKindName = "direct"
    checkpoint_every: int = Field(5000, ge=1)
    eval_every: int = Field(5000, ge=1)
    eval_episodes: int = Field(5, ge=1)


class MBConfig(Section):
    """Model-based value estimation (short model rollouts with Retrace)"""

    enabled: bool = False
    horizon: int = Field(2, ge=0)
    retrace_lambda: float = Field(0.9, ge=0, le=1)
    pretrain_updates: int = Field(1000, ge=0)
    mb_value_targets: bool = True
    n_rollouts: int = Field(1, ge=1)


class NetworkConfig(Section):
    hidden_units: int = Field(256, ge=1)
    q_hidden_units: int = Field(512, ge=1)
    model_hidden_units: int = Field(256, ge=1)
    q_arch: Literal["A", "B"] = "A"


class EvalConfig(Section):
    n_states: int = Field(100, ge=1)
    gap_lr: float = Field(5e-3, gt=0)
    gap_steps: int = Field(100, ge=1)
    n_runs: int = Field(10, ge=2)
    n_pairs: int = Field(100, ge=1)
    n_mc: int = Field(100, ge=1)
    grid: int = Field(41, ge=2)
    slice_bounds: float = Field(3.0, gt=0)
    compare_budget: int = Field(50, ge=1)
    adam_lr: float = Field(0.01, gt=0)
    cem_pop: int = Field(100, ge=1)
    cem_elite: int = Field(10, ge=1)
    cem_step: float = Field(0.01, ge=0, le=1)
    histogram_bins: int = Field(20, ge=1)

    @model_validator(mode="after")
    def check_elite(self):
        if self.cem_elite > self.cem_pop:
            raise ValueError("cem_elite must not exceed cem_pop")
        return self


class RunConfig(Section):
    """Everything needed to reproduce one run"""

    seed: int = 0
    out_dir: Optional[str] = None
    env: EnvConfig
    objective: ObjectiveConfig = Field(default_factory=ObjectiveConfig)
    iterative: IterOptConfig = Field(default_factory=IterOptConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    mb: MBConfig = Field(default_factory=MBConfig)
    networks: NetworkConfig = Field(default_factory=NetworkConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def resolve_beta_train(self):
        if self.objective.beta_train is None:
            self.objective.beta_train = DEFAULT_BETA_TRAIN[self.train.optimizer_kind]
        return self

    @property
    def optimizer_kind(self) -> str:
        return self.train.optimizer_kind

    def with_seed(self, seed: int) -> "RunConfig":
        return self.model_copy(update={"seed": int(seed)})


SECTIONS = tuple(name for name, field in RunConfig.model_fields.items() if name not in ("seed", "out_dir"))


def _format_errors(error: ValidationError) -> str:
    lines: List[str] = []
    for item in error.errors():
        field = ".".join(str(part) for part in item["loc"]) or "config"
        lines.append(f"{field}: {item['msg']}")
    return "invalid configuration\n  " + "\n  ".join(lines)


def nest(flat: Dict[str, Optional[str]]) -> Dict[str, Any]:
    """{'train.gamma': '0.9'} -> {'train': {'gamma': '0.9'}}; unknown sections are refused"""
    nested: Dict[str, Any] = {"env": {}}
    for key, value in flat.items():
        if value is None or value == "":
            continue
        if "." not in key:
            if key not in ("seed", "out_dir"):
                raise ConfigError(f"{key}: unknown key")
            nested[key] = value
            continue
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"{key}: unknown section '{section}'")
        nested.setdefault(section, {})[name] = value
    return nested


def parse_run_config(flat: Dict[str, Optional[str]]) -> RunConfig:
    try:
        return RunConfig.model_validate(nest(flat))
    except ValidationError as e:
        raise ConfigError(_format_errors(e)) from None


def read_flat(path) -> Dict[str, Optional[str]]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return dict(dotenv_values(path))


def load_run_config(path) -> RunConfig:
    return parse_run_config(read_flat(path))


def overlay_eval(cfg: RunConfig, path) -> RunConfig:
    """Apply the eval.* keys of another config file; any other key is refused"""
    flat = read_flat(path)
    foreign = sorted(k for k, v in flat.items() if v not in (None, "") and not k.startswith("eval."))
    if foreign:
        raise ConfigError(f"{foreign[0]}: only eval.* keys may be overridden for a checkpoint")
    merged = flatten(cfg)
    merged.update({k: v for k, v in flat.items() if v not in (None, "")})
    return parse_run_config(merged)


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flatten(cfg: RunConfig) -> Dict[str, str]:
    flat: Dict[str, str] = {}
    for key, value in cfg.model_dump().items():
        if isinstance(value, dict):
            for name, inner in value.items():
                if inner is not None:
                    flat[f"{key}.{name}"] = _render(inner)
        elif value is not None:
            flat[key] = _render(value)
    return flat


def dump_run_config(cfg: RunConfig) -> str:
    """Resolved configuration in the flat file format, keys sorted"""
    lines = [f"{key} = {value}" for key, value in sorted(flatten(cfg).items())]
    return "\n".join(lines) + "\n"
