"""CSV and SVG artifacts for the diagnostics"""
import io
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import structlog  # noqa: E402

from amopt.core.storage import atomic_write_bytes, write_csv  # noqa: E402
from amopt.services.evaluation import (  # noqa: E402
    SIGMA_SPACE_NOTE,
    BiasReport,
    ComparisonReport,
    GapReport,
    ModeReport,
    SliceReport,
)
from amopt.services.model_based import TransferReport  # noqa: E402
from amopt.services.policy_optimizers import ITERATION_ZERO_NOTE  # noqa: E402

logger = structlog.get_logger(__name__)

PathLike = Union[str, Path]

# Fixed ids and no date metadata keep the SVG bytes reproducible
plt.rcParams["svg.hashsalt"] = "amopt"
plt.rcParams["svg.fonttype"] = "none"


def _settings_comments(settings: Dict[str, object]) -> List[str]:
    return [f"{key}={value}" for key, value in sorted(settings.items())]


def write_gap_report(report: GapReport, out_dir: PathLike) -> Path:
    rows = [(b, a, o, o - a) for b, (a, o) in enumerate(zip(report.j_amortized, report.j_optimized))]
    rows.append(("mean", "", "", report.mean))
    rows.append(("std", "", "", report.std))
    comments = _settings_comments(report.settings) + [SIGMA_SPACE_NOTE]
    return write_csv(Path(out_dir) / "gap.csv", ["state", "J_amortized", "J_optimized", "gap"], rows, comments)


def write_bias_report(report: BiasReport, out_dir: PathLike) -> Path:
    rows = [
        (k, q, mc, se, q - mc)
        for k, (q, mc, se) in enumerate(zip(report.q_estimates, report.mc_returns, report.mc_stderr))
    ]
    comments = [f"mean_bias={report.mean!r}", f"std_bias={report.std!r}"]
    return write_csv(Path(out_dir) / "bias.csv", ["pair", "Q_estimate", "mc_return", "mc_stderr", "bias"], rows, comments)


def write_mode_report(report: ModeReport, out_dir: PathLike) -> List[Path]:
    out_dir = Path(out_dir)
    comments = [f"max_distance={report.max_distance!r}", f"bound={report.bound!r}", f"max_state={report.max_state}"]
    paths = [write_csv(out_dir / "modes.csv", ["state", "run_i", "run_j", "distance"], report.pairwise(), comments)]

    edges = report.bin_edges
    rows = [(edges[k], edges[k + 1], int(count)) for k, count in enumerate(report.histogram)]
    paths.append(write_csv(out_dir / "modes_histogram.csv", ["bin_low", "bin_high", "count"], rows))

    at_max = report.means[:, report.max_state, :]
    header = ["run"] + [f"tanh_mu_{d}" for d in range(report.action_dim)]
    paths.append(write_csv(out_dir / "modes_max_state.csv", header, [(r, *row) for r, row in enumerate(at_max)], [f"state={report.max_state}"]))
    return paths


def write_slice_report(report: SliceReport, out_dir: PathLike) -> List[Path]:
    """n x n matrix; first row holds mu_j coordinates, first column mu_i coordinates"""
    out_dir = Path(out_dir)
    i, j = report.dims
    header = [f"mu_{i}\\mu_{j}"] + list(report.ys)
    rows = [(x, *values) for x, values in zip(report.xs, report.values)]
    paths = [write_csv(out_dir / "slice.csv", header, rows, [f"dims={i},{j}", SIGMA_SPACE_NOTE])]
    if report.path is not None:
        path_rows = [(k, a, b) for k, (a, b) in enumerate(report.path)]
        paths.append(write_csv(out_dir / "slice_path.csv", ["iteration", f"mu_{i}", f"mu_{j}"], path_rows))
    paths.append(slice_svg(report, out_dir / "slice.svg"))
    return paths


def write_comparison_report(report: ComparisonReport, out_dir: PathLike) -> List[Path]:
    out_dir = Path(out_dir)
    names = list(report.curves)
    length = max(len(curve) for curve in report.curves.values())
    header = ["iteration"]
    for name in names:
        header += [f"{name}_J", f"{name}_best", f"{name}_wall_clock_ns"]
    rows = []
    for k in range(length):
        row: List[object] = [k]
        for name in names:
            curve = report.curves[name]
            if k < len(curve):
                row += [curve[k], report.best_so_far[name][k], int(report.wall_clock_ns[name][k])]
            else:
                row += ["", "", ""]
        rows.append(row)
    csv_path = write_csv(out_dir / "compare.csv", header, rows, [ITERATION_ZERO_NOTE])
    return [csv_path, comparison_svg(report, out_dir / "compare.svg")]


def write_improvement_report(
    per_iteration: np.ndarray,
    out_dir: PathLike,
    training: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> List[Path]:
    """Mean J gain over the initialization per iteration, plus the training log's J_improvement when given"""
    out_dir = Path(out_dir)
    rows = [(k, value) for k, value in enumerate(per_iteration)]
    paths = [write_csv(out_dir / "improvement_iterations.csv", ["iteration", "mean_delta_J"], rows, [ITERATION_ZERO_NOTE])]
    if training is not None:
        steps, values = training
        paths.append(write_csv(out_dir / "improvement_training.csv", ["step", "J_improvement"], list(zip(steps.tolist(), values.tolist()))))
    return paths


def write_transfer_report(report: TransferReport, out_dir: PathLike) -> List[Path]:
    out_dir = Path(out_dir)
    comments = [
        f"env={report.env}",
        f"optimizer_kind={report.optimizer_kind}",
        f"objective_independent={str(report.objective_independent).lower()}",
        f"actions_identical={str(report.actions_identical).lower()}",
        f"mean_post_improvement={report.mean_post_improvement!r}",
    ]
    if report.objective_independent:
        comments.append("objective-independent optimizer: actions do not depend on the value estimate")
    rows = [
        (k, pre, post, ref)
        for k, (pre, post, ref) in enumerate(zip(report.pre_returns, report.post_returns, report.reference_returns))
    ]
    paths = [write_csv(out_dir / "transfer.csv", ["episode", "pre_return", "post_return", "mb_reference_return"], rows, comments)]
    if report.post_improvement:
        steps = [(k, value) for k, value in enumerate(report.post_improvement)]
        paths.append(write_csv(out_dir / "transfer_improvement.csv", ["step", "J_improvement"], steps))
    if report.trajectories:
        traj_rows = [
            (iteration, k, *state)
            for iteration, states in sorted(report.trajectories.items())
            for k, state in enumerate(states)
        ]
        state_dim = next(iter(report.trajectories.values())).shape[-1]
        header = ["iteration", "rollout_step"] + [f"s_{d}" for d in range(state_dim)]
        paths.append(write_csv(out_dir / "trajectories.csv", header, traj_rows))
    return paths


# ---------------------------------------------------------------------------
# Charts
# ---------------------------------------------------------------------------


def _save_svg(fig, path: Path) -> Path:
    buffer = io.BytesIO()
    fig.savefig(buffer, format="svg", metadata={"Date": None})
    plt.close(fig)
    atomic_write_bytes(path, buffer.getvalue())
    logger.debug("chart_written", path=str(path))
    return path


def slice_svg(report: SliceReport, path: PathLike, title: Optional[str] = None) -> Path:
    i, j = report.dims
    fig, ax = plt.subplots(figsize=(5, 4))
    mesh = ax.pcolormesh(report.ys, report.xs, report.values, shading="nearest", cmap="viridis")
    fig.colorbar(mesh, ax=ax, label="J")
    if report.path is not None:
        ax.plot(report.path[:, 1], report.path[:, 0], color="white", marker="o", markersize=3)
    ax.set_xlabel(f"mu_{j}")
    ax.set_ylabel(f"mu_{i}")
    ax.set_title(title or "objective slice")
    fig.tight_layout()
    return _save_svg(fig, Path(path))


def comparison_svg(report: ComparisonReport, path: PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, curve in report.curves.items():
        ax.plot(np.arange(len(curve)), curve, label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean J")
    ax.legend()
    fig.tight_layout()
    return _save_svg(fig, Path(path))
