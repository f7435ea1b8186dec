"""Amortization gap, value bias, modes, slices and optimizer comparison"""
import numpy as np
import pytest

from amopt.core.autodiff import Tensor
from amopt.core.errors import ConfigError
from amopt.core.run_config import IterOptConfig
from amopt.core.storage import write_csv
from amopt.models.distributions import LOG_SIGMA_MIN, PolicyParams
from amopt.models.policy import DirectPolicyNet, IterativePolicyNet
from amopt.services.agent import build_agent
from amopt.services.envs import MultiModalBandit, PointMassTwoGoals, UniformPolicy
from amopt.services.evaluation import (
    ComparisonReport,
    amortization_gap,
    collect_on_policy_states,
    collect_uniform_pairs,
    improvement_curve,
    mode_analysis,
    objective_slice_2d,
    optimizer_comparison,
    refinement_path,
    symmetric_grid,
    trace_curve,
    value_bias,
)
from amopt.services.objective import PolicyObjective
from amopt.services.policy_optimizers import (
    AdamOptimizer,
    CEMOptimizer,
    DirectOptimizer,
    IterativeOptimizer,
    OptimizeTrace,
)
from amopt.services.surfaces import QuadraticSurface, TwoBumpSurface

TARGET = (0.5, -0.5)


class BanditReward:
    """The bandit's true reward as an action value"""

    def value(self, s, a):
        return Tensor(MultiModalBandit().reward(s, a.data))


@pytest.fixture
def quadratic():
    return PolicyObjective(QuadraticSurface(2, target=TARGET), alpha=0.0, n_samples=64)


def test_gap_is_never_negative(rng, quadratic):
    states = np.zeros((6, 1))
    report = amortization_gap(AdamOptimizer(2, steps=1), states, quadratic, rng, lr=0.05, steps=10)
    assert report.gaps.shape == (6,)
    assert np.all(report.gaps >= 0.0)
    assert report.settings["optimizer"] == "adam"
    assert report.settings["adam_steps"] == 10


def test_gap_shrinks_when_the_start_is_already_optimized(rng, quadratic):
    states = np.zeros((6, 1))
    rough = amortization_gap(AdamOptimizer(2, steps=1), states, quadratic, np.random.default_rng(1), lr=0.05, steps=50)
    tuned = amortization_gap(AdamOptimizer(2, lr=0.05, steps=300), states, quadratic, np.random.default_rng(1), lr=0.05, steps=50)
    assert tuned.mean < rough.mean
    assert tuned.mean < 0.05


def test_uniform_pairs_respect_the_horizon():
    states, actions, times = collect_uniform_pairs(PointMassTwoGoals(), 120, np.random.default_rng(0))
    assert states.shape == (120, 4) and actions.shape == (120, 2)
    assert np.all(np.abs(actions) <= 1.0)
    assert times.max() == 49 and times[50] == 0


def test_true_reward_has_no_bias_on_a_one_step_task():
    env = MultiModalBandit()
    report = value_bias(env, UniformPolicy(2), BanditReward(), gamma=0.99, alpha=0.1, seed=0, n_pairs=20, n_mc=5)
    np.testing.assert_allclose(report.biases, 0.0, atol=1e-12)
    np.testing.assert_array_equal(report.mc_stderr, 0.0)


def test_offset_value_shifts_bias_by_the_offset(offset_value):
    env = PointMassTwoGoals()
    value = QuadraticSurface(2, target=TARGET)
    base = value_bias(env, UniformPolicy(2), value, gamma=0.9, alpha=0.0, seed=4, n_pairs=10, n_mc=6)
    shifted = value_bias(env, UniformPolicy(2), offset_value(value, 2.5), gamma=0.9, alpha=0.0, seed=4, n_pairs=10, n_mc=6)
    np.testing.assert_array_equal(base.mc_returns, shifted.mc_returns)
    np.testing.assert_allclose(shifted.biases - base.biases, 2.5, atol=1e-12)
    assert shifted.mean == pytest.approx(base.mean + 2.5)


def test_direct_optimizer_has_a_single_mode(rng):
    objective = PolicyObjective(TwoBumpSurface(MultiModalBandit.CENTER), alpha=0.1, n_samples=4)
    optimizer = DirectOptimizer(DirectPolicyNet(1, 2, rng, hidden_units=8))
    report = mode_analysis(optimizer, np.zeros((3, 1)), objective, rng, n_runs=4, bins=5)
    np.testing.assert_array_equal(report.distances, 0.0)
    assert report.histogram.sum() == 3 * 6
    assert report.bound == pytest.approx(2.0 * np.sqrt(2.0))


def test_mode_distances_are_symmetric_and_bounded(rng):
    objective = PolicyObjective(TwoBumpSurface(MultiModalBandit.CENTER), alpha=0.1, n_samples=4)
    optimizer = IterativeOptimizer(IterativePolicyNet(1, 2, rng, hidden_units=8), IterOptConfig(n_iterations=3))
    report = mode_analysis(optimizer, np.zeros((5, 1)), objective, rng, n_runs=4, bins=8)
    assert report.distances.shape == (5, 4, 4)
    assert report.means.shape == (4, 5, 2)
    np.testing.assert_allclose(report.distances, report.distances.transpose(0, 2, 1))
    assert np.all(np.diagonal(report.distances, axis1=1, axis2=2) == 0.0)
    assert report.max_distance <= report.bound
    assert len(report.pairwise()) == 5 * 6
    assert report.max_per_state[report.max_state] == report.max_distance


def test_symmetric_grid_is_antisymmetric():
    xs = symmetric_grid(3.0, 41)
    np.testing.assert_array_equal(xs, -xs[::-1])
    assert xs[20] == 0.0 and xs[0] == -3.0


def test_slice_of_symmetric_surface_is_symmetric(rng):
    objective = PolicyObjective(TwoBumpSurface(MultiModalBandit.CENTER), alpha=0.2, n_samples=10)
    lam = PolicyParams.initial(1, 2, sigma=0.3)
    report = objective_slice_2d(np.zeros(1), lam, (0, 1), 9, objective, rng, bound=2.0)
    assert report.values.shape == (9, 9)
    np.testing.assert_allclose(report.values, report.values[::-1, ::-1], rtol=1e-12, atol=1e-12)
    # the two bumps sit on the diagonal, not the anti-diagonal
    assert report.values[6, 6] > report.values[6, 2]


def test_slice_peaks_at_the_quadratic_optimum(rng, quadratic):
    lam = PolicyParams(Tensor(np.zeros((1, 2))), Tensor(np.full((1, 2), LOG_SIGMA_MIN)))
    report = objective_slice_2d(np.zeros(1), lam, (0, 1), 41, quadratic, rng, bound=3.0)
    a, b = np.unravel_index(np.argmax(report.values), report.values.shape)
    best = np.arctanh(np.array(TARGET))
    assert report.xs[a] == report.xs[np.argmin(np.abs(report.xs - best[0]))]
    assert report.ys[b] == report.ys[np.argmin(np.abs(report.ys - best[1]))]


@pytest.mark.parametrize("dims", [(0, 0), (1, 1), (0, 2), (-1, 0)])
def test_slice_rejects_bad_dims(rng, quadratic, dims):
    with pytest.raises(ConfigError):
        objective_slice_2d(np.zeros(1), PolicyParams.initial(1, 2), dims, 5, quadratic, rng)


def test_refinement_path_starts_at_the_base(rng, quadratic):
    optimizer = IterativeOptimizer(IterativePolicyNet(1, 2, rng, hidden_units=8), IterOptConfig(n_iterations=4))
    lam = PolicyParams(Tensor(np.array([[0.3, -0.7]])), Tensor(np.zeros((1, 2))))
    path = refinement_path(optimizer, np.zeros(1), lam, (0, 1), quadratic, rng)
    assert path.shape == (5, 2)
    np.testing.assert_array_equal(path[0], [0.3, -0.7])


def test_identical_optimizers_give_identical_curves(quadratic):
    states = np.zeros((4, 1))
    report = optimizer_comparison(
        {"first": AdamOptimizer(2, lr=0.05), "second": AdamOptimizer(2, lr=0.05)}, states, quadratic, budget=6, seed=0
    )
    np.testing.assert_array_equal(report.curves["first"], report.curves["second"])
    assert report.curves["first"].shape == (7,)
    assert np.all(np.diff(report.best_so_far["first"]) >= -1e-12)


def test_comparison_shares_iteration_zero(quadratic):
    rng = np.random.default_rng(3)
    optimizers = {
        "iterative": IterativeOptimizer(IterativePolicyNet(1, 2, rng, hidden_units=8), IterOptConfig()),
        "adam": AdamOptimizer(2),
        "cem": CEMOptimizer(2, pop=16, elite=4),
    }
    report = optimizer_comparison(optimizers, np.zeros((4, 1)), quadratic, budget=3, seed=5)
    first = {name: curve[0] for name, curve in report.curves.items()}
    assert first["iterative"] == first["adam"] == first["cem"]


def test_iterations_to_reach():
    curve = np.array([-3.0, -2.0, -1.0, -1.5])
    report = ComparisonReport({"x": curve}, {"x": np.maximum.accumulate(curve)}, {"x": np.zeros(4)})
    assert report.iterations_to_reach("x", -2.0) == 1
    assert report.iterations_to_reach("x", -1.0) == 2
    assert report.iterations_to_reach("x", 0.0) is None


def test_improvement_curve_reads_metrics(tmp_path):
    path = write_csv(tmp_path / "metrics.csv", ["step", "J_improvement"], [(1, 0.0), (2, 0.25)])
    steps, values = improvement_curve(path)
    np.testing.assert_array_equal(steps, [1, 2])
    np.testing.assert_array_equal(values, [0.0, 0.25])
    write_csv(tmp_path / "other.csv", ["step", "loss"], [(1, 0.0)])
    with pytest.raises(ConfigError):
        improvement_curve(tmp_path / "other.csv")


def test_trace_curve_is_relative_to_initialization():
    traces = []
    for offset in (0.0, 2.0):
        trace = OptimizeTrace(kind="iterative")
        for j in (1.0, 2.0, 4.0):
            trace.record(PolicyParams.initial(2, 1), np.full(2, j + offset), 0)
        traces.append(trace)
    np.testing.assert_allclose(trace_curve(traces), [0.0, 1.0, 3.0])


def test_on_policy_states(small_config):
    agent = build_agent(small_config(**{"env.name": "point_mass_two_goals"}))
    states = collect_on_policy_states(agent, PointMassTwoGoals(), 7, np.random.default_rng(0))
    assert states.shape == (7, 4)
