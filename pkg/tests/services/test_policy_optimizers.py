"""Direct, iterative, Adam and CEM policy optimizers"""
import numpy as np
import pytest

from amopt.core import autodiff as ad
from amopt.core.autodiff import Tensor
from amopt.core.errors import ConfigError, NumericalError, ShapeError
from amopt.core.run_config import IterOptConfig
from amopt.models.distributions import LOG_SIGMA_MAX, LOG_SIGMA_MIN, PolicyParams
from amopt.models.policy import DirectPolicyNet, IterativePolicyNet
from amopt.services.objective import PolicyObjective
from amopt.services.policy_optimizers import (
    OptimizeTrace,
    OptimizerKind,
    cem_fit,
    gated_update,
    make_optimizer,
    optimize_adam,
    optimize_cem,
    optimize_direct,
    optimize_iterative,
)
from amopt.services.surfaces import QuadraticSurface, TwoBumpSurface, surface_states

S, A = 2, 2
CONVERGENCE_TOLERANCE = 0.1


@pytest.fixture
def quadratic():
    return PolicyObjective(QuadraticSurface(A), alpha=0.0, n_samples=8)


def test_gated_update_endpoints_and_convexity(rng):
    n = 100_000
    lam = PolicyParams(Tensor(rng.normal(size=(n, 1))), Tensor(rng.normal(size=(n, 1))))
    delta = rng.normal(size=(n, 2))
    omega = rng.uniform(0.0, 1.0, size=(n, 2))
    out = gated_update(lam, omega, delta).as_vector().data
    vector = lam.as_vector().data
    assert np.all(out >= np.minimum(vector, delta))
    assert np.all(out <= np.maximum(vector, delta))
    np.testing.assert_array_equal(gated_update(lam, np.ones((n, 2)), delta).as_vector().data, vector)
    np.testing.assert_array_equal(gated_update(lam, np.zeros((n, 2)), delta).as_vector().data, delta)
    with pytest.raises(ShapeError):
        gated_update(lam, np.ones((n, 3)), np.zeros((n, 3)))


def test_direct_trace_has_one_entry(rng, quadratic):
    net = DirectPolicyNet(S, A, rng, hidden_units=8)
    s = rng.normal(size=(5, S))
    lam, trace = optimize_direct(net, s, quadratic, rng)
    assert len(trace) == 1
    assert trace.n_iterations == 0
    np.testing.assert_array_equal(trace.mus[0], lam.mu.data)


def test_iterative_trace_records_every_iteration(rng, quadratic):
    net = IterativePolicyNet(S, A, rng, hidden_units=8)
    cfg = IterOptConfig(n_iterations=4)
    s = rng.normal(size=(3, S))
    lam, trace = optimize_iterative(net, s, quadratic, cfg, rng)
    assert len(trace) == 5
    assert trace.as_array().shape == (5, 3)
    np.testing.assert_array_equal(trace.mus[0], 0.0)
    np.testing.assert_array_equal(trace.mus[-1], lam.mu.data)
    assert np.all(lam.log_sigma.data >= LOG_SIGMA_MIN) and np.all(lam.log_sigma.data <= LOG_SIGMA_MAX)


def test_iterative_differentiable_unroll_reaches_network(rng, quadratic):
    net = IterativePolicyNet(S, A, rng, hidden_units=8)
    s = rng.normal(size=(3, S))
    with ad.enable_grad():
        lam, _ = optimize_iterative(net, s, quadratic, IterOptConfig(n_iterations=2), rng, differentiable=True)
        loss = ad.sum_(lam.mu)
        grads = ad.grad(loss, [net.params["delta.weight"]])
    assert np.any(grads[0] != 0.0)


def test_frozen_mask_keeps_components(rng, quadratic):
    net = IterativePolicyNet(S, A, rng, hidden_units=8)
    lam0 = PolicyParams(Tensor(rng.normal(size=(2, A))), Tensor(np.full((2, A), -0.5)))
    frozen = np.array([0.0, 1.0, 1.0, 1.0])
    lam, trace = optimize_iterative(net, rng.normal(size=(2, S)), quadratic, IterOptConfig(n_iterations=3), rng, frozen_mask=frozen, lam0=lam0)
    np.testing.assert_array_equal(lam.mu.data[:, 1], lam0.mu.data[:, 1])
    np.testing.assert_array_equal(lam.log_sigma.data, lam0.log_sigma.data)
    assert not np.array_equal(lam.mu.data[:, 0], lam0.mu.data[:, 0])


def test_adam_converges_on_convex_surface(rng):
    surface = QuadraticSurface(A, target=[0.4, -0.3])
    objective = PolicyObjective(surface, alpha=0.0, n_samples=16, squash=False)
    lam, trace = optimize_adam(PolicyParams.initial(2, A), np.zeros((2, S)), objective, steps=300, lr=0.05, rng=rng)
    np.testing.assert_allclose(lam.mu.data, [[0.4, -0.3]] * 2, atol=0.05)
    assert trace.mean_objective()[-1] > trace.mean_objective()[0]
    np.testing.assert_array_equal(trace.best_so_far()[-1], trace.as_array().max(axis=0))


def test_adam_divergence_is_a_numerical_error(rng):
    class Exploding:
        def value(self, s, a):
            return ad.sum_(a, axis=-1) * 1e6

    objective = PolicyObjective(Exploding(), alpha=0.0, n_samples=2, squash=False)
    with pytest.raises(NumericalError):
        optimize_adam(PolicyParams.initial(1, A), np.zeros((1, S)), objective, steps=5, lr=1e7, rng=rng)


def test_cem_fit_picks_elite():
    u = np.array([[[0.0]], [[1.0]], [[2.0]], [[3.0]]])
    scores = np.array([[0.0], [1.0], [3.0], [2.0]])
    mean, std = cem_fit(u, scores, 2)
    np.testing.assert_allclose(mean, [[2.5]])
    np.testing.assert_allclose(std, [[0.5]])
    _, floored = cem_fit(np.zeros((4, 1, 1)), scores, 2)
    np.testing.assert_allclose(floored, 1e-3)


def test_cem_improves_two_bump_surface(rng):
    objective = PolicyObjective(TwoBumpSurface([0.6, 0.6]), alpha=0.0, n_samples=32)
    lam, trace = optimize_cem(PolicyParams.initial(4, A), np.zeros((4, S)), objective, steps=30, pop=100, elite=10, step_size=0.3, rng=rng)
    assert trace.mean_objective()[-1] > trace.mean_objective()[0]
    with pytest.raises(ConfigError):
        optimize_cem(PolicyParams.initial(1, A), np.zeros((1, S)), objective, steps=1, pop=2, elite=3, step_size=0.1, rng=rng)


def test_iteration_zero_is_shared_across_optimizers(rng):
    objective = PolicyObjective(TwoBumpSurface([0.6, 0.6]), alpha=0.5, n_samples=6)
    s = np.zeros((5, S))
    net = IterativePolicyNet(S, A, rng, hidden_units=8)
    starts = []
    for kind in ("iterative", "adam", "cem"):
        optimizer = make_optimizer(kind, A, net=net, cem_pop=10, cem_elite=2)
        _, trace = optimizer.optimize(s, objective, np.random.default_rng(3), n_iterations=3)
        starts.append(trace.objectives[0])
    np.testing.assert_array_equal(starts[0], starts[1])
    np.testing.assert_array_equal(starts[0], starts[2])


def test_trace_refuses_non_finite_objective():
    trace = OptimizeTrace(kind="adam")
    with pytest.raises(NumericalError):
        trace.record(PolicyParams.initial(1, 1), np.array([np.nan]), 0)


def test_trace_csv_notes_iteration_zero(tmp_path):
    trace = OptimizeTrace(kind="adam")
    trace.record(PolicyParams.initial(2, 1), np.array([1.0, 3.0]), 0)
    trace.record(PolicyParams.initial(2, 1), np.array([2.0, 4.0]), 0)
    text = trace.to_csv(tmp_path / "trace.csv").read_text()
    assert "iteration 0 is J at the initialization" in text
    assert "iteration,J,wall_clock_ns\n0,2.0,0\n1,3.0,0\n" in text
    np.testing.assert_array_equal(trace.improvement(), [1.0, 1.0])


def test_make_optimizer_validation(rng):
    direct = DirectPolicyNet(S, A, rng, hidden_units=8)
    assert make_optimizer("direct", A, net=direct).kind is OptimizerKind.DIRECT
    with pytest.raises(ConfigError):
        make_optimizer("iterative", A, net=direct)
    with pytest.raises(ConfigError):
        make_optimizer("lbfgs", A)
    assert make_optimizer("cem", A).kind is OptimizerKind.CEM


def test_untrained_iterative_optimizer_stays_finite(rng):
    net = IterativePolicyNet(S, A, rng, hidden_units=16)
    objective = PolicyObjective(TwoBumpSurface([0.6, 0.6]), alpha=0.5, n_samples=4)
    states = rng.normal(scale=5.0, size=(1000, S))
    lam, trace = optimize_iterative(net, states, objective, IterOptConfig(n_iterations=5), rng)
    assert lam.is_finite()
    assert np.all(np.isfinite(trace.as_array()))


def test_cem_with_zero_step_size_keeps_lambda(rng):
    objective = PolicyObjective(TwoBumpSurface([0.6, 0.6]), alpha=0.1, n_samples=4)
    lam0 = PolicyParams(Tensor(rng.normal(size=(3, A))), Tensor(np.full((3, A), -0.3)))
    lam, _ = optimize_cem(lam0, np.zeros((3, S)), objective, steps=5, pop=20, elite=4, step_size=0.0, rng=rng)
    np.testing.assert_array_equal(lam.mu.data, lam0.mu.data)
    np.testing.assert_array_equal(lam.log_sigma.data, lam0.log_sigma.data)


def test_cem_fit_without_selection_gives_sample_moments(rng):
    u = rng.normal(loc=0.4, scale=0.7, size=(50, 3, A))
    mean, std = cem_fit(u, rng.normal(size=(50, 3)), 50)
    np.testing.assert_allclose(mean, u.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(std, u.std(axis=0), atol=1e-12)


def test_cem_moves_toward_the_dominant_bump(rng):
    surface = TwoBumpSurface([0.6, 0.6], weights=(1.0, 0.3))
    axis = np.linspace(-1.0, 1.0, 201)
    grid = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, A)
    best = grid[np.argmax(surface.numpy_value(grid))]
    objective = PolicyObjective(surface, alpha=0.0, n_samples=16)
    lam, _ = optimize_cem(PolicyParams.initial(4, A), np.zeros((4, S)), objective, steps=20, pop=100, elite=10, step_size=0.3, rng=rng)
    assert np.all(np.sign(lam.mu.data) == np.sign(best))


@pytest.fixture(scope="module")
def quadratic_family():
    """An iterative optimizer trained on the quadratic surface family, with its objective"""
    rng = np.random.default_rng(0)
    objective = PolicyObjective(QuadraticSurface(A), alpha=0.5, n_samples=10, squash=False)
    cfg = IterOptConfig(n_iterations=5)
    net = IterativePolicyNet(S, A, rng, hidden_units=32)
    for _ in range(1000):
        states = surface_states(S, 32, rng)
        with ad.enable_grad():
            lam, _ = optimize_iterative(net, states, objective, cfg, rng, differentiable=True)
            loss = -ad.mean(objective.estimate(lam, states, objective.draw(rng, 32, A)))
            ad.backward(loss)
        net.params.adam_step(3e-3)
    return net, objective, cfg


@pytest.mark.slow
def test_trained_iterative_optimizer_improves_held_out_states(quadratic_family):
    net, objective, cfg = quadratic_family
    held_out = surface_states(S, 100, np.random.default_rng(1))
    _, trace = optimize_iterative(net, held_out, objective, cfg, np.random.default_rng(2))
    assert trace.improvement().mean() > 0.0


@pytest.mark.slow
def test_trained_iterative_optimizer_needs_far_fewer_steps_than_adam(quadratic_family):
    net, objective, cfg = quadratic_family
    held_out = surface_states(S, 100, np.random.default_rng(1))
    _, iterative = optimize_iterative(net, held_out, objective, cfg, np.random.default_rng(2), n_iterations=50)
    _, adam = optimize_adam(PolicyParams.initial(100, A), held_out, objective, steps=50, lr=0.01, rng=np.random.default_rng(2))

    curve = iterative.mean_objective()
    level = curve[-1] - CONVERGENCE_TOLERANCE
    reached = int(np.nonzero(curve >= level)[0][0])
    assert reached <= 10
    adam_hits = np.nonzero(adam.mean_objective() >= level)[0]
    adam_reached = int(adam_hits[0]) if adam_hits.size else adam.n_iterations + 1
    assert adam_reached >= 5 * reached
