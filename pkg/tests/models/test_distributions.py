"""Tanh-squashed Gaussian: densities, KL to the uniform prior and reparameterized gradients"""
import math

import numpy as np
import pytest
from scipy import integrate

from amopt.core import autodiff as ad
from amopt.core.autodiff import Tensor, check_gradients
from amopt.core.errors import NumericalError, ShapeError
from amopt.models.distributions import LOG_2, PolicyParams, SquashedGaussian, gaussian_kl, kl_to_uniform


def _density(lam: PolicyParams, squash: bool = True):
    dist = SquashedGaussian(squash)

    def pdf(a):
        sample = dist.action_sample(lam, np.array([[a]]))
        return math.exp(dist.log_prob(lam, sample).item())

    return pdf


@pytest.mark.parametrize("mu,sigma", [(0.0, 1.0), (0.7, 0.3), (-1.2, 2.0)])
def test_squashed_density_integrates_to_one(mu, sigma):
    lam = PolicyParams.from_sigma([[mu]], [[sigma]])
    total, _ = integrate.quad(_density(lam), -1.0, 1.0, limit=200)
    assert total == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("mu,sigma", [(0.0, 1.0), (0.5, 0.4)])
def test_kl_to_uniform_matches_quadrature(mu, sigma, rng):
    lam = PolicyParams.from_sigma([[mu]], [[sigma]])
    pdf = _density(lam)

    def integrand(a):
        p = pdf(a)
        return p * (math.log(p) + LOG_2) if p > 0 else 0.0

    exact, _ = integrate.quad(integrand, -1.0 + 1e-12, 1.0 - 1e-12, limit=200)
    estimate = kl_to_uniform(lam, 1_000_000, rng).item()
    assert estimate == pytest.approx(exact, abs=5e-3)
    assert exact >= 0.0


def test_unsquashed_entropy_is_gaussian(rng):
    lam = PolicyParams.from_sigma(np.zeros((1, 2)), np.full((1, 2), 0.5))
    noise = rng.standard_normal((400_000, 1, 2))
    entropy = SquashedGaussian(squash=False).entropy(lam, noise).item()
    exact = 2 * (0.5 * math.log(2 * math.pi * math.e) + math.log(0.5))
    assert entropy == pytest.approx(exact, abs=1e-2)


def test_samples_stay_inside_the_box(rng):
    lam = PolicyParams.from_sigma(rng.normal(scale=3.0, size=(50, 3)), np.full((50, 3), 2.0))
    a = SquashedGaussian().sample(lam, rng.standard_normal((10, 50, 3))).a.data
    assert np.all(np.abs(a) <= 1.0)


def test_reparameterized_gradients(rng):
    noise = rng.standard_normal((4, 3, 2))

    def objective(mu, log_sigma):
        lam = PolicyParams(mu, log_sigma)
        sample = SquashedGaussian().sample(lam, noise)
        return ad.sum_(ad.square(sample.a - 0.3)) + ad.sum_(SquashedGaussian().log_prob(lam, sample))

    for _ in range(20):
        mu = rng.normal(size=(3, 2))
        log_sigma = rng.uniform(-1.0, 0.5, size=(3, 2))
        assert check_gradients(objective, [mu, log_sigma]) < 1e-4


def test_gaussian_kl_closed_form():
    p = PolicyParams.from_sigma([[0.0]], [[1.0]])
    q = PolicyParams.from_sigma([[1.0]], [[2.0]])
    exact = math.log(2.0) + (1.0 + 1.0) / (2 * 4.0) - 0.5
    assert gaussian_kl(p, q).item() == pytest.approx(exact)
    assert gaussian_kl(p, p).item() == pytest.approx(0.0)


def test_vector_layout_roundtrip():
    lam = PolicyParams(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[-1.0, -2.0]])))
    vector = lam.as_vector()
    np.testing.assert_array_equal(vector.data, [[1.0, 2.0, -1.0, -2.0]])
    back = PolicyParams.from_vector(vector)
    np.testing.assert_array_equal(back.mu.data, lam.mu.data)
    with pytest.raises(ShapeError):
        PolicyParams.from_vector(Tensor(np.zeros((1, 3))))


def test_invalid_sigma_and_noise():
    with pytest.raises(NumericalError):
        PolicyParams.from_sigma([[0.0]], [[0.0]])
    lam = PolicyParams.initial(2, 3)
    with pytest.raises(ShapeError):
        SquashedGaussian().sample(lam, np.zeros((2, 2)))


def test_mode_is_tanh_of_mean():
    lam = PolicyParams.from_sigma([[0.5, -2.0]], [[1.0, 1.0]])
    np.testing.assert_allclose(SquashedGaussian().mode(lam), np.tanh([[0.5, -2.0]]))


@pytest.mark.parametrize("squash", [True, False])
def test_log_density_at_the_mean_of_a_standard_gaussian(squash):
    dist = SquashedGaussian(squash)
    lam = PolicyParams.initial(1, 1)
    value = dist.log_prob(lam, dist.sample(lam, np.zeros((1, 1)))).item()
    assert value == pytest.approx(-0.5 * math.log(2 * math.pi))
    assert value == pytest.approx(-0.91894, abs=1e-5)
