"""Reverse-mode differentiation: gradients, graph rules and Adam"""
import numpy as np
import pytest

from amopt.core import autodiff as ad
from amopt.core.autodiff import ParamStore, Tensor, check_gradients
from amopt.core.errors import GraphError, NumericalError, ShapeError

TOL = 1e-4


UNARY_OPS = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "exp": ad.exp,
    "elu": ad.elu,
    "square": ad.square,
    "leaky_relu": ad.leaky_relu,
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_unary_gradients(name, rng):
    op = UNARY_OPS[name]
    for _ in range(20):
        x = rng.normal(size=(3, 4))
        # keep kinks of piecewise ops away from the sample points
        x = np.where(np.abs(x) < 1e-2, 0.5, x)
        assert check_gradients(lambda t: ad.sum_(op(t) * 1.3), [x]) < TOL


def test_log_and_sqrt_gradients(rng):
    for _ in range(20):
        x = rng.uniform(0.2, 3.0, size=(5,))
        assert check_gradients(lambda t: ad.sum_(ad.log(t)), [x]) < TOL
        assert check_gradients(lambda t: ad.sum_(ad.sqrt(t)), [x]) < TOL


def test_binary_broadcast_gradients(rng):
    for _ in range(20):
        a = rng.normal(size=(4, 3))
        b = rng.normal(size=(3,))
        c = rng.uniform(0.5, 2.0, size=(4, 1))
        fn = lambda x, y, z: ad.sum_((x * y - y) / z + x)  # noqa: E731
        assert check_gradients(fn, [a, b, c]) < TOL


def test_affine_matmul_gradients(rng):
    for _ in range(20):
        x = rng.normal(size=(5, 3))
        w = rng.normal(size=(3, 2))
        b = rng.normal(size=(2,))
        assert check_gradients(lambda x_, w_, b_: ad.sum_(ad.tanh(ad.affine(x_, w_, b_))), [x, w, b]) < TOL
        assert check_gradients(lambda x_, w_: ad.mean(ad.matmul(x_, w_)), [x, w]) < TOL


def test_reductions_and_indexing_gradients(rng):
    x = rng.normal(size=(3, 4))
    assert check_gradients(lambda t: ad.sum_(ad.mean(t, axis=0) * ad.sum_(t, axis=1)[0]), [x]) < TOL
    assert check_gradients(lambda t: ad.sum_(ad.square(ad.reshape(t, (4, 3))[1:])), [x]) < TOL
    assert check_gradients(lambda t: ad.sum_(ad.concat([t, ad.tanh(t)], axis=-1)), [x]) < TOL


def test_layer_norm_gradients(rng):
    for _ in range(20):
        x = rng.normal(size=(4, 6))
        weights = rng.normal(size=(4, 6))
        assert check_gradients(lambda t: ad.sum_(ad.layer_norm(t) * weights), [x]) < TOL


def test_convex_combine_gradients(rng):
    for _ in range(20):
        w = rng.uniform(0.05, 0.95, size=(3, 2))
        x = rng.normal(size=(3, 2))
        y = rng.normal(size=(3, 2))
        assert check_gradients(lambda w_, x_, y_: ad.sum_(ad.square(ad.convex_combine(w_, x_, y_))), [w, x, y]) < TOL


def test_convex_combine_endpoints_and_bounds(rng):
    w = rng.uniform(0.0, 1.0, size=100_000)
    x = rng.normal(scale=10.0, size=100_000)
    y = rng.normal(scale=10.0, size=100_000)
    out = ad.convex_combine(w, x, y).data
    assert np.all(out >= np.minimum(x, y))
    assert np.all(out <= np.maximum(x, y))
    np.testing.assert_array_equal(ad.convex_combine(np.ones(5), x[:5], y[:5]).data, x[:5])
    np.testing.assert_array_equal(ad.convex_combine(np.zeros(5), x[:5], y[:5]).data, y[:5])


def test_clamp_passes_gradient_inside_only():
    x = Tensor(np.array([-2.0, 0.0, 2.0]), requires_grad=True)
    (g,) = ad.grad(ad.sum_(ad.clamp(x, -1.0, 1.0)), [x])
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


def test_backward_accumulates_and_grad_does_not():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    ad.backward(ad.sum_(x * x))
    ad.backward(ad.sum_(x * x))
    np.testing.assert_allclose(x.grad, [4.0, 8.0])
    (g,) = ad.grad(ad.sum_(x * x), [x])
    np.testing.assert_allclose(g, [2.0, 4.0])
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_backward_on_leaf_or_vector_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        ad.backward(x)
    with pytest.raises(GraphError):
        ad.backward(x * 2.0)


def test_shared_subexpression_counts_every_path():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * x
    (g,) = ad.grad(y + y * x, [x])
    # d/dx (x^2 + x^3) = 2x + 3x^2
    assert g == pytest.approx(2 * 3.0 + 3 * 9.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.sum_(x * 3.0)
    assert not y.requires_grad
    with ad.no_grad():
        with ad.enable_grad():
            z = ad.sum_(x * 3.0)
    assert z.requires_grad


def test_detach_stops_gradient():
    x = Tensor(np.array([1.5]), requires_grad=True)
    (g,) = ad.grad(ad.sum_(x * ad.detach(x)), [x])
    np.testing.assert_allclose(g, [1.5])


def test_incompatible_shapes_raise():
    with pytest.raises(ShapeError):
        ad.add(np.ones((2, 3)), np.ones((4,)))


def test_adam_descends_a_quadratic():
    store = ParamStore()
    x = store.add("x", np.array([3.0, -2.0]))
    for _ in range(500):
        ad.backward(ad.sum_(ad.square(x)))
        store.adam_step(0.05)
    np.testing.assert_allclose(x.data, 0.0, atol=1e-2)
    assert x.grad is None
    assert store.step == 500


def test_adam_first_step_moves_by_lr_against_the_gradient_sign():
    store = ParamStore()
    x = store.add("x", np.array([0.5, 0.5, 0.5]))
    x.grad = np.array([1.0, -4.0, 0.25])
    store.adam_step(1e-3)
    np.testing.assert_allclose(x.data - 0.5, [-1e-3, 1e-3, -1e-3], rtol=1e-6)


def test_adam_zero_gradient_advances_step_only():
    store = ParamStore()
    x = store.add("x", np.array([1.5, -2.0]))
    store.adam_step(1e-3)
    x.grad = np.zeros(2)
    store.adam_step(1e-3)
    np.testing.assert_array_equal(x.data, [1.5, -2.0])
    assert store.step == 2


def test_adam_second_step_is_no_larger_than_first():
    store = ParamStore()
    x = store.add("x", np.array([2.0]))
    steps = []
    for _ in range(2):
        before = x.data.copy()
        x.grad = np.array([1.0])
        store.adam_step(1e-3)
        steps.append(abs(float(x.data[0] - before[0])))
    assert steps[0] == pytest.approx(1e-3, rel=1e-6)
    assert steps[1] <= steps[0] * (1 + 1e-6)


def test_adam_refuses_nan_gradient():
    store = ParamStore()
    x = store.add("weights", np.zeros(2))
    x.grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericalError, match="weights"):
        store.adam_step(0.1)


def test_param_store_state_dict_roundtrip():
    a, b = ParamStore(), ParamStore()
    a.add("w", np.arange(3.0))
    b.add("w", np.zeros(3))
    b.copy_from(a)
    np.testing.assert_array_equal(b["w"].data, [0.0, 1.0, 2.0])
    with pytest.raises(GraphError):
        b.load_state_dict({"v": np.zeros(3)})
    with pytest.raises(ShapeError):
        b.load_state_dict({"w": np.zeros(4)})
    with pytest.raises(GraphError):
        a.add("w", np.zeros(1))
