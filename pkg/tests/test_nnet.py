import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from koopnet import nnet
from koopnet.nnet import LINEAR, RELU, DenseLayer, Mlp

from helpers import identity_net


def test_init_biases_are_zero():
    mlp = nnet.init_mlp([2, 30, 30, 2], seed=3)
    assert all(np.all(l.bias == 0.0) for l in mlp.layers)


def test_init_first_layer_bounds():
    mlp = nnet.init_mlp([4, 10, 4], seed=7)
    w = mlp.layers[0].weight
    assert w.shape == (10, 4)
    assert np.all(np.abs(w) <= 0.5)


def test_init_deterministic():
    a = nnet.init_mlp([3, 5, 2], seed=11)
    b = nnet.init_mlp([3, 5, 2], seed=11)
    for p, q in zip(a.params(), b.params()):
        assert np.array_equal(p, q)


@pytest.mark.parametrize("dims", [[], [3]])
def test_init_rejects_short_dims(dims):
    with pytest.raises(nnet.ArchitectureError):
        nnet.init_mlp(dims, seed=0)


def test_activation_layout():
    mlp = nnet.init_mlp([2, 4, 4, 1], seed=0)
    assert [l.activation for l in mlp.layers] == [RELU, RELU, LINEAR]
    with pytest.raises(nnet.ArchitectureError):
        Mlp([DenseLayer(np.eye(2), np.zeros(2), RELU)])
    with pytest.raises(nnet.ArchitectureError):
        Mlp([DenseLayer(np.eye(2), np.zeros(2), RELU), DenseLayer(np.eye(3), np.zeros(3), LINEAR)])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=2, max_size=5), st.integers(0, 2**32 - 1))
def test_init_bounds_property(dims, seed):
    mlp = nnet.init_mlp(dims, seed)
    for layer in mlp.layers:
        assert np.all(np.abs(layer.weight) <= 1.0 / np.sqrt(layer.in_dim))
        assert np.all(layer.bias == 0.0)


def test_forward_identity_linear():
    y, _ = nnet.forward(identity_net(2), np.array([[0.3, -0.7]]))
    assert np.array_equal(y, [[0.3, -0.7]])


def test_forward_relu():
    mlp = Mlp.__new__(Mlp)  # a lone ReLU layer is not a valid Mlp; bypass validation
    mlp.layers = [DenseLayer(np.eye(2), np.zeros(2), RELU)]
    y, _ = nnet.forward(mlp, np.array([[-1.0, 2.0]]))
    assert np.array_equal(y, [[0.0, 2.0]])


def test_forward_two_layers():
    mlp = Mlp([DenseLayer(2 * np.eye(2), np.zeros(2), RELU), DenseLayer(np.eye(2), np.zeros(2), LINEAR)])
    y, _ = nnet.forward(mlp, np.array([[1.0, -1.0]]))
    assert np.array_equal(y, [[2.0, 0.0]])


def test_forward_shape_error():
    with pytest.raises(nnet.ShapeError):
        nnet.forward(identity_net(2), np.zeros((4, 3)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e6), min_size=3, max_size=3))
def test_relu_idempotent_on_nonnegative(values):
    mlp = Mlp.__new__(Mlp)
    mlp.layers = [DenseLayer(np.eye(3), np.zeros(3), RELU)]
    x = np.array([values])
    y, _ = nnet.forward(mlp, x)
    assert np.array_equal(y, x)
    assert np.array_equal(nnet.forward(mlp, y)[0], y)


def test_backward_linear_unit_derivative():
    mlp = Mlp([DenseLayer(np.array([[0.5, -1.0], [2.0, 3.0]]), np.zeros(2), LINEAR)])
    _, cache = nnet.forward(mlp, np.array([[1.0, 0.0]]))
    grads, _ = nnet.backward(mlp, cache, np.array([[1.0, 0.0]]))
    assert np.array_equal(grads[0], [[1.0, 0.0], [0.0, 0.0]])


def test_backward_zero_grad_out():
    mlp = nnet.init_mlp([3, 6, 2], seed=1)
    _, cache = nnet.forward(mlp, np.ones((4, 3)))
    grads, gin = nnet.backward(mlp, cache, np.zeros((4, 2)))
    assert all(np.all(g == 0.0) for g in grads)
    assert np.all(gin == 0.0)


def test_backward_cache_mismatch():
    a = nnet.init_mlp([3, 4, 2], seed=0)
    b = nnet.init_mlp([3, 4, 2], seed=1)
    _, cache = nnet.forward(a, np.ones((2, 3)))
    with pytest.raises(nnet.CacheError):
        nnet.backward(b, cache, np.ones((2, 2)))


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    mlp = nnet.init_mlp([3, 7, 5, 2], seed)
    for layer in mlp.layers:
        layer.bias[:] = rng.normal(scale=0.3, size=layer.bias.shape)
    x = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 2))

    def loss_and_grad(params):
        net = mlp.copy()
        net.set_params(params)
        y, cache = nnet.forward(net, x)
        r = y - target
        grads, _ = nnet.backward(net, cache, 2 * r)
        return float(np.sum(r * r)), grads

    assert nnet.finite_diff_check(loss_and_grad, mlp.params(), step=1e-5) < 1e-5


def test_backward_input_gradient():
    rng = np.random.default_rng(0)
    mlp = nnet.init_mlp([3, 6, 2], 0)
    mlp.layers[0].bias[:] = rng.normal(size=6)
    x = rng.normal(size=(1, 3))

    def loss_and_grad(params):
        y, cache = nnet.forward(mlp, params[0])
        _, gin = nnet.backward(mlp, cache, np.ones_like(y))
        return float(y.sum()), [gin]

    assert nnet.finite_diff_check(loss_and_grad, [x]) < 1e-5


def test_adam_zero_grads():
    params = [np.array([1.0, -2.0]), np.array([[0.5]])]
    state = nnet.AdamState.zeros_like(params)
    new, state2 = nnet.adam_step(params, [np.zeros(2), np.zeros((1, 1))], state, 1e-3)
    assert all(np.array_equal(a, b) for a, b in zip(new, params))
    assert state2.t == 1
    assert state.t == 0


def test_adam_first_step_value():
    # m_hat = g, v_hat = g**2, so the step is lr * g / (|g| + eps)
    p = [np.array([0.0])]
    state = nnet.AdamState.zeros_like(p)
    new, _ = nnet.adam_step(p, [np.array([4.0])], state, 0.001)
    expected = -0.001 * 4.0 / (4.0 + 1e-8)
    assert new[0][0] == pytest.approx(expected, rel=1e-12)
    assert new[0][0] == pytest.approx(-0.001, rel=1e-8)


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    p = [rng.normal(size=(3, 2))]
    g = [rng.normal(size=(3, 2))]
    state = nnet.AdamState.zeros_like(p)
    state, _ = nnet.adam_step(p, g, state, 0.01)[1], None
    a = nnet.adam_step(p, g, state.copy(), 0.01)
    b = nnet.adam_step(p, g, state.copy(), 0.01)
    assert np.array_equal(a[0][0], b[0][0])
    assert np.array_equal(a[1].v[0], b[1].v[0])


def test_adam_rejects_nonfinite():
    p = [np.zeros(2)]
    with pytest.raises(nnet.TrainingDivergenceError):
        nnet.adam_step(p, [np.array([np.nan, 0.0])], nnet.AdamState.zeros_like(p), 1e-3)


def test_finite_diff_quadratic():
    def f(ps):
        return float(np.sum(ps[0] ** 2)), [2 * ps[0]]

    assert nnet.finite_diff_check(f, [np.array([1.0, 2.0])]) < 1e-8


def test_finite_diff_constant_coordinate():
    def f(ps):
        p = ps[0]
        return float(p[0] ** 3), [np.array([3 * p[0] ** 2, 0.0])]

    assert nnet.finite_diff_check(f, [np.array([0.7, 5.0])]) < 1e-8


def test_finite_diff_reports_wrong_gradient():
    def f(ps):
        return float(np.sum(ps[0] ** 2)), [3 * ps[0]]

    assert nnet.finite_diff_check(f, [np.array([1.0, 2.0])]) > 0.1


def test_finite_diff_nan():
    def f(ps):
        return float("nan"), [np.zeros(1)]

    assert np.isnan(nnet.finite_diff_check(f, [np.zeros(1)]))
