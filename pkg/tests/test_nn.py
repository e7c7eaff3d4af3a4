import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import max_rel_error, numeric_grad
from stage.errors import DivergenceError, NumericError, ShapeError, ValidationError
from stage.nn import DenseNet, SgdConfig, forward, grad_check, sgd_step


def identity_net(d):
    return DenseNet([np.eye(d)], [np.zeros(d)], ["identity"])


def test_identity_network_passes_input_through(rng):
    x = rng.standard_normal((5, 3))
    assert np.array_equal(forward(identity_net(3), x), x)


def test_tanh_outputs_are_open_interval(rng):
    net = DenseNet.initialize([4, 8, 3], ["relu", "tanh"], rng)
    out = forward(net, 50 * rng.standard_normal((20, 4)))
    assert np.all(np.abs(out) <= 1.0)
    small = forward(net, rng.standard_normal((20, 4)))
    assert np.all(np.abs(small) < 1.0)


def test_zero_weights_with_sigmoid_give_one_half(rng):
    net = DenseNet([np.zeros((3, 2))], [np.zeros(2)], ["sigmoid"])
    assert np.all(forward(net, rng.standard_normal((4, 3))) == 0.5)


def test_width_mismatch_is_a_shape_error(rng):
    with pytest.raises(ShapeError):
        forward(identity_net(3), np.zeros((2, 4)))


def test_forward_is_pure(rng):
    net = DenseNet.initialize([3, 5, 2], ["tanh", "sigmoid"], rng)
    x = rng.standard_normal((6, 3))
    before = [p.copy() for p in net.params()]
    assert np.array_equal(forward(net, x), forward(net, x))
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params()))


def test_init_within_glorot_bound():
    net = DenseNet.initialize([10, 6, 4], ["tanh", "identity"], np.random.default_rng(0))
    for w in net.weights:
        fan_in, fan_out = w.shape
        assert np.abs(w).max() <= np.sqrt(6 / (fan_in + fan_out))


def test_grad_check_on_quadratic():
    def f(p):
        w = p[0]
        return float(w @ w), [2 * w]

    assert grad_check(f, [np.array([1.0, 2.0])]) < 1e-8


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValidationError):
        grad_check(lambda p: (0.0, [np.zeros(1)]), [np.zeros(1)], eps=1e-2)


def test_grad_check_raises_on_non_finite_loss():
    def f(p):
        return float(np.log(p[0][0])), [1 / p[0]]

    with np.errstate(invalid="ignore"), pytest.raises(NumericError):
        grad_check(f, [np.array([1e-7])], eps=1e-6)


@pytest.mark.parametrize("act", ["identity", "relu", "tanh", "sigmoid"])
def test_backward_matches_finite_differences(act):
    rng = np.random.default_rng(5)
    net = DenseNet.initialize([4, 6, 3], [act, "tanh"], rng)
    x = rng.standard_normal((7, 4)) + 0.3
    target = rng.standard_normal((7, 3))

    def loss(params):
        out = net.with_params(params).forward(x)
        return float(np.sum((out - target) ** 2))

    out, cache = net.forward_train(x)
    grads, gx = net.backward(cache, 2 * (out - target))
    assert max_rel_error(grads, numeric_grad(loss, net.params())) < 1e-6
    gx_num = numeric_grad(lambda p: float(np.sum((net.forward(p[0]) - target) ** 2)), [x])[0]
    assert max_rel_error([gx], [gx_num]) < 1e-6


def test_sgd_step_definition():
    net = DenseNet([np.array([[1.0]])], [np.zeros(1)], ["identity"])
    out = sgd_step(net, [np.array([[2.0]]), np.zeros(1)], SgdConfig(learning_rate=0.1))
    assert out.weights[0][0, 0] == pytest.approx(0.8)
    assert net.weights[0][0, 0] == 1.0


def test_zero_gradient_is_a_fixed_point(rng):
    net = DenseNet.initialize([3, 2], ["tanh"], rng)
    out = sgd_step(net, [np.zeros_like(p) for p in net.params()], SgdConfig())
    assert all(np.array_equal(a, b) for a, b in zip(net.params(), out.params()))


def test_nan_gradient_raises_and_leaves_net_alone(rng):
    net = DenseNet.initialize([3, 4, 2], ["tanh", "tanh"], rng)
    before = [p.copy() for p in net.params()]
    grads = [np.zeros_like(p) for p in net.params()]
    grads[2][0, 0] = np.nan
    with pytest.raises(DivergenceError) as err:
        sgd_step(net, grads, SgdConfig())
    assert err.value.layer == 1
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params()))


def test_sgd_config_validation():
    with pytest.raises(ValidationError):
        SgdConfig(learning_rate=0)
    with pytest.raises(ValidationError):
        SgdConfig(learning_rate=1.5)
    with pytest.raises(ValidationError):
        SgdConfig(batch_size=0)


@settings(max_examples=20, deadline=None)
@given(widths=st.lists(st.integers(1, 6), min_size=2, max_size=4), seed=st.integers(0, 10**6))
def test_json_round_trip_is_exact(widths, seed):
    rng = np.random.default_rng(seed)
    acts = list(rng.choice(["identity", "relu", "tanh", "sigmoid"], size=len(widths) - 1))
    net = DenseNet.initialize(widths, acts, rng)
    back = DenseNet.from_json(net.to_json())
    x = rng.standard_normal((3, widths[0]))
    assert np.array_equal(back.forward(x), net.forward(x))
