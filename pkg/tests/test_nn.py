import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from discorl.nn import (Adam, ConfigError, Network, UsageError, adam_step, check_network_gradients,
                        cross_entropy, log_softmax, make_rng, mse, numerical_gradient, relative_error, softmax)

TOL = 1e-4


def _sum_sq(out):
    return float(0.5 * np.sum(out * out)), out.copy()


def _input_grad_error(net, x):
    net.zero_grad()
    out = net.forward(x)
    gx = net.backward(out.copy(), need_input_grad=True)

    def f():
        return _sum_sq(net.forward(x, cache=False))[0]

    return relative_error(gx, numerical_gradient(f, x))


LAYER_CASES = {
    "dense": ([{"type": "dense", "in": 5, "out": 3}], (5,)),
    "relu": ([{"type": "dense", "in": 5, "out": 6}, {"type": "activation", "fn": "relu"},
              {"type": "dense", "in": 6, "out": 2}], (5,)),
    "tanh": ([{"type": "dense", "in": 4, "out": 6}, {"type": "activation", "fn": "tanh"},
              {"type": "dense", "in": 6, "out": 3}], (4,)),
    "conv": ([{"type": "conv", "in_ch": 2, "out_ch": 3, "kernel": 3, "stride": 2}, {"type": "flatten"}], (7, 7, 2)),
    "conv_stride1": ([{"type": "conv", "in_ch": 1, "out_ch": 2, "kernel": 2, "stride": 1}, {"type": "flatten"}],
                     (4, 5, 1)),
    "softmax": ([{"type": "dense", "in": 3, "out": 4}, {"type": "softmax"}], (3,)),
}


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_layer_gradients_match_finite_differences(name):
    layers, shape = LAYER_CASES[name]
    worst = 0.0
    for trial in range(20):
        net = Network(layers, shape, seed=trial)
        x = make_rng([trial, 1]).normal(size=(3, *shape))
        worst = max(worst, check_network_gradients(net, x, _sum_sq), _input_grad_error(net, x))
    assert worst < TOL


def test_network_forward_matches_plain_matmul():
    net = Network([{"type": "dense", "in": 4, "out": 5}, {"type": "activation", "fn": "tanh"},
                   {"type": "dense", "in": 5, "out": 2}], (4,), seed=7)
    x = make_rng(3).normal(size=(6, 4))
    w1, b1, w2, b2 = net.parameters()
    expected = np.tanh(x @ w1 + b1) @ w2 + b2
    np.testing.assert_allclose(net.forward(x), expected, rtol=0, atol=1e-12)


def test_conv_forward_matches_direct_loops():
    net = Network([{"type": "conv", "in_ch": 2, "out_ch": 3, "kernel": 3, "stride": 2}], (7, 6, 2), seed=0)
    x = make_rng(1).normal(size=(2, 7, 6, 2))
    w, b = net.parameters()  # sorted keys: W, b
    out = net.forward(x)
    ref = np.zeros_like(out)
    for n in range(2):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                patch = x[n, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3, :]
                for o in range(3):
                    ref[n, i, j, o] = np.sum(patch * w[..., o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_zero_weight_dense_gives_zero():
    net = Network([{"type": "dense", "in": 3, "out": 2}], (3,), seed=0)
    net.set_flat(np.zeros(net.n_params()))
    assert np.all(net.forward(np.ones((4, 3))) == 0.0)


def test_single_dense_mse_gradient_closed_form():
    net = Network([{"type": "dense", "in": 3, "out": 2}], (3,), seed=2)
    x = make_rng(0).normal(size=(5, 3))
    y = make_rng(1).normal(size=(5, 2))
    net.zero_grad()
    yhat = net.forward(x)
    _, g = mse(yhat, y)
    net.backward(g)
    w_grad, b_grad = net.gradients()
    np.testing.assert_allclose(w_grad, x.T @ (2 * (yhat - y) / yhat.size), atol=1e-12)
    np.testing.assert_allclose(b_grad, (2 * (yhat - y) / yhat.size).sum(0), atol=1e-12)


def test_zero_upstream_gradient_gives_zero_grads():
    net = Network(*LAYER_CASES["conv"], seed=0)
    x = make_rng(0).normal(size=(2, 7, 7, 2))
    net.zero_grad()
    out = net.forward(x)
    net.backward(np.zeros_like(out))
    assert all(np.all(g == 0) for g in net.gradients())


def test_backward_without_forward_is_usage_error():
    net = Network([{"type": "dense", "in": 2, "out": 2}], (2,), seed=0)
    with pytest.raises(UsageError):
        net.backward(np.ones((1, 2)))


def test_shape_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        Network([{"type": "dense", "in": 3, "out": 2}, {"type": "dense", "in": 5, "out": 1}], (3,))
    net = Network([{"type": "dense", "in": 3, "out": 2}], (3,))
    with pytest.raises(ConfigError):
        net.forward(np.ones((2, 4)))


def test_same_spec_and_seed_is_bit_identical():
    spec, shape = LAYER_CASES["conv"]
    a, b = Network(spec, shape, seed=11), Network(spec, shape, seed=11)
    assert a.get_flat().tobytes() == b.get_flat().tobytes()
    assert not np.array_equal(a.get_flat(), Network(spec, shape, seed=12).get_flat())


def test_glorot_bounds():
    net = Network([{"type": "dense", "in": 30, "out": 10}], (30,), seed=0)
    limit = np.sqrt(6 / 40)
    assert np.abs(net.parameters()[0]).max() <= limit


def test_softmax_uniform_logits():
    np.testing.assert_allclose(softmax(np.zeros((1, 4))), 0.25)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(z):
    p = softmax(z)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(np.exp(log_softmax(z)), p, atol=1e-12)


def test_cross_entropy_values_and_gradient():
    assert cross_entropy(np.eye(4)[[2]], [2])[0] == 0.0
    assert cross_entropy(np.full((1, 4), 0.25), [1])[0] == pytest.approx(np.log(4))
    rng = make_rng(5)
    for trial in range(20):
        z = rng.normal(size=(6, 4))
        t = rng.integers(0, 4, 6)
        loss, g = cross_entropy(softmax(z), t)
        assert loss == pytest.approx(np.mean([-np.log(softmax(z)[i, t[i]]) for i in range(6)]), rel=1e-12)
        num = numerical_gradient(lambda: cross_entropy(softmax(z), t)[0], z)
        assert relative_error(g, num) < TOL


def test_cross_entropy_clamps_zero_probability():
    loss, _ = cross_entropy(np.array([[1.0, 0.0, 0.0, 0.0]]), [3])
    assert loss == pytest.approx(-np.log(1e-12))


def test_mse_gradient():
    rng = make_rng(9)
    for trial in range(20):
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        _, g = mse(a, b)
        assert relative_error(g, numerical_gradient(lambda: mse(a, b)[0], a)) < TOL


def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, -2.0])]
    opt = Adam(p, lr=0.1)
    opt.step([np.zeros(2)])
    np.testing.assert_array_equal(p[0], [1.0, -2.0])
    assert opt.t == 1


def test_adam_first_step_is_lr_times_sign():
    p = [np.array([0.0, 0.0, 0.0])]
    adam_step(Adam(p, lr=0.01), p, [np.array([3.0, -0.2, 1e-3])])
    np.testing.assert_allclose(p[0], [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_minimises_quadratic():
    x = [np.array([1.0])]
    opt = Adam(x, lr=0.1)
    for _ in range(100):
        opt.step([2 * x[0]])
    assert abs(x[0][0]) < 0.5


def test_adam_shape_mismatch():
    with pytest.raises(ConfigError):
        Adam([np.zeros(2)]).step([np.zeros(3)])


def test_training_is_deterministic():
    def run():
        net = Network(LAYER_CASES["relu"][0], (5,), seed=3)
        opt = Adam(net.parameters(), lr=1e-2)
        x = make_rng(0).normal(size=(8, 5))
        for _ in range(10):
            net.zero_grad()
            out = net.forward(x)
            net.backward(out)
            opt.step(net.gradients())
        return net.get_flat()

    assert run().tobytes() == run().tobytes()
