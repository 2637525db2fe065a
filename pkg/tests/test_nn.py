import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fssfnet.exceptions import ConfigurationError, DimensionError, NumericalError, StateError
from fssfnet.nn import (
    SELU_ALPHA,
    SELU_LAMBDA,
    Adam,
    BatchNorm,
    Dense,
    Dropout,
    Network,
    Selu,
    Softmax,
    SpectralConv,
    count_params,
    cross_entropy,
    selu,
    softmax,
)
from helpers import layer_gradcheck


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


# -- dense -------------------------------------------------------------------

def test_dense_identity():
    layer = Dense(3, 3)
    layer.params["weight"] = np.eye(3)
    layer.params["bias"] = np.zeros(3)
    v = np.array([[0.5, -2.0, 7.0]])
    np.testing.assert_array_equal(layer.forward(v), v)


def test_dense_hand_arithmetic():
    layer = Dense(2, 1)
    layer.params["weight"] = np.ones((2, 1))
    layer.params["bias"] = np.array([0.5])
    assert layer.forward(np.array([[1.0, 2.0]]))[0, 0] == 3.5


def test_dense_batch_rows_independent(rng):
    layer = Dense(4, 3, rng)
    x = rng.standard_normal((2, 4))
    stacked = np.vstack([layer.forward(x[:1]), layer.forward(x[1:])])
    np.testing.assert_allclose(layer.forward(x), stacked, rtol=0, atol=1e-15)


def test_dense_scalar_backward():
    layer = Dense(1, 1)
    layer.params["weight"] = np.array([[2.0]])
    layer.forward(np.array([[3.0]]))
    grad_in = layer.backward(np.array([[1.0]]))
    assert layer.grads["weight"][0, 0] == 3.0
    assert grad_in[0, 0] == 2.0


def test_dense_zero_grad(rng):
    layer = Dense(3, 2, rng)
    layer.forward(rng.standard_normal((4, 3)))
    grad_in = layer.backward(np.zeros((4, 2)))
    assert not grad_in.any() and not layer.grads["weight"].any() and not layer.grads["bias"].any()


def test_dense_shape_error_names_layer(rng):
    net = Network([Dense(3, 2, rng), Dense(2, 2, rng)])
    with pytest.raises(DimensionError, match="0:Dense"):
        net.forward(np.zeros((1, 4)))


def test_backward_without_forward():
    with pytest.raises(StateError):
        Dense(2, 2).backward(np.zeros((1, 2)))


# -- batch norm ----------------------------------------------------------------

def test_batchnorm_train_standardizes(rng):
    bn = BatchNorm(3)
    x = rng.standard_normal((50, 3)) * [1.0, 5.0, 0.2] + [3.0, -1.0, 10.0]
    out = bn.forward(x, training=True)
    var = x.var(axis=0)
    assert np.all(np.abs(out.mean(axis=0)) < 1e-9)
    target = var / (var + bn.eps)
    np.testing.assert_allclose(out.var(axis=0), target, rtol=1e-6)
    assert np.all(np.abs(out.var(axis=0) / target - 1) < 1e-3)


def test_batchnorm_infer_identity_stats(rng):
    bn = BatchNorm(4)
    x = rng.standard_normal((6, 4))
    np.testing.assert_allclose(bn.forward(x, training=False), x / math.sqrt(1 + bn.eps), rtol=1e-15)


def test_batchnorm_affine(rng):
    bn = BatchNorm(1)
    bn.params["gamma"][:] = 2.0
    bn.params["beta"][:] = 3.0
    z = rng.standard_normal(40)
    z = (z - z.mean()) / z.std()
    out = bn.forward(z[:, None], training=True)[:, 0]
    np.testing.assert_allclose(out, 2 * z / math.sqrt(1 + bn.eps) + 3, rtol=1e-12, atol=1e-12)


def test_batchnorm_moving_stats_update(rng):
    bn = BatchNorm(2, momentum=0.9)
    x = rng.standard_normal((8, 2))
    bn.forward(x, training=True)
    np.testing.assert_allclose(bn.stats["moving_mean"], 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(bn.stats["moving_var"], 0.9 + 0.1 * x.var(axis=0))
    assert np.all(bn.stats["moving_var"] >= 0)


def test_batchnorm_single_sample_train_rejected():
    with pytest.raises(ConfigurationError):
        BatchNorm(3).forward(np.zeros((1, 3)), training=True)


def test_batchnorm_backward_after_infer():
    bn = BatchNorm(3)
    bn.forward(np.zeros((4, 3)), training=False)
    with pytest.raises(StateError):
        bn.backward(np.zeros((4, 3)))


def test_batchnorm_zero_grad(rng):
    bn = BatchNorm(3)
    bn.forward(rng.standard_normal((5, 3)), training=True)
    assert not bn.backward(np.zeros((5, 3))).any()
    assert not bn.grads["gamma"].any() and not bn.grads["beta"].any()


def test_batchnorm_constant_column_gradient_is_centred(rng):
    # a constant column has x_hat = 0, so grad_in = (g - mean g) / sqrt(eps)
    bn = BatchNorm(2)
    x = np.column_stack([np.full(6, 0.7), rng.standard_normal(6)])
    bn.forward(x, training=True)
    g = rng.standard_normal((6, 2))
    grad_in = bn.backward(g)
    expected = (g[:, 0] - g[:, 0].mean()) / math.sqrt(bn.eps)
    np.testing.assert_allclose(grad_in[:, 0], expected, rtol=1e-12)
    errors = layer_gradcheck(BatchNorm(2), x, rng)
    assert max(errors.values()) < 1e-5


# -- selu / softmax / dropout ----------------------------------------------------

def test_selu_values():
    assert selu(0.0) == 0.0
    assert selu(1.0) == SELU_LAMBDA
    assert abs(selu(-40.0) - (-SELU_LAMBDA * SELU_ALPHA)) < 1e-12
    assert abs(-SELU_LAMBDA * SELU_ALPHA - (-1.7580993408473766)) < 1e-15


def test_selu_layer_matches_function(rng):
    x = rng.standard_normal((5, 7)) * 3
    np.testing.assert_array_equal(Selu(7).forward(x), selu(x))


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros((1, 3))), [[1 / 3] * 3], rtol=1e-15)
    big = softmax(np.array([[1000.0, 0.0]]))
    assert np.all(np.isfinite(big)) and big[0, 0] == pytest.approx(1.0) and big[0, 1] == pytest.approx(0.0)
    np.testing.assert_allclose(softmax(np.log([[1.0, 2.0, 3.0]])), [[1 / 6, 2 / 6, 3 / 6]], rtol=1e-14)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    p = softmax(x)
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-12)
    assert np.all(p >= 0) and np.all(p <= 1)


def test_dropout_infer_is_identity(rng):
    x = rng.standard_normal((3, 4))
    assert Dropout(4, 0.5).forward(x, training=False) is x


def test_dropout_retain_one_is_identity(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(Dropout(4, 1.0).forward(x, training=True, rng=rng), x)


def test_dropout_inverted_scaling_mean():
    ones = np.ones((1000, 1000))
    out = Dropout(1000, 0.5).forward(ones, training=True, rng=np.random.default_rng(1))
    assert 0.99 <= out.mean() <= 1.01
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_dropout_expectation_per_element():
    x = np.array([0.3, -1.2, 2.5, 4.0, -0.7])
    draws = Dropout(5, 0.5).forward(np.tile(x, (100_000, 1)), training=True, rng=np.random.default_rng(2))
    assert np.all(np.abs(draws.mean(axis=0) - x) < 0.01 * np.abs(x))


@pytest.mark.parametrize("retain", [0.0, -0.1, 1.5])
def test_dropout_bad_retain(retain):
    with pytest.raises(ConfigurationError):
        Dropout(3, retain)


# -- cross entropy ---------------------------------------------------------------

def test_cross_entropy_perfect():
    y = np.eye(3)
    assert cross_entropy(y, y).value == 0.0


def test_cross_entropy_half():
    loss = cross_entropy(np.array([[0.5, 0.5]]), np.array([[0.0, 1.0]]))
    assert loss.value == pytest.approx(math.log(2), rel=1e-15)
    np.testing.assert_allclose(loss.grad, [[0.5, -0.5]])


def test_cross_entropy_mean_invariant_under_duplication(rng):
    p = softmax(rng.standard_normal((4, 3)))
    y = np.eye(3)[[0, 2, 1, 1]]
    a = cross_entropy(p, y).value
    b = cross_entropy(np.vstack([p, p]), np.vstack([y, y])).value
    assert a == pytest.approx(b, rel=1e-14)


def test_cross_entropy_clamps_zero_probability():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        loss = cross_entropy(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    assert loss.n_clamped == 1
    assert loss.value == pytest.approx(-math.log(1e-12))
    assert any("clamped" in str(w.message) for w in caught)


def test_cross_entropy_logit_gradient_matches_fd(rng):
    logits = rng.standard_normal((3, 4))
    y = np.eye(4)[[1, 3, 0]]
    grad = cross_entropy(softmax(logits), y).grad
    num = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        d = np.zeros_like(logits)
        d[idx] = 1e-6
        num[idx] = (cross_entropy(softmax(logits + d), y).value - cross_entropy(softmax(logits - d), y).value) / 2e-6
    np.testing.assert_allclose(grad, num, atol=1e-8)


# -- spectral convolution ----------------------------------------------------------

def test_conv_delta_kernel_subsamples(rng):
    conv = SpectralConv(1, 17, 1, kernel=5, stride=3)
    conv.params["weight"][:] = [[[0, 0, 1, 0, 0]]]
    x = rng.standard_normal((2, 17))
    np.testing.assert_array_equal(conv.forward(x), x[:, 2::3][:, :conv.out_length])
    assert conv.out_length == 5


def test_conv_output_length_indian_pines():
    assert SpectralConv(1, 220, 20).out_length == 72


def test_local_conv_param_count():
    shared = SpectralConv(1, 220, 20, shared=True)
    local = SpectralConv(1, 220, 20, shared=False)
    assert shared.params["weight"].size == 20 * 5
    assert local.params["weight"].size == shared.params["weight"].size * 72
    assert local.params["bias"].size == 20 * 72


def test_conv_kernel_narrowed_for_short_input():
    conv = SpectralConv(20, 4, 15)
    assert conv.kernel == 4 and conv.out_length == 1


# -- gradient checks over every layer kind -------------------------------------------

def _random_layer(kind, rng):
    n = int(rng.integers(1, 9))
    if kind == "Dense":
        return Dense(n, int(rng.integers(1, 9)), rng), n
    if kind == "BatchNorm":
        bn = BatchNorm(n)
        bn.params["gamma"] = rng.uniform(0.5, 2.0, n)
        bn.params["beta"] = rng.standard_normal(n)
        return bn, n
    if kind == "Selu":
        return Selu(n), n
    if kind == "Dropout":
        return Dropout(n, float(rng.uniform(0.3, 1.0))), n
    if kind == "Softmax":
        return Softmax(n), n
    c_in, length = int(rng.integers(1, 3)), int(rng.integers(5, 9))
    conv = SpectralConv(c_in, length, int(rng.integers(1, 4)), 5, int(rng.integers(1, 4)),
                        shared=kind == "SpectralConvShared", rng=rng)
    for p in conv.params.values():
        p[...] = rng.standard_normal(p.shape)
    return conv, conv.n_in


KINDS = ["Dense", "BatchNorm", "Selu", "Dropout", "Softmax", "SpectralConvShared", "SpectralConvLocal"]


@pytest.mark.parametrize("kind", KINDS)
def test_layer_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(KINDS.index(kind))
    worst = 0.0
    for _ in range(20):
        layer, n_in = _random_layer(kind, rng)
        batch = int(rng.integers(2, 6))
        x = rng.standard_normal((batch, n_in))
        errors = layer_gradcheck(layer, x, rng)
        worst = max(worst, *errors.values())
    assert worst < 1e-4, f"{kind}: max relative error {worst:.2e}"


@pytest.mark.parametrize("kind", ["Dense", "SpectralConvShared", "SpectralConvLocal", "BatchNorm"])
def test_layer_gradients_tight(kind):
    rng = np.random.default_rng(99)
    layer, n_in = _random_layer(kind, rng)
    errors = layer_gradcheck(layer, rng.standard_normal((4, n_in)), rng)
    assert max(errors.values()) < 1e-5


def test_forward_is_repeatable(rng):
    net = Network([Dense(4, 6, rng), BatchNorm(6), Selu(6), Dropout(6, 0.5), Dense(6, 3, rng), Softmax(3)])
    x = rng.standard_normal((5, 4))
    a = net.forward(x, training=True, rng=np.random.default_rng(5))
    b = net.forward(x, training=True, rng=np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(net.forward(x), net.forward(x))


# -- ADAM ---------------------------------------------------------------------------

def _single_param(value, grad):
    layer = Dense(1, len(value))
    layer.params["weight"] = np.array([value], dtype=float)
    layer.grads["weight"] = np.array([grad], dtype=float)
    return layer, [("w", layer, "weight")]


def test_adam_zero_gradient_keeps_parameters():
    layer, params = _single_param([1.0, -2.0], [0.0, 0.0])
    Adam().step(params)
    np.testing.assert_array_equal(layer.params["weight"], [[1.0, -2.0]])


@pytest.mark.parametrize("g", [1e-3, 0.5, -3.0, 250.0])
def test_adam_first_step_moves_by_lr(g):
    layer, params = _single_param([0.0, 0.0, 0.0], [g, 2 * g, -g])
    Adam(lr=0.001).step(params)
    step = np.abs(layer.params["weight"])
    assert np.all((step >= 0.999 * 0.001) & (step <= 1.001 * 0.001))


def test_adam_decay_schedule():
    opt = Adam(lr=0.001, decay=0.005)
    assert opt.rate(200) == pytest.approx(0.0005, rel=1e-15)
    rates = [opt.rate(t) for t in range(0, 500)]
    assert all(a >= b > 0 for a, b in zip(rates, rates[1:]))


def test_adam_step_counter_and_rate():
    layer, params = _single_param([0.0], [1.0])
    opt = Adam(lr=0.01, decay=0.1)
    for _ in range(3):
        opt.step(params)
    assert opt.t == 3
    assert opt.rate() == 0.01 / (1 + 0.1 * 3)


def test_adam_nan_names_parameter():
    _, params = _single_param([0.0], [float("nan")])
    with pytest.raises(NumericalError, match="w"):
        Adam().step(params)


def test_adam_skips_moving_statistics(rng):
    bn = BatchNorm(3)
    bn.forward(rng.standard_normal((4, 3)), training=True)
    bn.backward(rng.standard_normal((4, 3)))
    before = {k: v.copy() for k, v in bn.stats.items()}
    Adam().step([("bn.gamma", bn, "gamma"), ("bn.beta", bn, "beta")])
    for k, v in bn.stats.items():
        np.testing.assert_array_equal(v, before[k])


@pytest.mark.parametrize("kwargs", [dict(beta1=1.0), dict(beta2=-0.1), dict(eps=0.0), dict(decay=-1.0)])
def test_adam_rejects_bad_config(kwargs):
    with pytest.raises(ConfigurationError):
        Adam(**kwargs)


# -- parameter counting -------------------------------------------------------------

def test_count_params_dense_and_bn():
    assert Dense(103, 100).count_params() == (10_400, 10_400)
    assert BatchNorm(100).count_params() == (200, 400)
    for layer in (Selu(5), Dropout(5), Softmax(5)):
        assert layer.count_params() == (0, 0)


def test_count_params_additive(rng):
    layers = [Dense(7, 5, rng), BatchNorm(5), Selu(5), Dense(5, 2, rng), Softmax(2)]
    net = Network(layers)
    parts = [layer.count_params() for layer in layers]
    assert count_params(net) == (sum(p[0] for p in parts), sum(p[1] for p in parts))
