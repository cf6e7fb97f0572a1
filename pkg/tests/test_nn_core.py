import math

import numpy as np
import pytest

from sacfl.errors import ContractViolation, DimensionError, ValidationError
from sacfl.nn_core import (
    Activation,
    DenseLayer,
    Network,
    OptimizerKind,
    OptimizerState,
    ParamVector,
    accuracy,
    backward,
    cosine_distance,
    decoder_params,
    encoder_output,
    encoder_params,
    euclidean,
    flatten,
    forward,
    init_network,
    kl_feature_divergence,
    kl_feature_gradient,
    layer_change_profile,
    manhattan,
    optimizer_step,
    predict,
    reinit_decoder,
    softmax_cross_entropy,
    unflatten,
)


def numerical_gradient(fn, values, eps=1e-6):
    grad = np.zeros_like(values)
    for i in range(values.size):
        up, down = values.copy(), values.copy()
        up[i] += eps
        down[i] -= eps
        grad[i] = (fn(up) - fn(down)) / (2 * eps)
    return grad


def test_init_network_shapes(small_net):
    assert small_net.widths == [4, 8, 3]
    assert small_net.split_index == 1
    assert small_net.feature_dim == 8
    assert small_net.layers[0].activation is Activation.RELU
    assert small_net.layers[-1].activation is Activation.IDENTITY
    assert small_net.param_count == 4 * 8 + 8 + 8 * 3 + 3
    assert np.all(small_net.layers[0].bias == 0)


def test_init_network_is_deterministic():
    assert init_network([5, 7, 6, 2], 2, rng_seed=9) == init_network(
        [5, 7, 6, 2], 2, rng_seed=9
    )
    assert init_network([5, 7, 2], rng_seed=1) != init_network([5, 7, 2], rng_seed=2)


@pytest.mark.parametrize("widths", [[4, 2], [4, 0, 2], [3]])
def test_init_network_rejects_bad_widths(widths):
    with pytest.raises(ValidationError):
        init_network(widths)


def test_network_split_must_leave_both_parts():
    layers = init_network([3, 4, 2]).layers
    with pytest.raises(ValidationError):
        Network(layers, split_index=2)
    with pytest.raises(ValidationError):
        Network(layers, split_index=0)


def test_network_checks_layer_chaining():
    a = DenseLayer(np.ones((4, 3)), np.zeros(4))
    b = DenseLayer(np.ones((2, 5)), np.zeros(2), Activation.IDENTITY)
    with pytest.raises(DimensionError):
        Network([a, b])


def test_flatten_unflatten_identity(small_net):
    params = flatten(small_net)
    assert len(params) == small_net.param_count
    assert unflatten(small_net, params) == small_net


def test_encoder_and_decoder_params_cover_the_model():
    net = init_network([6, 5, 4, 3], split_index=2, rng_seed=0)
    enc, dec = encoder_params(net), decoder_params(net)
    assert len(enc) == net.encoder_param_count
    assert len(dec) == net.decoder_param_count
    assert len(enc) + len(dec) == net.param_count
    assert enc.layer_indices == (0, 1)
    assert dec.layer_indices == (2,)
    np.testing.assert_array_equal(
        np.concatenate([enc.values, dec.values]), flatten(net).values
    )


def test_unflatten_partial_replaces_only_covered_layers(small_net):
    other = init_network([4, 8, 3], rng_seed=99)
    mixed = unflatten(small_net, decoder_params(other))
    assert encoder_params(mixed) == encoder_params(small_net)
    assert decoder_params(mixed) == decoder_params(other)


def test_param_vector_size_checked():
    with pytest.raises(DimensionError):
        ParamVector(np.zeros(3), ((0, "bias", (2,)),))


def test_reinit_decoder_keeps_encoder(small_net):
    fresh = reinit_decoder(small_net, 7)
    assert encoder_params(fresh) == encoder_params(small_net)
    assert decoder_params(fresh) != decoder_params(small_net)
    assert reinit_decoder(small_net, 7) == fresh


def test_forward_shapes(small_net, rng):
    x = rng.standard_normal((5, 4))
    logits, cache = forward(small_net, x)
    assert logits.shape == (5, 3)
    assert cache.depth == 2
    assert encoder_output(small_net, x).shape == (5, 8)
    np.testing.assert_array_equal(cache.inputs[1], encoder_output(small_net, x))


def test_forward_on_an_empty_batch(small_net):
    empty = np.zeros((0, 4))
    logits, cache = forward(small_net, empty)
    assert logits.shape == (0, 3)
    assert cache.depth == 2
    assert encoder_output(small_net, empty).shape == (0, 8)
    assert predict(small_net, empty).shape == (0,)


def test_forward_rejects_wrong_input_width(small_net):
    with pytest.raises(DimensionError):
        forward(small_net, np.zeros((2, 5)))


def test_backward_matches_finite_differences(rng):
    net = init_network([3, 5, 4, 3], split_index=2, rng_seed=2)
    x = rng.standard_normal((6, 3))
    y = np.array([0, 1, 2, 2, 1, 0])
    logits, cache = forward(net, x)
    _, grad = softmax_cross_entropy(logits, y)
    analytic = backward(net, cache, grad)

    def loss(values):
        candidate = unflatten(net, analytic.with_values(values))
        return softmax_cross_entropy(forward(candidate, x)[0], y)[0]

    numeric = numerical_gradient(loss, flatten(net).values)
    np.testing.assert_allclose(analytic.values, numeric, rtol=1e-4, atol=1e-7)


@pytest.mark.parametrize("seed", range(25))
def test_backward_on_random_networks(seed):
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 4))
    widths = [int(w) for w in rng.integers(2, 6, size=depth + 2)]
    net = init_network(widths, int(rng.integers(1, depth + 1)), rng_seed=seed)
    # random biases keep every pre-activation away from the ReLU kink
    net = unflatten(net, flatten(net).with_values(rng.standard_normal(net.param_count)))
    x = rng.standard_normal((4, widths[0]))
    y = rng.integers(0, widths[-1], size=4)
    logits, cache = forward(net, x)
    _, grad = softmax_cross_entropy(logits, y)
    analytic = backward(net, cache, grad)

    def loss(values):
        candidate = unflatten(net, analytic.with_values(values))
        return softmax_cross_entropy(forward(candidate, x)[0], y)[0]

    numeric = numerical_gradient(loss, flatten(net).values)
    np.testing.assert_allclose(analytic.values, numeric, rtol=1e-4, atol=1e-7)


def test_backward_feature_gradient_joins_at_the_split(rng):
    net = init_network([3, 5, 4, 3], split_index=2, rng_seed=4)
    x = rng.standard_normal((4, 3))
    weights = rng.standard_normal((4, 4))
    _, cache = forward(net, x)
    analytic = backward(net, cache, np.zeros((4, 3)), weights)

    def extra(values):
        candidate = unflatten(net, analytic.with_values(values))
        return float(np.sum(encoder_output(candidate, x) * weights))

    numeric = numerical_gradient(extra, flatten(net).values)
    np.testing.assert_allclose(analytic.values, numeric, rtol=1e-4, atol=1e-7)
    assert np.all(decoder_params(unflatten(net, analytic)).values == 0)


def test_backward_detects_stale_cache(small_net, rng):
    x = rng.standard_normal((2, 4))
    _, cache = forward(small_net, x)
    rebuilt = unflatten(small_net, flatten(small_net))
    with pytest.raises(ContractViolation):
        backward(rebuilt, cache, np.zeros((2, 3)))


def test_softmax_cross_entropy_uniform_logits():
    loss, grad = softmax_cross_entropy(np.zeros((4, 5)), np.array([0, 1, 2, 3]))
    assert loss == pytest.approx(math.log(5))
    np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-15)
    assert grad[0, 0] == pytest.approx((0.2 - 1) / 4)


def test_softmax_cross_entropy_is_stable_for_large_logits():
    loss, grad = softmax_cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(0.0)
    assert np.all(np.isfinite(grad))


def test_softmax_cross_entropy_rejects_out_of_range_labels():
    with pytest.raises(ValidationError):
        softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_predict_and_accuracy():
    layers = [
        DenseLayer(np.eye(2), np.zeros(2)),
        DenseLayer(np.eye(2), np.zeros(2), Activation.IDENTITY),
    ]
    net = Network(layers)
    x = np.array([[2.0, 0.0], [0.0, 3.0], [1.0, 0.0]])
    np.testing.assert_array_equal(predict(net, x), [0, 1, 0])
    assert accuracy(net, x, np.array([0, 1, 1])) == pytest.approx(2 / 3)
    assert accuracy(net, np.zeros((0, 2)), np.zeros(0, dtype=int)) == 0.0


def test_sgd_step(small_net):
    params = flatten(small_net)
    grads = params.with_values(np.ones(len(params)))
    state = OptimizerState(OptimizerKind.SGD, learning_rate=0.1)
    updated = optimizer_step(state, params, grads)
    np.testing.assert_allclose(updated.values, params.values - 0.1)
    assert state.step == 0


def test_adam_first_step_moves_by_learning_rate(small_net, rng):
    params = flatten(small_net)
    g = rng.standard_normal(len(params))
    state = OptimizerState(OptimizerKind.ADAM, learning_rate=0.01)
    updated = optimizer_step(state, params, params.with_values(g))
    np.testing.assert_allclose(
        updated.values - params.values, -0.01 * np.sign(g), atol=1e-5
    )
    assert state.step == 1
    state.reset()
    assert state.first is None and state.step == 0


def test_adam_follows_its_recurrence():
    # f(w) = w^2 from w = 1
    params = ParamVector(np.array([1.0]), ((0, "bias", (1,)),))
    state = OptimizerState(OptimizerKind.ADAM, learning_rate=0.1)
    w, m, v = 1.0, 0.0, 0.0
    for t in (1, 2, 3):
        g = 2.0 * w
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat, v_hat = m / (1 - 0.9**t), v / (1 - 0.999**t)
        w -= 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
        params = optimizer_step(state, params, params.with_values(2.0 * params.values))
        assert params.values[0] == pytest.approx(w, rel=0, abs=1e-12)
    assert state.step == 3


def test_zero_gradient_is_a_fixed_point(small_net):
    params = flatten(small_net)
    zeros = params.with_values(np.zeros(len(params)))
    for kind in OptimizerKind:
        updated = optimizer_step(OptimizerState(kind), params, zeros)
        np.testing.assert_array_equal(updated.values, params.values)


def test_adam_moments_belong_to_one_layout(small_net):
    state = OptimizerState(OptimizerKind.ADAM)
    full = flatten(small_net)
    optimizer_step(state, full, full)
    enc = encoder_params(small_net)
    with pytest.raises(ContractViolation):
        optimizer_step(state, enc, enc)


def test_optimizer_state_validation():
    with pytest.raises(ValidationError):
        OptimizerState(learning_rate=-1.0)
    with pytest.raises(ValidationError):
        OptimizerState(OptimizerKind.ADAM, beta1=1.0)
    fresh = OptimizerState(OptimizerKind.ADAM, 0.2, step=3).fresh()
    assert fresh.step == 0 and fresh.learning_rate == 0.2


def test_distances():
    a, b = np.array([[3.0, 4.0]]), np.zeros((1, 2))
    assert manhattan(a, b) == 7.0
    assert euclidean(a, b) == 5.0
    assert cosine_distance([1.0, 0.0], [0.0, 2.0]) == pytest.approx(1.0)
    assert cosine_distance([1.0, 2.0], [2.0, 4.0]) == pytest.approx(0.0, abs=1e-12)
    assert cosine_distance([1.0, 2.0], [1.0, 2.0]) == 0.0


def test_distances_check_shapes():
    with pytest.raises(DimensionError):
        manhattan(np.zeros(3), np.zeros(4))


def test_cosine_distance_undefined_for_zero():
    with pytest.raises(ValidationError):
        cosine_distance(np.zeros(3), np.ones(3))


def test_kl_feature_divergence(rng):
    f = rng.standard_normal((5, 4))
    assert kl_feature_divergence(f, f) == 0.0
    # softmax is shift invariant
    assert kl_feature_divergence(f, f + 3.0) == pytest.approx(0.0, abs=1e-12)
    assert kl_feature_divergence(f, rng.standard_normal((5, 4))) > 0


def test_kl_feature_divergence_worked_value():
    # rows softmax to [0.5, 0.5] and [0.9, 0.1]
    kl = kl_feature_divergence(np.zeros((1, 2)), np.array([[math.log(9.0), 0.0]]))
    assert kl == pytest.approx(0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1))
    assert kl == pytest.approx(0.5108, abs=1e-4)


def test_kl_feature_gradient_matches_finite_differences(rng):
    f_ref = rng.standard_normal((3, 4))
    f_cur = rng.standard_normal((3, 4))
    analytic = kl_feature_gradient(f_ref, f_cur)

    def kl(values):
        return kl_feature_divergence(f_ref, values.reshape(3, 4))

    numeric = numerical_gradient(kl, f_cur.reshape(-1)).reshape(3, 4)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


def test_layer_change_profile(small_net):
    assert np.all(layer_change_profile(small_net, small_net) == 0)
    moved = reinit_decoder(small_net, 3)
    profile = layer_change_profile(small_net, moved)
    assert profile[0] == 0 and profile[1] > 0
    with pytest.raises(ValidationError):
        layer_change_profile(small_net, init_network([4, 8, 8, 3]))
