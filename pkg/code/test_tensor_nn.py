import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

import config
from errors import GraphCycleError, ShapeMismatchError
from tensor_nn import (Activation, Adam, AdamState, DropoutSpec, FcLayer, NormKind,
                       NormLayer, Parameter, Tape, adam_step, backward, dropout,
                       fc_forward, gradcheck, layer_norm_forward, make_rng,
                       relative_error, softmax_xent, step_decay_lr)


def identity_layer(name, n, activation=Activation.NONE):
    return FcLayer(Parameter(f"{name}.weight", np.eye(n)),
                   Parameter(f"{name}.bias", np.zeros(n)), activation)


def matmul_oracle(x, weight, bias):
    out = np.zeros((x.shape[0], weight.shape[0]))
    for i in range(x.shape[0]):
        for j in range(weight.shape[0]):
            total = bias[j]
            for k in range(weight.shape[1]):
                total += x[i, k] * weight[j, k]
            out[i, j] = total
    return out


def test_make_rng_is_keyed():
    assert make_rng(1, 2).random() == make_rng(1, 2).random()
    assert make_rng(1, 2).random() != make_rng(2, 1).random()


def test_fc_identity_passes_input_through():
    x = np.array([[1.5, -2.0, 0.25]])
    assert_array_equal(fc_forward(identity_layer("fc", 3), x), x)


def test_fc_relu():
    layer = identity_layer("fc", 2, Activation.RELU)
    assert_array_equal(fc_forward(layer, np.array([[-1.0, 2.0]])), [[0.0, 2.0]])


def test_fc_matches_loop_oracle():
    rng = np.random.default_rng(0)
    layer = FcLayer.create("fc", 5, 4, Activation.NONE, rng)
    layer.bias.value = rng.normal(size=4)
    x = rng.normal(size=(6, 5))
    expected = matmul_oracle(x, layer.weight.value, layer.bias.value)
    assert_allclose(fc_forward(layer, x), expected, atol=1e-12)


def test_fc_init_range():
    layer = FcLayer.create("fc", 16, 8, Activation.RELU, make_rng(0))
    assert np.abs(layer.weight.value).max() <= 1.0 / math.sqrt(16)
    assert_array_equal(layer.bias.value, np.zeros(8))


def test_fc_rejects_wrong_width():
    with pytest.raises(ShapeMismatchError):
        fc_forward(identity_layer("fc", 3), np.zeros((1, 4)))


def test_dropout_identity_cases():
    x = np.arange(10.0)
    assert dropout(x, DropoutSpec(0.0, True, make_rng(0))) is x
    assert dropout(x, DropoutSpec(0.2, False)) is x


def test_dropout_statistics():
    x = np.ones(100_000)
    y = dropout(x, DropoutSpec(0.5, True, make_rng(3)))
    survivors = y[y != 0.0]
    assert abs(len(survivors) / len(x) - 0.5) < 0.01
    assert np.all(survivors == 2.0)


def test_dropout_rate_bounds():
    with pytest.raises(ValueError):
        DropoutSpec(1.0, True)
    with pytest.raises(ValueError):
        DropoutSpec(-0.1, True)


def test_layer_norm_constant_row_gives_shift():
    shift = np.array([0.5, -1.0, 2.0])
    out = layer_norm_forward(np.full((1, 3), 7.0), np.ones(3), shift)
    assert_allclose(out[0], shift, atol=1e-12)


def test_layer_norm_two_points():
    out = layer_norm_forward(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2))
    scale = 1.0 / math.sqrt(1.0 + config.NORM_EPSILON)
    assert_allclose(out[0], [-scale, scale], atol=1e-9)


def test_layer_norm_random_rows():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(20, 16)) * 3.0 + 1.0
    out = layer_norm_forward(x, np.ones(16), np.zeros(16))
    var = x.var(axis=1)
    assert np.abs(out.mean(axis=1)).max() < 1e-9
    assert_allclose(out.var(axis=1), var / (var + config.NORM_EPSILON), atol=1e-9)


def test_softmax_xent_uniform_logits():
    loss, _ = softmax_xent(np.zeros((3, 40)), [0, 5, 39])
    assert loss == pytest.approx(math.log(40))


def test_softmax_xent_confident_margin():
    logits = np.zeros((1, 5))
    logits[0, 2] = 1e3
    loss, grad = softmax_xent(logits, [2])
    assert loss < 1e-12
    assert np.abs(grad).max() < 1e-12


def test_softmax_xent_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(4, 6))
    labels = [0, 3, 5, 1]
    _, grad = softmax_xent(logits, labels)
    h = 1e-5
    for idx in np.ndindex(logits.shape):
        plus, minus = logits.copy(), logits.copy()
        plus[idx] += h
        minus[idx] -= h
        numeric = (softmax_xent(plus, labels)[0] - softmax_xent(minus, labels)[0]) / (2 * h)
        assert relative_error(grad[idx], numeric) < 1e-6


def test_softmax_xent_ignores_a_constant_shift():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n, k = rng.integers(1, 6), rng.integers(2, 12)
        logits = rng.normal(scale=rng.uniform(0.1, 20.0), size=(n, k))
        labels = rng.integers(0, k, size=n)
        shift = rng.uniform(-500.0, 500.0)
        loss, grad = softmax_xent(logits, labels)
        shifted_loss, shifted_grad = softmax_xent(logits + shift, labels)
        assert shifted_loss == pytest.approx(loss, rel=1e-9, abs=1e-9)
        assert_allclose(shifted_grad, grad, atol=1e-12)


def test_single_fc_quadratic_gradient():
    rng = np.random.default_rng(3)
    layer = FcLayer.create("fc", 3, 2, Activation.NONE, rng)
    x = rng.normal(size=(1, 3))
    target = rng.normal(size=(1, 2))
    tape = Tape()
    out = tape.linear(tape.constant(x), layer)
    grads = backward(tape, tape.squared_error(out, target))
    residual = fc_forward(layer, x) - target
    assert_allclose(grads["fc.weight"], 2.0 * residual.T @ x, atol=1e-12)
    assert_allclose(grads["fc.bias"], 2.0 * residual[0], atol=1e-12)


def test_gather_gradient_follows_permutation():
    x = Parameter("x", np.arange(8.0).reshape(1, 4, 2))
    weights = np.random.default_rng(4).normal(size=(1, 4, 2))
    perm = np.array([[2, 0, 3, 1]])
    tape = Tape()
    out = tape.gather_rows(tape.param(x), perm)
    assert_array_equal(out.value[0], x.value[0][perm[0]])
    grads = backward(tape, tape.weighted_sum(out, weights))
    assert_array_equal(grads["x"][0][perm[0]], weights[0])


def test_gather_gradient_accumulates_repeats():
    x = Parameter("x", np.zeros((1, 3, 1)))
    tape = Tape()
    out = tape.gather_rows(tape.param(x), np.array([[1, 1, 2, 1]]))
    grads = backward(tape, tape.weighted_sum(out, np.ones((1, 4, 1))))
    assert_array_equal(grads["x"][0, :, 0], [0.0, 3.0, 1.0])


def test_backward_detects_out_of_order_parents():
    tape = Tape()
    first = tape.constant(1.0)
    second = tape._record(np.asarray(2.0), (first,), lambda g: (g,))
    first.parents = (second,)
    first.backward_fn = lambda g: (g,)
    with pytest.raises(GraphCycleError):
        backward(tape, second)


def test_backward_needs_scalar_loss():
    tape = Tape()
    with pytest.raises(ShapeMismatchError):
        backward(tape, tape.constant(np.zeros(3)))


def test_batch_norm_training_statistics_and_running_update():
    layer = NormLayer.create("bn", NormKind.BATCH_NORM, 2)
    x = np.array([[1.0, 10.0], [3.0, 20.0], [5.0, 30.0]])
    tape = Tape()
    out = tape.norm(tape.constant(x), layer, training=True)
    assert np.abs(out.value.mean(axis=0)).max() < 1e-12
    assert_array_equal(layer.running_mean, np.zeros(2))
    tape.commit_norm_updates()
    assert_allclose(layer.running_mean, 0.1 * x.mean(axis=0))
    assert_allclose(layer.running_var, 0.9 + 0.1 * x.var(axis=0))
    assert tape.norm_updates == []


def test_batch_norm_eval_uses_running_statistics():
    layer = NormLayer.create("bn", NormKind.BATCH_NORM, 2)
    layer.running_mean = np.array([1.0, -1.0])
    layer.running_var = np.array([4.0, 1.0])
    tape = Tape()
    out = tape.norm(tape.constant(np.array([[3.0, 0.0]])), layer, training=False)
    expected = [2.0 / math.sqrt(4.0 + config.NORM_EPSILON),
                1.0 / math.sqrt(1.0 + config.NORM_EPSILON)]
    assert_allclose(out.value[0], expected)
    assert tape.norm_updates == []


def test_norm_gradients_pass_gradcheck():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4, 5))
    weights = rng.normal(size=(3, 4, 5))
    for kind in (NormKind.LAYER_NORM, NormKind.BATCH_NORM):
        layer = NormLayer.create("n", kind, 5)
        layer.gain.value = rng.normal(size=5)
        source = Parameter("x", x.copy())

        def loss_fn(tape, layer=layer, source=source):
            out = tape.norm(tape.param(source), layer, training=True)
            return tape.weighted_sum(out, weights)

        report = gradcheck(loss_fn, [source] + layer.parameters())
        assert report.passed, report


def test_structure_ops_pass_gradcheck():
    rng = np.random.default_rng(6)
    a = Parameter("a", rng.normal(size=(2, 3, 4)))
    b = Parameter("b", rng.normal(size=(2, 3, 2)))
    weights = rng.normal(size=(2, 6, 3))

    def loss_fn(tape):
        h = tape.concat([tape.param(a), tape.param(b)], axis=-1)
        h = tape.transpose(h, (0, 2, 1))
        h = tape.reshape(tape.swap_last(h), (2, 3, 6))
        h = tape.swap_last(h)
        return tape.weighted_sum(h, weights)

    assert gradcheck(loss_fn, [a, b]).passed


def test_pooling_gradients():
    x = Parameter("x", np.array([[[1.0, 5.0], [3.0, 2.0]]]))
    tape = Tape()
    out = tape.reduce_max(tape.param(x), axis=-2)
    assert_array_equal(out.value, [[3.0, 5.0]])
    grads = backward(tape, tape.weighted_sum(out, np.array([[1.0, 2.0]])))
    assert_array_equal(grads["x"], [[[0.0, 2.0], [1.0, 0.0]]])

    x.grad = None
    tape = Tape()
    out = tape.reduce_mean(tape.param(x), axis=-2)
    assert_array_equal(out.value, [[2.0, 3.5]])
    grads = backward(tape, tape.weighted_sum(out, np.array([[1.0, 2.0]])))
    assert_array_equal(grads["x"], [[[0.5, 1.0], [0.5, 1.0]]])


def test_identity_linear_chain_gradcheck_is_exact():
    rng = np.random.default_rng(7)
    first = identity_layer("a", 4)
    second = identity_layer("b", 4)
    x = rng.uniform(0.5, 1.5, size=(2, 4))
    weights = rng.uniform(0.5, 1.5, size=(2, 4))

    def loss_fn(tape):
        return tape.weighted_sum(tape.linear(tape.linear(tape.constant(x), first), second),
                                 weights)

    report = gradcheck(loss_fn, first.parameters() + second.parameters(), tolerance=1e-8)
    assert report.max_rel_error < 1e-8
    assert report.checked == 2 * (16 + 4)


def test_gradcheck_samples_entries():
    layer = FcLayer.create("fc", 10, 10, Activation.RELU, make_rng(1))
    x = make_rng(2).normal(size=(3, 10))

    def loss_fn(tape):
        return tape.softmax_xent(tape.linear(tape.constant(x), layer), [0, 1, 2])

    report = gradcheck(loss_fn, layer.parameters(), max_entries=4)
    assert report.checked == 8
    assert report.passed


@pytest.mark.parametrize("max_entries", [None, 0])
def test_gradcheck_checks_every_entry_by_default(max_entries):
    layer = FcLayer.create("fc", 4, 3, Activation.NONE, make_rng(1))
    x = make_rng(2).normal(size=(2, 4))

    def loss_fn(tape):
        return tape.softmax_xent(tape.linear(tape.constant(x), layer), [0, 2])

    assert gradcheck(loss_fn, layer.parameters()).checked == 4 * 3 + 3
    report = gradcheck(loss_fn, layer.parameters(), max_entries=max_entries)
    assert report.checked == 4 * 3 + 3
    assert report.passed


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = Parameter("p", np.array([1.0, -2.0]))
    state = AdamState(m={"p": np.ones(2)}, v={"p": np.ones(2)})
    adam_step([p], {"p": np.zeros(2)}, state, lr=0.1)
    assert_array_equal(p.value, [1.0, -2.0])
    assert_allclose(state.m["p"], [0.9, 0.9])
    assert_allclose(state.v["p"], [0.999, 0.999])


def test_adam_first_step_moves_by_learning_rate():
    p = Parameter("p", np.zeros(3))
    adam_step([p], {"p": np.array([0.3, -7.0, 1e3])}, AdamState(), lr=0.01)
    assert_allclose(p.value, [-0.01, 0.01, -0.01], rtol=1e-6)


def test_adam_descends_convex_quadratic():
    target = np.array([3.0, -2.0, 1.5])
    p = Parameter("p", np.zeros(3))
    optimizer = Adam([p], lr=0.01)
    losses = []
    for _ in range(100):
        tape = Tape()
        loss = tape.squared_error(tape.param(p), target)
        optimizer.zero_grad()
        backward(tape, loss)
        optimizer.step()
        losses.append(float(loss.value))
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))
    assert optimizer.hyperparameters()["step"] == 100


def test_step_decay_lr():
    assert step_decay_lr(1e-3, 0) == 1e-3
    assert step_decay_lr(1e-3, 9) == 1e-3
    assert step_decay_lr(1e-3, 10) == pytest.approx(7e-4)
    assert step_decay_lr(1e-3, 25) == pytest.approx(1e-3 * 0.49)


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=20, deadline=None)
def test_linear_relu_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    first = FcLayer.create("a", 3, 5, Activation.RELU, rng)
    second = FcLayer.create("b", 5, 2, Activation.NONE, rng)
    x = rng.normal(size=(4, 3))

    def loss_fn(tape):
        h = tape.linear(tape.linear(tape.constant(x), first), second)
        return tape.softmax_xent(h, [0, 1, 1, 0])

    report = gradcheck(loss_fn, first.parameters() + second.parameters())
    # a pre-activation within one step of the kink makes the difference quotient one-sided
    pre = x @ first.weight.value.T + first.bias.value
    if np.abs(pre).min() > 10 * config.GRADCHECK_STEP:
        assert report.passed
