import numpy as np
import pytest

from aggronet.layers import (
    Layer,
    LayerKind,
    Mode,
    backward,
    conv_layer,
    dense_layer,
    dropout_layer,
    forward,
    gradient_check,
    layer_output_shape,
    maxpool_layer,
    simple_layer,
    softmax,
)
from aggronet.models import DimensionError
from aggronet.tensor import Padding

TOLERANCE = 1e-6


def dense_with(kernel, bias):
    return Layer(
        name="dense",
        kind=LayerKind.DENSE,
        params={"kernel": np.asarray(kernel, dtype=np.float64), "bias": np.asarray(bias, float)},
    )


def test_dense_forward_matches_oracle():
    layer = dense_with([[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]], [0.5, 0.0, 0.0])
    out, _ = forward(layer, np.array([[3.0, 4.0]]))
    np.testing.assert_allclose(out, [[3.5, 4.0, 2.0]])


def test_dense_backward_batch_of_one_is_outer_product():
    rng = np.random.default_rng(0)
    layer = dense_layer("dense", 4, 3, rng)
    x = rng.standard_normal((1, 4))
    upstream = rng.standard_normal((1, 3))
    _, cache = forward(layer, x)
    grads = backward(layer, cache, upstream)
    np.testing.assert_allclose(grads.params["kernel"], np.outer(x[0], upstream[0]), rtol=1e-6)
    np.testing.assert_allclose(grads.params["bias"], upstream[0], rtol=1e-6)


@pytest.mark.parametrize(
    "layer, x",
    [
        pytest.param(
            conv_layer("conv", 2, 3, 3, np.random.default_rng(1)),
            np.ones((2, 5, 5, 2)),
            id="conv",
        ),
        pytest.param(
            dense_layer("dense", 4, 3, np.random.default_rng(2)), np.ones((2, 4)), id="dense"
        ),
        pytest.param(simple_layer("relu", LayerKind.RELU), np.ones((2, 3)), id="relu"),
        pytest.param(maxpool_layer("pool", 2, 2), np.ones((1, 4, 4, 2)), id="maxpool"),
        pytest.param(
            simple_layer("gap", LayerKind.GLOBAL_AVG_POOL), np.ones((2, 3, 3, 4)), id="gap"
        ),
        pytest.param(
            simple_layer("softmax", LayerKind.SOFTMAX), np.ones((2, 5)), id="softmax"
        ),
    ],
)
def test_zero_upstream_gives_zero_gradients(layer, x):
    out, cache = forward(layer, x)
    grads = backward(layer, cache, np.zeros_like(out))
    assert not np.asarray(grads.inputs).any()
    for grad in grads.params.values():
        assert not grad.any()


def test_dropout_rate_zero_in_train_mode_is_identity():
    x = np.random.default_rng(3).standard_normal((4, 6))
    out, _ = forward(dropout_layer("drop", 0.0), x, Mode.TRAIN, np.random.default_rng(0))
    np.testing.assert_array_equal(out, x)


def test_dropout_in_infer_mode_is_identity():
    x = np.random.default_rng(4).standard_normal((4, 6))
    out, _ = forward(dropout_layer("drop", 0.5), x, Mode.INFER)
    np.testing.assert_array_equal(out, x)


@pytest.mark.parametrize(
    "rate",
    [
        pytest.param(1.0, id="rate one"),
        pytest.param(-0.1, id="negative rate"),
    ],
)
def test_dropout_rejects_rates_outside_unit_interval(rate):
    with pytest.raises(ValueError):
        dropout_layer("drop", rate)


def test_dropout_train_mode_needs_rng():
    with pytest.raises(ValueError):
        forward(dropout_layer("drop", 0.5), np.ones((2, 2)), Mode.TRAIN)


def test_dropout_is_deterministic_for_a_seed():
    layer = dropout_layer("drop", 0.5)
    x = np.ones((3, 8))
    first, _ = forward(layer, x, Mode.TRAIN, np.random.default_rng(11))
    second, _ = forward(layer, x, Mode.TRAIN, np.random.default_rng(11))
    np.testing.assert_array_equal(first, second)
    assert set(np.unique(first)) <= {0.0, 2.0}


# per-element tolerance; 100_000 draws put it near 6 standard deviations
DROPOUT_TOLERANCE = 0.02


def test_dropout_expectation_converges_to_input():
    layer = dropout_layer("drop", 0.5)
    x = np.array([0.5, 1.0, 1.5, 2.0])
    draws = 100_000
    out, _ = forward(layer, np.tile(x, (draws, 1)), Mode.TRAIN, np.random.default_rng(0))
    np.testing.assert_allclose(out.mean(axis=0) / x, 1.0, atol=DROPOUT_TOLERANCE)


def test_dropout_expectation_holds_across_seeds():
    layer = dropout_layer("drop", 0.5)
    x = np.linspace(0.5, 2.0, 16).reshape(2, 8)
    total = np.zeros_like(x)
    seeds = 5_000
    for seed in range(seeds):
        out, _ = forward(layer, x, Mode.TRAIN, np.random.default_rng(seed))
        total += out
    ratio = total / seeds / x
    assert abs(ratio.mean() - 1.0) < DROPOUT_TOLERANCE


@pytest.mark.parametrize(
    "logits, expected",
    [
        pytest.param([[1000.0, 0.0]], [[1.0, 0.0]], id="Large logit stays finite"),
        pytest.param([[0.3] * 8], [[0.125] * 8], id="Uniform logits"),
        pytest.param([[5.0]], [[1.0]], id="Single class"),
    ],
)
def test_softmax_examples(logits, expected):
    probs = softmax(np.array(logits))
    assert np.isfinite(probs).all()
    np.testing.assert_allclose(probs, expected, atol=1e-12)


def test_softmax_matches_direct_formula_and_is_shift_invariant():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((10, 8)).astype(np.float32)
    probs = softmax(logits)
    wide = logits.astype(np.float64)
    direct = np.exp(wide) / np.exp(wide).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(probs, direct, atol=TOLERANCE)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=TOLERANCE)
    np.testing.assert_allclose(softmax(logits + np.float32(3.0)), probs, atol=TOLERANCE)


def test_softmax_rejects_empty_class_axis():
    with pytest.raises(DimensionError):
        softmax(np.zeros((2, 0)))


def test_maxpool_ties_route_gradient_to_first_maximum():
    layer = maxpool_layer("pool", 2, 2)
    out, cache = forward(layer, np.ones((1, 2, 2, 1)))
    grads = backward(layer, cache, np.ones_like(out))
    np.testing.assert_array_equal(grads.inputs[0, :, :, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_concat_backward_splits_upstream():
    layer = simple_layer("concat", LayerKind.CONCAT)
    out, cache = forward(layer, [np.zeros((2, 3)), np.zeros((2, 5))])
    upstream = np.arange(16.0).reshape(2, 8)
    left, right = backward(layer, cache, upstream).inputs
    np.testing.assert_array_equal(left, upstream[:, :3])
    np.testing.assert_array_equal(right, upstream[:, 3:])


def test_backward_rejects_mismatched_upstream():
    layer = simple_layer("relu", LayerKind.RELU)
    _, cache = forward(layer, np.ones((2, 3)))
    with pytest.raises(DimensionError):
        backward(layer, cache, np.ones((3, 2)))


def test_single_input_layers_reject_sequences():
    with pytest.raises(DimensionError):
        forward(simple_layer("relu", LayerKind.RELU), [np.ones((1, 2)), np.ones((1, 2))])


@pytest.mark.parametrize(
    "layer, shape",
    [
        pytest.param(
            conv_layer("conv", 3, 4, 3, np.random.default_rng(0), stride=2),
            (2, 7, 6, 3),
            id="conv stride 2 same",
        ),
        pytest.param(
            conv_layer("conv", 3, 4, 5, np.random.default_rng(0), padding=Padding.VALID),
            (1, 7, 6, 3),
            id="conv valid",
        ),
        pytest.param(maxpool_layer("pool", 3, 1, Padding.SAME), (1, 5, 5, 2), id="pool same"),
        pytest.param(maxpool_layer("pool", 2, 2), (1, 5, 4, 2), id="pool valid"),
        pytest.param(
            simple_layer("gap", LayerKind.GLOBAL_AVG_POOL), (3, 4, 4, 6), id="global pool"
        ),
    ],
)
def test_layer_output_shape_agrees_with_forward(layer, shape):
    out, _ = forward(layer, np.ones(shape))
    assert layer_output_shape(layer, shape) == out.shape


@pytest.mark.parametrize(
    "make_layer, input_shape",
    [
        pytest.param(
            lambda rng: dense_layer("dense", 4, 3, rng), (2, 4), id="dense 4 to 3"
        ),
        pytest.param(
            lambda rng: conv_layer("conv", 1, 2, 3, rng), (1, 5, 5, 1), id="conv 3x3 same"
        ),
        pytest.param(
            lambda rng: conv_layer("conv", 2, 2, 3, rng, stride=2),
            (1, 4, 4, 2),
            id="conv stride 2",
        ),
        pytest.param(
            lambda rng: conv_layer("conv", 1, 2, 3, rng, padding=Padding.VALID),
            (1, 4, 4, 1),
            id="conv valid",
        ),
        pytest.param(lambda rng: simple_layer("relu", LayerKind.RELU), (2, 6), id="relu"),
        pytest.param(lambda rng: maxpool_layer("pool", 2, 2), (1, 4, 4, 2), id="maxpool"),
        pytest.param(
            lambda rng: maxpool_layer("pool", 3, 1, Padding.SAME),
            (1, 3, 3, 1),
            id="maxpool same",
        ),
        pytest.param(
            lambda rng: simple_layer("gap", LayerKind.GLOBAL_AVG_POOL),
            (2, 3, 3, 2),
            id="global avg pool",
        ),
        pytest.param(lambda rng: dropout_layer("drop", 0.5), (2, 6), id="dropout"),
        pytest.param(
            lambda rng: simple_layer("softmax", LayerKind.SOFTMAX), (2, 4), id="softmax"
        ),
        pytest.param(
            lambda rng: simple_layer("concat", LayerKind.CONCAT),
            [(2, 3), (2, 2)],
            id="concat",
        ),
    ],
)
@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(make_layer, input_shape, seed):
    layer = make_layer(np.random.default_rng(seed))
    report = gradient_check(layer, input_shape, seed)
    assert report.entries_checked > 0
    assert report.max_relative_error < TOLERANCE, report.worst_entry


def test_gradient_check_leaves_layer_untouched():
    layer = dense_layer("dense", 3, 2, np.random.default_rng(0))
    before = {k: v.copy() for k, v in layer.params.items()}
    gradient_check(layer, (2, 3), seed=3)
    for name, value in before.items():
        np.testing.assert_array_equal(layer.params[name], value)
        assert layer.params[name].dtype == np.float32
