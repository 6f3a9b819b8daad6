"""Differentiable layers: forward, exact backward, and a finite-difference gradient check."""

from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, cast

import numpy as np

from aggronet.models import DimensionError
from aggronet.tensor import (
    ConvParams,
    ElementwiseOp,
    Padding,
    Tensor,
    concat_channels,
    conv2d_with_cols,
    elementwise,
    ensure_finite,
    global_avg_pool,
    matmul,
    output_size,
    pad_spatial,
    windows,
)


class LayerKind(Enum):
    CONV = "conv"
    DENSE = "dense"
    RELU = "relu"
    MAXPOOL = "maxpool"
    GLOBAL_AVG_POOL = "global_avg_pool"
    DROPOUT = "dropout"
    CONCAT = "concat"
    SOFTMAX = "softmax"


class Mode(Enum):
    TRAIN = "train"
    INFER = "infer"


@dataclass
class Layer:
    """A named layer. ``config`` carries kind-specific settings (stride, padding, window, rate)."""

    name: str
    kind: LayerKind
    params: dict[str, Tensor] = field(default_factory=dict)
    trainable: bool = True
    config: dict[str, Any] = field(default_factory=dict)


@dataclass
class LayerCache:
    kind: LayerKind
    output_shape: tuple[int, ...]
    saved: tuple[Any, ...]


@dataclass
class GradientBundle:
    params: dict[str, Tensor]
    inputs: Tensor | tuple[Tensor, ...]


def he_uniform(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype: Any = np.float32
) -> Tensor:
    limit = np.sqrt(6.0 / fan_in)
    weights: Tensor = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return weights


def conv_layer(
    name: str,
    c_in: int,
    c_out: int,
    kernel_size: int,
    rng: np.random.Generator,
    stride: int = 1,
    padding: Padding = Padding.SAME,
) -> Layer:
    shape = (kernel_size, kernel_size, c_in, c_out)
    return Layer(
        name=name,
        kind=LayerKind.CONV,
        params={
            "kernel": he_uniform(rng, shape, kernel_size * kernel_size * c_in),
            "bias": np.zeros(c_out, dtype=np.float32),
        },
        config={"stride": stride, "padding": padding},
    )


def dense_layer(name: str, fan_in: int, width: int, rng: np.random.Generator) -> Layer:
    return Layer(
        name=name,
        kind=LayerKind.DENSE,
        params={
            "kernel": he_uniform(rng, (fan_in, width), fan_in),
            "bias": np.zeros(width, dtype=np.float32),
        },
    )


def maxpool_layer(
    name: str, window: int, stride: int, padding: Padding = Padding.VALID
) -> Layer:
    return Layer(
        name=name,
        kind=LayerKind.MAXPOOL,
        config={"window": window, "stride": stride, "padding": padding},
    )


def dropout_layer(name: str, rate: float) -> Layer:
    _check_rate(rate)
    return Layer(name=name, kind=LayerKind.DROPOUT, config={"rate": rate})


def simple_layer(name: str, kind: LayerKind) -> Layer:
    """Parameter-free layer of kind relu, global_avg_pool, concat or softmax."""
    return Layer(name=name, kind=kind)


def _check_rate(rate: float) -> None:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction, so finite logits never overflow."""
    if logits.ndim != 2 or logits.shape[1] < 1:
        raise DimensionError(f"softmax expects [N, K] logits with K >= 1, got {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    probs: Tensor = exps / exps.sum(axis=1, keepdims=True)
    return ensure_finite(probs, "softmax")


def _single(inputs: Tensor | Sequence[Tensor], layer: Layer) -> Tensor:
    if isinstance(inputs, np.ndarray):
        return inputs
    raise DimensionError(f"layer {layer.name} ({layer.kind.value}) takes a single tensor input")


def forward(
    layer: Layer,
    inputs: Tensor | Sequence[Tensor],
    mode: Mode = Mode.INFER,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, LayerCache]:
    """
    Run one layer forward.

    Args:
        layer (Layer): The layer to apply.
        inputs (Tensor | Sequence[Tensor]): One tensor, or a sequence of tensors for concat.
        mode (Mode): TRAIN enables dropout; INFER makes dropout the identity.
        rng (np.random.Generator | None): Source of dropout masks; required for dropout in
            TRAIN mode with a non-zero rate.

    Returns:
        tuple[Tensor, LayerCache]: The output and what ``backward`` needs.

    Raises:
        DimensionError: If the input shape is incompatible with the layer.
        ValueError: If a dropout rate lies outside [0, 1).
    """
    kind = layer.kind
    if kind is LayerKind.CONCAT:
        parts = (inputs,) if isinstance(inputs, np.ndarray) else tuple(inputs)
        out = concat_channels(*parts)
        widths = tuple(p.shape[-1] for p in parts)
        return out, LayerCache(kind, out.shape, (widths,))

    x = _single(inputs, layer)
    saved: tuple[Any, ...]
    if kind is LayerKind.CONV:
        stride, padding = layer.config.get("stride", 1), layer.config.get("padding", Padding.SAME)
        out, cols = conv2d_with_cols(x, ConvParams(layer.params["kernel"], stride, padding))
        out = out + layer.params["bias"].astype(out.dtype, copy=False)
        saved = (x, cols)
    elif kind is LayerKind.DENSE:
        out = matmul(x, layer.params["kernel"])
        bias = layer.params["bias"]
        if bias.shape != (out.shape[1],):
            raise DimensionError(f"dense bias {bias.shape} does not match output {out.shape}")
        out = out + bias.astype(out.dtype, copy=False)
        saved = (x,)
    elif kind is LayerKind.RELU:
        out = elementwise(ElementwiseOp.RELU, x)
        saved = (x > 0,)
    elif kind is LayerKind.MAXPOOL:
        out, saved = _maxpool_forward(x, layer)
    elif kind is LayerKind.GLOBAL_AVG_POOL:
        out = global_avg_pool(x)
        saved = (x.shape,)
    elif kind is LayerKind.DROPOUT:
        rate = float(layer.config.get("rate", 0.0))
        _check_rate(rate)
        if mode is Mode.INFER or rate == 0.0:
            out, saved = x, (None,)
        else:
            if rng is None:
                raise ValueError(f"dropout layer {layer.name} needs an rng in train mode")
            keep = rng.random(x.shape) >= rate
            mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
            out, saved = x * mask, (mask,)
    elif kind is LayerKind.SOFTMAX:
        out = softmax(x)
        saved = (out,)
    else:
        raise ValueError(f"Unsupported layer kind: {kind}")
    return ensure_finite(out, layer.name), LayerCache(kind, out.shape, saved)


def _maxpool_forward(x: Tensor, layer: Layer) -> tuple[Tensor, tuple[Any, ...]]:
    window, stride = layer.config["window"], layer.config["stride"]
    padding = layer.config.get("padding", Padding.VALID)
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects a rank-4 tensor, got shape {x.shape}")
    if padding is Padding.VALID and (x.shape[1] < window or x.shape[2] < window):
        raise DimensionError(f"maxpool2d window {window} larger than spatial extent of {x.shape}")
    padded, pads = pad_spatial(x, window, window, stride, padding, fill=-np.inf)
    patches = windows(padded, window, window, stride)
    flat = patches.reshape(*patches.shape[:4], window * window)
    # argmax picks the first maximal element, which is where ties route their gradient
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return out, (x.shape, padded.shape, pads, argmax)


def backward(layer: Layer, cache: LayerCache, upstream: Tensor) -> GradientBundle:
    """
    Exact reverse-mode gradients of one layer.

    Args:
        layer (Layer): The layer that produced ``cache``.
        cache (LayerCache): Returned by the matching ``forward`` call.
        upstream (Tensor): Gradient of the objective with respect to the layer output.

    Returns:
        GradientBundle: Parameter gradients keyed like ``layer.params`` and the input gradient
            (a tuple for concat).
    """
    if upstream.shape != cache.output_shape:
        raise DimensionError(
            f"upstream gradient {upstream.shape} does not match output {cache.output_shape} "
            f"of layer {layer.name}"
        )
    kind = cache.kind
    if kind is LayerKind.CONV:
        return _conv_backward(layer, cache, upstream)
    if kind is LayerKind.DENSE:
        (x,) = cache.saved
        kernel = layer.params["kernel"].astype(upstream.dtype, copy=False)
        return GradientBundle(
            params={"kernel": x.T @ upstream, "bias": upstream.sum(axis=0)},
            inputs=upstream @ kernel.T,
        )
    if kind is LayerKind.RELU:
        (positive,) = cache.saved
        return GradientBundle(params={}, inputs=upstream * positive)
    if kind is LayerKind.MAXPOOL:
        return GradientBundle(params={}, inputs=_maxpool_backward(layer, cache, upstream))
    if kind is LayerKind.GLOBAL_AVG_POOL:
        (shape,) = cache.saved
        n, h, w, c = shape
        grad = np.broadcast_to(upstream[:, None, None, :] / (h * w), shape).copy()
        return GradientBundle(params={}, inputs=grad)
    if kind is LayerKind.DROPOUT:
        (mask,) = cache.saved
        return GradientBundle(params={}, inputs=upstream if mask is None else upstream * mask)
    if kind is LayerKind.CONCAT:
        (widths,) = cache.saved
        cuts = np.cumsum(widths)[:-1]
        return GradientBundle(params={}, inputs=tuple(np.split(upstream, cuts, axis=-1)))
    if kind is LayerKind.SOFTMAX:
        (probs,) = cache.saved
        inner = (upstream * probs).sum(axis=1, keepdims=True)
        return GradientBundle(params={}, inputs=probs * (upstream - inner))
    raise ValueError(f"Unsupported layer kind: {kind}")


def _scatter_windows(
    grad_padded: Tensor, di: int, dj: int, stride: int, values: Tensor
) -> None:
    out_h, out_w = values.shape[1], values.shape[2]
    grad_padded[
        :, di : di + stride * (out_h - 1) + 1 : stride, dj : dj + stride * (out_w - 1) + 1 : stride
    ] += values


def _crop(padded: Tensor, pads: tuple[int, int, int, int], shape: tuple[int, ...]) -> Tensor:
    top, _, left, _ = pads
    cropped: Tensor = padded[:, top : top + shape[1], left : left + shape[2], :]
    return cropped


def _conv_backward(layer: Layer, cache: LayerCache, upstream: Tensor) -> GradientBundle:
    x, cols = cache.saved
    kernel = layer.params["kernel"].astype(upstream.dtype, copy=False)
    kh, kw, c_in, c_out = kernel.shape
    stride, padding = layer.config.get("stride", 1), layer.config.get("padding", Padding.SAME)
    flat_up = upstream.reshape(-1, c_out)
    grad_kernel = (cols.reshape(-1, kh * kw * c_in).T @ flat_up).reshape(kernel.shape)
    grad_cols = (flat_up @ kernel.reshape(-1, c_out).T).reshape(
        *upstream.shape[:3], kh, kw, c_in
    )
    padded, pads = pad_spatial(x, kh, kw, stride, padding)
    grad_padded = np.zeros(padded.shape, dtype=upstream.dtype)
    for i in range(kh):
        for j in range(kw):
            _scatter_windows(grad_padded, i, j, stride, grad_cols[:, :, :, i, j, :])
    return GradientBundle(
        params={"kernel": grad_kernel, "bias": upstream.sum(axis=(0, 1, 2))},
        inputs=_crop(grad_padded, pads, x.shape),
    )


def _maxpool_backward(layer: Layer, cache: LayerCache, upstream: Tensor) -> Tensor:
    shape, padded_shape, pads, argmax = cache.saved
    window, stride = layer.config["window"], layer.config["stride"]
    grad_padded = np.zeros(padded_shape, dtype=upstream.dtype)
    for i in range(window):
        for j in range(window):
            routed = np.where(argmax == i * window + j, upstream, 0).astype(upstream.dtype)
            _scatter_windows(grad_padded, i, j, stride, routed)
    return _crop(grad_padded, pads, shape)


def layer_output_shape(layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Shape a single-input layer produces from ``shape``, without running it."""
    kind = layer.kind
    if kind is LayerKind.CONV:
        kh, kw, _, c_out = layer.params["kernel"].shape
        stride, padding = layer.config.get("stride", 1), layer.config.get("padding", Padding.SAME)
        return (
            shape[0],
            output_size(shape[1], kh, stride, padding),
            output_size(shape[2], kw, stride, padding),
            c_out,
        )
    if kind is LayerKind.MAXPOOL:
        window, stride = layer.config["window"], layer.config["stride"]
        padding = layer.config.get("padding", Padding.VALID)
        return (
            shape[0],
            output_size(shape[1], window, stride, padding),
            output_size(shape[2], window, stride, padding),
            shape[3],
        )
    if kind is LayerKind.DENSE:
        return (shape[0], layer.params["kernel"].shape[1])
    if kind is LayerKind.GLOBAL_AVG_POOL:
        return (shape[0], shape[3])
    return shape


ERROR_FLOOR = 1e-8


@dataclass
class GradientCheckReport:
    max_relative_error: float
    worst_entry: str
    entries_checked: int


def _sample_input(
    kind: LayerKind, shape: tuple[int, ...], rng: np.random.Generator
) -> Tensor:
    if kind is LayerKind.MAXPOOL:
        # distinct, well-spaced values keep every window's argmax away from a tie
        size = int(np.prod(shape))
        spaced = (rng.permutation(size) - (size - 1) / 2.0) * (2.0 / max(size, 1))
        return spaced.reshape(shape).astype(np.float64)
    x = rng.uniform(-1.0, 1.0, size=shape)
    if kind is LayerKind.RELU:
        near_kink = np.abs(x) <= 1e-3
        while near_kink.any():
            x[near_kink] = rng.uniform(-1.0, 1.0, size=int(near_kink.sum()))
            near_kink = np.abs(x) <= 1e-3
    return x


def gradient_check(
    layer: Layer,
    input_shape: tuple[int, ...] | Sequence[tuple[int, ...]],
    seed: int,
    step: float = 1e-5,
) -> GradientCheckReport:
    """
    Compare ``backward`` against central finite differences in double precision.

    The objective is a fixed random projection of the layer output, so every output element
    contributes. Dropout masks are replayed from the same seed for every evaluation.

    Args:
        layer (Layer): The layer to check; its parameters are copied, never modified.
        input_shape: Input shape, or a sequence of shapes for concat.
        seed (int): Seed for inputs, projection and dropout masks.
        step (float): Finite-difference step.

    Returns:
        GradientCheckReport: Max of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
            over every parameter and input element.
    """
    rng = np.random.default_rng(seed)
    probe = Layer(
        name=layer.name,
        kind=layer.kind,
        params={k: v.astype(np.float64) for k, v in layer.params.items()},
        trainable=layer.trainable,
        config=dict(layer.config),
    )
    shapes: list[tuple[int, ...]]
    if layer.kind is LayerKind.CONCAT:
        shapes = [tuple(s) for s in cast(Sequence[tuple[int, ...]], input_shape)]
    else:
        shapes = [cast(tuple[int, ...], tuple(input_shape))]
    inputs = [_sample_input(layer.kind, shape, rng) for shape in shapes]

    def run() -> tuple[Tensor, LayerCache]:
        feed: Tensor | list[Tensor] = inputs if layer.kind is LayerKind.CONCAT else inputs[0]
        return forward(probe, feed, Mode.TRAIN, np.random.default_rng([seed, 1]))

    out, cache = run()
    projection = rng.uniform(-1.0, 1.0, size=out.shape)
    grads = backward(probe, cache, projection)
    input_grads = grads.inputs if isinstance(grads.inputs, tuple) else (grads.inputs,)

    targets: list[tuple[str, Tensor, Tensor]] = [
        (f"param {name}", probe.params[name], grads.params[name]) for name in probe.params
    ]
    targets += [
        (f"input {i}", tensor, grad)
        for i, (tensor, grad) in enumerate(zip(inputs, input_grads, strict=True))
    ]

    worst, worst_entry, checked = 0.0, "", 0
    for label, tensor, analytic in targets:
        for idx in np.ndindex(tensor.shape):
            original = tensor[idx]
            tensor[idx] = original + step
            plus, _ = run()
            tensor[idx] = original - step
            minus, _ = run()
            tensor[idx] = original
            numeric = float(np.sum((plus - minus) * projection) / (2.0 * step))
            exact = float(analytic[idx])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), ERROR_FLOOR)
            checked += 1
            if error > worst:
                worst, worst_entry = error, f"{label}{list(idx)}"
    return GradientCheckReport(worst, worst_entry, checked)
