"""Dense NHWC tensor kernels on numpy arrays.

Every kernel is a pure function of its inputs, keeps the floating dtype of its first operand and
raises ``NonFiniteError`` instead of returning NaN or Inf.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view

from aggronet.models import DimensionError, NonFiniteError

Tensor = npt.NDArray[np.floating[Any]]


class Precision(Enum):
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self) -> type[np.floating[Any]]:
        return np.float32 if self is Precision.SINGLE else np.float64


class Padding(Enum):
    SAME = "same"
    VALID = "valid"


class ElementwiseOp(Enum):
    ADD = "add"
    MUL = "mul"
    RELU = "relu"
    SCALE = "scale"


def as_tensor(data: Any, precision: Precision = Precision.SINGLE) -> Tensor:
    """Copy ``data`` into a contiguous tensor of the requested precision."""
    tensor: Tensor = np.array(data, dtype=precision.dtype, order="C")
    return ensure_finite(tensor, "as_tensor")


def ensure_finite(x: Tensor, op: str) -> Tensor:
    if not np.isfinite(x).all():
        bad = int(x.size - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{op} produced {bad} non-finite value(s) in shape {x.shape}")
    return x


def _require_rank(x: Tensor, rank: int, op: str) -> None:
    if x.ndim != rank:
        raise DimensionError(f"{op} expects a rank-{rank} tensor, got shape {x.shape}")


@dataclass(frozen=True)
class ConvParams:
    """Kernel of shape [kh, kw, c_in, c_out] with stride and padding mode."""

    kernel: Tensor
    stride: int = 1
    padding: Padding = Padding.SAME

    def __post_init__(self) -> None:
        if self.kernel.ndim != 4:
            raise DimensionError(
                f"conv kernel must have shape [kh, kw, c_in, c_out], got {self.kernel.shape}"
            )
        if self.stride < 1:
            raise DimensionError(f"conv stride must be positive, got {self.stride}")
        kh, kw = self.kernel.shape[:2]
        if self.padding is Padding.SAME and (kh % 2 == 0 or kw % 2 == 0):
            raise DimensionError(f"same padding needs odd kernel sizes, got {kh}x{kw}")


def same_padding(size: int, window: int, stride: int) -> tuple[int, int, int]:
    """Output size and (before, after) zero padding for ``same`` mode.

    The odd pixel of an uneven split goes after (bottom/right).
    """
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + window - size, 0)
    return out, total // 2, total - total // 2


def output_size(size: int, window: int, stride: int, padding: Padding) -> int:
    if padding is Padding.SAME:
        return same_padding(size, window, stride)[0]
    return (size - window) // stride + 1


def pad_spatial(
    x: Tensor, kh: int, kw: int, stride: int, padding: Padding, fill: float = 0.0
) -> tuple[Tensor, tuple[int, int, int, int]]:
    """Pad an NHWC tensor for a window op; returns it with (top, bottom, left, right)."""
    if padding is Padding.VALID:
        return x, (0, 0, 0, 0)
    _, top, bottom = same_padding(x.shape[1], kh, stride)
    _, left, right = same_padding(x.shape[2], kw, stride)
    if top == bottom == left == right == 0:
        return x, (0, 0, 0, 0)
    padded = np.pad(
        x, ((0, 0), (top, bottom), (left, right), (0, 0)), mode="constant", constant_values=fill
    )
    return padded, (top, bottom, left, right)


def windows(x: Tensor, kh: int, kw: int, stride: int) -> Tensor:
    """Strided window view of an (already padded) NHWC tensor: [N, H', W', C, kh, kw]."""
    view: Tensor = sliding_window_view(x, (kh, kw), axis=(1, 2))
    return view[:, ::stride, ::stride]


def im2col(x: Tensor, kh: int, kw: int, stride: int, padding: Padding) -> Tensor:
    """Patch matrix of shape [N, H', W', kh*kw*C] ordered to match a [kh, kw, C, ...] kernel."""
    padded, _ = pad_spatial(x, kh, kw, stride, padding)
    patches = windows(padded, kh, kw, stride)
    n, out_h, out_w, c = patches.shape[:4]
    cols: Tensor = patches.transpose(0, 1, 2, 4, 5, 3).reshape(n, out_h, out_w, kh * kw * c)
    return cols


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [M, K] and a [K, N] tensor."""
    _require_rank(a, 2, "matmul")
    _require_rank(b, 2, "matmul")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out: Tensor = np.matmul(a, b.astype(a.dtype, copy=False))
    return ensure_finite(out, "matmul")


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Cross-correlation (no kernel flip) of an NHWC batch with ``params.kernel``.

    Raises:
        DimensionError: If the input is not rank 4 or its channel count differs from the
            kernel's ``c_in``.
    """
    return conv2d_with_cols(x, params)[0]


def conv2d_with_cols(x: Tensor, params: ConvParams) -> tuple[Tensor, Tensor]:
    """``conv2d`` that also returns the patch matrix, which the backward pass reuses."""
    _require_rank(x, 4, "conv2d")
    kh, kw, c_in, c_out = params.kernel.shape
    if x.shape[3] != c_in:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} has {x.shape[3]} channels, "
            f"kernel {params.kernel.shape} expects {c_in}"
        )
    if params.padding is Padding.VALID and (x.shape[1] < kh or x.shape[2] < kw):
        raise DimensionError(f"conv2d valid kernel {kh}x{kw} larger than input {x.shape}")
    cols = im2col(x, kh, kw, params.stride, params.padding)
    weights = params.kernel.astype(x.dtype, copy=False).reshape(kh * kw * c_in, c_out)
    out: Tensor = cols @ weights
    return ensure_finite(out, "conv2d"), cols


def maxpool2d(x: Tensor, window: int, stride: int, padding: Padding = Padding.VALID) -> Tensor:
    """Max over ``window``x``window`` cells. ``same`` pads with -inf so padding never wins."""
    _require_rank(x, 4, "maxpool2d")
    if window < 1 or stride < 1:
        raise DimensionError(f"maxpool2d window and stride must be >= 1, got {window}/{stride}")
    if padding is Padding.VALID and (x.shape[1] < window or x.shape[2] < window):
        raise DimensionError(f"maxpool2d window {window} larger than spatial extent of {x.shape}")
    padded, _ = pad_spatial(x, window, window, stride, padding, fill=-np.inf)
    out: Tensor = windows(padded, window, window, stride).max(axis=(4, 5))
    return ensure_finite(out, "maxpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    _require_rank(x, 4, "global_avg_pool")
    if x.shape[1] * x.shape[2] < 1:
        raise DimensionError(f"global_avg_pool needs a non-empty spatial map, got {x.shape}")
    out: Tensor = x.mean(axis=(1, 2), dtype=np.float64).astype(x.dtype)
    return ensure_finite(out, "global_avg_pool")


def concat_channels(*tensors: Tensor) -> Tensor:
    """Join tensors along the last (channel/feature) axis.

    All leading dimensions must agree; zero-width operands are allowed.
    """
    if not tensors:
        raise DimensionError("concat_channels needs at least one tensor")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(
                f"concat_channels leading dimensions differ: {tensors[0].shape} vs {t.shape}"
            )
    out: Tensor = np.concatenate(tensors, axis=-1).astype(tensors[0].dtype, copy=False)
    return out


def elementwise(op: ElementwiseOp, x: Tensor, y: Tensor | float | None = None) -> Tensor:
    """Apply ``op``; binary ops accept a scalar or an equal-shaped tensor as ``y``."""
    if op is ElementwiseOp.RELU:
        out: Tensor = np.maximum(x, 0).astype(x.dtype, copy=False)
        return ensure_finite(out, "relu")
    if y is None:
        raise DimensionError(f"{op.value} needs a second operand")
    if op is ElementwiseOp.SCALE and not np.isscalar(y):
        raise DimensionError(f"scale expects a scalar factor, got shape {np.shape(y)}")
    if not np.isscalar(y) and np.shape(y) != x.shape:
        raise DimensionError(f"{op.value} operands are incompatible: {x.shape} vs {np.shape(y)}")
    if op is ElementwiseOp.ADD:
        out = np.add(x, y, dtype=x.dtype)
    else:
        out = np.multiply(x, y, dtype=x.dtype)
    return ensure_finite(out, op.value)
