"""Pixel transforms (rescale, resize, flip/rotate/zoom augmentation) and the synthetic corpus."""

import math
from collections.abc import Sequence
from concurrent.futures import Executor

import numpy as np

from aggronet.models import AugmentParams, Dataset, Image, LabeledImage
from aggronet.tensor import Tensor

# base colours of the synthetic classes, far enough apart that mean colour separates them
PALETTE: tuple[tuple[int, int, int], ...] = (
    (200, 60, 60),
    (60, 170, 60),
    (60, 80, 200),
    (210, 190, 60),
    (170, 70, 190),
    (60, 190, 190),
    (230, 130, 40),
    (120, 120, 120),
)
MOTIF_AMPLITUDE = 35.0
NOISE_SIGMA = 10.0


def rescale(image: Image) -> Tensor:
    """8-bit pixels to float32 in [0, 1] (divide by 255)."""
    scaled: Tensor = image.pixels.astype(np.float32) / np.float32(255.0)
    return scaled


def _source_coords(dst: int, src: int) -> np.ndarray:
    scale = src / dst
    coords = (np.arange(dst, dtype=np.float64) + 0.5) * scale - 0.5
    return np.clip(coords, 0.0, src - 1)


def resize_bilinear(image: Tensor, width: int, height: int) -> Tensor:
    """
    Resize an [H, W, C] float image with bilinear interpolation.

    Uses half-pixel centres: source = (dst + 0.5) * scale - 0.5, clamped to the border.
    Interpolation is done in double precision and cast back to the input dtype.
    """
    if width < 1 or height < 1:
        raise ValueError(f"Target size must be at least 1x1, got {width}x{height}")
    src_h, src_w = image.shape[:2]
    if (src_h, src_w) == (height, width):
        return image.copy()
    ys = _source_coords(height, src_h)
    xs = _source_coords(width, src_w)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]

    data = image.astype(np.float64)
    top_row, bottom_row = data[y0], data[y1]
    # a + (b - a) * w keeps constant regions exactly constant
    top = top_row[:, x0] + (top_row[:, x1] - top_row[:, x0]) * wx
    bottom = bottom_row[:, x0] + (bottom_row[:, x1] - bottom_row[:, x0]) * wx
    resized: Tensor = (top + (bottom - top) * wy).astype(image.dtype)
    return resized


def _sample_zero_fill(image: Tensor, sy: np.ndarray, sx: np.ndarray) -> Tensor:
    """Bilinear sample at source coordinates; taps outside the image contribute zero."""
    height, width = image.shape[:2]
    # snap away floating noise so exact right angles and unit zoom are exact permutations
    sy, sx = np.round(sy, 9), np.round(sx, 9)
    y0, x0 = np.floor(sy).astype(np.intp), np.floor(sx).astype(np.intp)
    fy, fx = sy - y0, sx - x0
    data = image.astype(np.float64)
    out = np.zeros(sy.shape + image.shape[2:], dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            inside = (yy >= 0) & (yy < height) & (xx >= 0) & (xx < width)
            taps = data[np.clip(yy, 0, height - 1), np.clip(xx, 0, width - 1)]
            out += taps * (wy * wx * inside)[..., None]
    sampled: Tensor = out.astype(image.dtype)
    return sampled


def _centered_grid(image: Tensor) -> tuple[np.ndarray, np.ndarray, float, float]:
    height, width = image.shape[:2]
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return yy - cy, xx - cx, cy, cx


def hflip(image: Tensor) -> Tensor:
    return np.ascontiguousarray(image[:, ::-1])


def rotate(image: Tensor, angle_deg: float) -> Tensor:
    """Rotate counter-clockwise about the centre; uncovered pixels become 0."""
    dy, dx, cy, cx = _centered_grid(image)
    theta = math.radians(angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    return _sample_zero_fill(image, cy + dx * sin + dy * cos, cx + dx * cos - dy * sin)


def zoom(image: Tensor, factor: float) -> Tensor:
    """Scale about the centre by ``factor``; zooming out leaves a zero border."""
    dy, dx, cy, cx = _centered_grid(image)
    return _sample_zero_fill(image, cy + dy / factor, cx + dx / factor)


def augment(image: Tensor, params: AugmentParams, rng: np.random.Generator) -> Tensor:
    """
    Random flip, then rotation, then zoom; the output keeps the input size.

    A flip coin is always drawn; rotation and zoom draws happen only when their range is
    non-zero, so all-zero params return the input unchanged.

    Args:
        image (Tensor): [H, W, C] pixels already rescaled to [0, 1].
        params (AugmentParams): Flip probability, rotation range (degrees), zoom range.
        rng (np.random.Generator): Per-example generator.

    Returns:
        Tensor: The augmented image.
    """
    out = image
    if rng.random() < params.p_hflip:
        out = hflip(out)
    if params.max_rotation_deg > 0.0:
        out = rotate(out, rng.uniform(-params.max_rotation_deg, params.max_rotation_deg))
    if params.max_zoom > 0.0:
        out = zoom(out, rng.uniform(1.0 - params.max_zoom, 1.0 + params.max_zoom))
    return out.copy() if out is image else out


def example_rng(seed: int, index: int, epoch: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, example) so results ignore worker count."""
    return np.random.default_rng([seed, epoch, index])


def augment_batch(
    images: Tensor,
    indices: Sequence[int],
    params: AugmentParams,
    seed: int,
    epoch: int,
    executor: Executor | None = None,
) -> Tensor:
    """Augment ``images[indices]`` in order, optionally spreading examples over ``executor``."""

    def one(index: int) -> Tensor:
        return augment(images[index], params, example_rng(seed, index, epoch))

    if executor is None:
        results = [one(i) for i in indices]
    else:
        results = list(executor.map(one, indices))
    return np.stack(results).astype(images.dtype, copy=False)


def prepare_inputs(dataset: Dataset, input_size: tuple[int, int]) -> Tensor:
    """Rescale every example to [0, 1] and resize it to ``input_size`` (height, width)."""
    height, width = input_size
    batch = np.empty((len(dataset), height, width, 3), dtype=np.float32)
    for i, example in enumerate(dataset.examples):
        batch[i] = resize_bilinear(rescale(example.image), width, height)
    return batch


def _motif(class_index: int, size: int, rng: np.random.Generator) -> np.ndarray:
    period = 4 + 2 * (class_index // 4)
    half = period // 2
    phase = int(rng.integers(0, period))
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    kind = class_index % 4
    if kind == 0:
        cells = (yy + phase) // half
    elif kind == 1:
        cells = (xx + phase) // half
    elif kind == 2:
        cy, cx = rng.uniform(size * 0.3, size * 0.7, size=2)
        cells = (np.hypot(yy - cy, xx - cx) // half).astype(np.intp)
    else:
        cells = (yy + phase) // half + (xx + phase) // half
    return (2.0 * (cells % 2) - 1.0).astype(np.float64)


def synth_image(class_index: int, size: int, rng: np.random.Generator) -> Image:
    base = np.array(PALETTE[class_index], dtype=np.float64)
    motif = _motif(class_index, size, rng)
    noise = rng.normal(0.0, NOISE_SIGMA, size=(size, size, 3))
    values = base + MOTIF_AMPLITUDE * motif[..., None] + noise
    pixels = np.clip(np.round(values), 0, 255).astype(np.uint8)
    return Image(width=size, height=size, pixels=pixels)


def synth_dataset(n_per_class: int, class_count: int, size: int, seed: int) -> Dataset:
    """
    Generate a separable corpus: per class a base colour, a geometric motif (stripes, circles
    or checker with a class-dependent period) and Gaussian pixel noise of sigma 10/255.

    Args:
        n_per_class (int): Images per class.
        class_count (int): Number of classes, at most the palette size.
        size (int): Square image side, at least 8.
        seed (int): Generator seed; equal seeds give bit-identical images.

    Returns:
        Dataset: Examples ordered class by class, named ``class_0 ... class_{K-1}``.
    """
    if not 2 <= class_count <= len(PALETTE):
        raise ValueError(f"class_count must lie in [2, {len(PALETTE)}], got {class_count}")
    if size < 8:
        raise ValueError(f"size must be at least 8, got {size}")
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be positive, got {n_per_class}")
    examples = [
        LabeledImage(synth_image(k, size, np.random.default_rng([seed, k, i])), k)
        for k in range(class_count)
        for i in range(n_per_class)
    ]
    return Dataset(
        examples=examples, class_names=tuple(f"class_{k}" for k in range(class_count))
    )
