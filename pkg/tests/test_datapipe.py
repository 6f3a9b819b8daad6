from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from aggronet.datapipe import (
    augment,
    augment_batch,
    hflip,
    prepare_inputs,
    rescale,
    resize_bilinear,
    rotate,
    synth_dataset,
    zoom,
)
from aggronet.models import AugmentParams, ConfigError, Image


class PinnedRng:
    """Stands in for a generator: never flips, and every range draw returns its upper end."""

    def random(self):
        return 1.0

    def uniform(self, low, high):
        return high


def pixel_image(values):
    pixels = np.array(values, dtype=np.uint8)
    return Image(width=pixels.shape[1], height=pixels.shape[0], pixels=pixels)


@pytest.mark.parametrize(
    "value, expected",
    [
        pytest.param(255, 1.0, id="White"),
        pytest.param(0, 0.0, id="Black"),
        pytest.param(128, np.float32(128) / np.float32(255), id="Mid grey"),
    ],
)
def test_rescale_values(value, expected):
    out = rescale(pixel_image([[[value] * 3]]))
    assert out.dtype == np.float32
    assert (out == expected).all()


def test_rescale_is_monotone():
    ramp = rescale(pixel_image([[[v, v, v] for v in range(256)]]))[0, :, 0]
    assert (np.diff(ramp) > 0).all()
    assert round(float(ramp[128]), 5) == 0.50196


def test_resize_same_size_is_identity():
    image = np.random.default_rng(0).random((5, 7, 3)).astype(np.float32)
    np.testing.assert_array_equal(resize_bilinear(image, 7, 5), image)


@pytest.mark.parametrize(
    "width, height",
    [
        pytest.param(9, 2, id="upscale"),
        pytest.param(1, 1, id="to one pixel"),
        pytest.param(3, 13, id="mixed"),
    ],
)
def test_resize_constant_stays_constant(width, height):
    image = np.full((4, 6, 3), 0.3, dtype=np.float32)
    np.testing.assert_array_equal(
        resize_bilinear(image, width, height), np.full((height, width, 3), 0.3, np.float32)
    )


def scalar_bilinear_row(row, width):
    out = []
    scale = len(row) / width
    for d in range(width):
        s = min(max((d + 0.5) * scale - 0.5, 0.0), len(row) - 1)
        left = int(s)
        right = min(left + 1, len(row) - 1)
        out.append(row[left] + (row[right] - row[left]) * (s - left))
    return out


def test_resize_upscale_matches_scalar_oracle():
    image = np.array([[[0.0], [255.0]]])
    out = resize_bilinear(image, 4, 1)
    np.testing.assert_allclose(out[0, :, 0], scalar_bilinear_row([0.0, 255.0], 4), rtol=1e-12)
    np.testing.assert_allclose(out[0, :, 0], [0.0, 63.75, 191.25, 255.0])


def test_augment_identity_params_return_input():
    image = np.random.default_rng(1).random((6, 6, 3)).astype(np.float32)
    out = augment(image, AugmentParams.identity(), np.random.default_rng(0))
    np.testing.assert_array_equal(out, image)
    assert out is not image


def test_augment_flip_only():
    image = np.array([[[0.1, 0.1, 0.1], [0.9, 0.9, 0.9]]], dtype=np.float32)
    params = AugmentParams(p_hflip=1.0, max_rotation_deg=0.0, max_zoom=0.0)
    out = augment(image, params, np.random.default_rng(0))
    np.testing.assert_array_equal(out, image[:, ::-1])


def test_double_flip_is_identity():
    image = np.random.default_rng(2).random((3, 5, 3))
    np.testing.assert_array_equal(hflip(hflip(image)), image)


def test_rotation_at_extreme_of_range_matches_permutation():
    image = np.arange(12, dtype=np.float64).reshape(2, 2, 3)
    params = AugmentParams(p_hflip=0.0, max_rotation_deg=90.0, max_zoom=0.0)
    out = augment(image, params, PinnedRng())
    np.testing.assert_array_equal(out, np.rot90(image))


@pytest.mark.parametrize("size", [3, 4, 7])
def test_quarter_turns_are_exact_permutations(size):
    image = np.random.default_rng(size).random((size, size, 3))
    np.testing.assert_array_equal(rotate(image, 90.0), np.rot90(image))
    np.testing.assert_array_equal(rotate(image, 180.0), np.rot90(image, 2))
    np.testing.assert_array_equal(rotate(image, -90.0), np.rot90(image, -1))


def test_zoom_unit_factor_is_identity_and_zoom_out_fills_border():
    image = np.ones((9, 9, 3))
    np.testing.assert_array_equal(zoom(image, 1.0), image)
    shrunk = zoom(image, 0.5)
    assert shrunk.shape == image.shape
    assert not shrunk[0].any()
    assert shrunk[4, 4].tolist() == [1.0, 1.0, 1.0]


def test_augment_keeps_shape_and_range():
    image = np.random.default_rng(3).random((16, 16, 3)).astype(np.float32)
    params = AugmentParams(p_hflip=0.5, max_rotation_deg=30.0, max_zoom=0.2)
    for seed in range(10):
        out = augment(image, params, np.random.default_rng(seed))
        assert out.shape == image.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


@pytest.mark.parametrize(
    "values",
    [
        pytest.param({"p_hflip": 1.5}, id="flip probability above one"),
        pytest.param({"max_rotation_deg": -1.0}, id="negative rotation"),
        pytest.param({"max_zoom": 1.0}, id="zoom of one"),
    ],
)
def test_augment_params_validation(values):
    with pytest.raises(ConfigError):
        AugmentParams(**values)


def test_augment_batch_is_independent_of_executor():
    images = np.random.default_rng(4).random((6, 8, 8, 3)).astype(np.float32)
    indices = [5, 0, 3, 3]
    serial = augment_batch(images, indices, AugmentParams(), seed=1, epoch=2)
    with ThreadPoolExecutor(max_workers=3) as executor:
        threaded = augment_batch(images, indices, AugmentParams(), 1, 2, executor)
    np.testing.assert_array_equal(serial, threaded)
    np.testing.assert_array_equal(serial[2], serial[3])
    other_epoch = augment_batch(images, indices, AugmentParams(), seed=1, epoch=3)
    assert not np.array_equal(serial, other_epoch)


def test_synth_dataset_counts():
    dataset = synth_dataset(5, 8, 16, seed=0)
    assert len(dataset) == 40
    assert set(dataset.class_counts().values()) == {5}
    assert dataset.class_names[0] == "class_0"


def test_synth_dataset_is_seeded():
    first = synth_dataset(3, 4, 16, seed=9)
    second = synth_dataset(3, 4, 16, seed=9)
    other = synth_dataset(3, 4, 16, seed=10)
    for a, b in zip(first.examples, second.examples, strict=True):
        np.testing.assert_array_equal(a.image.pixels, b.image.pixels)
    assert not np.array_equal(first.examples[0].image.pixels, other.examples[0].image.pixels)


def test_synth_classes_separate_by_mean_colour():
    dataset = synth_dataset(20, 8, 32, seed=42)
    means = np.array([e.image.pixels.reshape(-1, 3).mean(axis=0) for e in dataset.examples])
    labels = dataset.labels
    centroids = np.array([means[labels == k].mean(axis=0) for k in range(8)])
    distances = np.linalg.norm(means[:, None, :] - centroids[None, :, :], axis=-1)
    assert np.mean(distances.argmin(axis=1) == labels) >= 0.9


@pytest.mark.parametrize(
    "args",
    [
        pytest.param((5, 1, 16), id="one class"),
        pytest.param((5, 9, 16), id="more classes than palette"),
        pytest.param((5, 3, 4), id="tiny images"),
        pytest.param((0, 3, 16), id="no images"),
    ],
)
def test_synth_dataset_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        synth_dataset(*args, seed=0)


def test_prepare_inputs_resizes_and_rescales():
    dataset = synth_dataset(2, 2, 24, seed=0)
    inputs = prepare_inputs(dataset, (16, 12))
    assert inputs.shape == (4, 16, 12, 3)
    assert inputs.dtype == np.float32
    assert 0.0 <= inputs.min() and inputs.max() <= 1.0
