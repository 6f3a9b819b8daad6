import json

import numpy as np
import pytest

from aggronet.checkpoint import MANIFEST_NAME, WEIGHTS_NAME, load_checkpoint, save_checkpoint
from aggronet.models import CheckpointError
from aggronet.network import BackboneSpec, HybridSpec, InceptionWidths, build, forward_hybrid

SPEC = HybridSpec(
    input_size=(16, 16),
    class_count=3,
    backbone_a=BackboneSpec.vgg_style([(1, 4), (1, 6)]),
    backbone_b=BackboneSpec.inception_style(4, InceptionWidths(2, 2, 3, 1, 2, 2)),
    head=(8, 3),
    freeze=("backbone_b/stem/*",),
)


@pytest.fixture
def saved(tmp_path):
    model = build(SPEC, seed=7, class_names=["Healthy", "Late blight", "Leaf Miner"])
    path = save_checkpoint(model, tmp_path / "checkpoint")
    return model, path


def test_round_trip_is_bit_identical(saved):
    model, path = saved
    loaded = load_checkpoint(path)
    assert loaded.spec == model.spec
    assert loaded.class_names == model.class_names
    assert loaded.frozen_parameters() == model.frozen_parameters()
    for key, value in model.parameters().items():
        np.testing.assert_array_equal(loaded.parameters()[key], value)
    batch = np.random.default_rng(0).random((100, 16, 16, 3)).astype(np.float32)
    np.testing.assert_array_equal(forward_hybrid(loaded, batch), forward_hybrid(model, batch))


def test_save_replaces_previous_checkpoint(saved):
    model, path = saved
    for tensor in model.parameters().values():
        tensor[...] = 0.25
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert all((t == 0.25).all() for t in loaded.parameters().values())
    assert not path.with_name(path.name + ".tmp").exists()


def test_truncated_blob_is_rejected(saved):
    _, path = saved
    weights = path / WEIGHTS_NAME
    weights.write_bytes(weights.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="bytes"):
        load_checkpoint(path)


def test_wrong_shape_names_the_tensor(saved):
    _, path = saved
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    entry = next(e for e in manifest["tensors"] if e["name"] == "head/logits/kernel")
    entry["shape"] = [3, 8]
    (path / MANIFEST_NAME).write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="head/logits/kernel"):
        load_checkpoint(path)


@pytest.mark.parametrize(
    "edit, message",
    [
        pytest.param(lambda m: m.update(format_version=2), "version", id="unknown version"),
        pytest.param(lambda m: m["tensors"].pop(0), "bytes|missing", id="missing tensor"),
        pytest.param(
            lambda m: m["spec"].update(head=[8, 4]), "Invalid spec", id="inconsistent spec"
        ),
    ],
)
def test_invalid_manifests(saved, edit, message):
    _, path = saved
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    edit(manifest)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match=message):
        load_checkpoint(path)


def test_missing_directory(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent")


@pytest.mark.parametrize(
    "key", ["format_version", "spec", "class_names", "frozen_layers", "tensors"]
)
def test_manifest_missing_key(saved, key):
    _, path = saved
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    del manifest[key]
    (path / MANIFEST_NAME).write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match=key):
        load_checkpoint(path)


@pytest.mark.parametrize(
    "manifest",
    [
        pytest.param([1, 2, 3], id="list"),
        pytest.param("checkpoint", id="string"),
        pytest.param(None, id="null"),
    ],
)
def test_manifest_must_be_an_object(saved, manifest):
    _, path = saved
    (path / MANIFEST_NAME).write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="JSON object"):
        load_checkpoint(path)


@pytest.mark.parametrize(
    "tensors",
    [
        pytest.param(7, id="not a list"),
        pytest.param(["head/logits/kernel"], id="entry not a table"),
        pytest.param([{"name": "head/logits/kernel", "shape": [8, 3]}], id="entry without bytes"),
        pytest.param(
            [{"name": "x", "shape": ["a"], "byte_offset": 0, "byte_length": 4}],
            id="non-integer shape",
        ),
    ],
)
def test_malformed_tensor_table(saved, tensors):
    _, path = saved
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    manifest["tensors"] = tensors
    (path / MANIFEST_NAME).write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="tensor table"):
        load_checkpoint(path)
