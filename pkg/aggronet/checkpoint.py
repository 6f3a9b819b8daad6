"""Checkpoint directories: ``manifest.json`` plus ``weights.bin`` (little-endian float32 blobs)."""

import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from aggronet.models import CheckpointError, SpecError
from aggronet.network import HybridSpec, Model, build, check_feature_width

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"
WEIGHT_DTYPE = np.dtype("<f4")
MANIFEST_KEYS = ("format_version", "spec", "class_names", "frozen_layers", "tensors")


@dataclass(frozen=True)
class _TensorEntry:
    name: str
    shape: tuple[int, ...]
    byte_offset: int
    byte_length: int

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "_TensorEntry":
        entry = cls(
            name=str(data["name"]),
            shape=tuple(int(d) for d in data["shape"]),
            byte_offset=int(data["byte_offset"]),
            byte_length=int(data["byte_length"]),
        )
        if entry.byte_offset < 0 or entry.byte_length < 0:
            raise ValueError(f"tensor {entry.name} has a negative byte range")
        return entry


def _manifest(model: Model) -> tuple[dict[str, Any], list[bytes]]:
    tensors, blobs, offset = [], [], 0
    for name, tensor in model.parameters().items():
        blob = np.ascontiguousarray(tensor, dtype=WEIGHT_DTYPE).tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(tensor.shape),
                "dtype": "float32",
                "byte_offset": offset,
                "byte_length": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "class_names": list(model.class_names),
        "frozen_layers": sorted(layer.name for layer in model.layers() if not layer.trainable),
        "tensors": tensors,
    }
    return manifest, blobs


def save_checkpoint(model: Model, path: str | Path) -> Path:
    """
    Write ``model`` to the directory ``path``, replacing any previous checkpoint there.

    The files are written to a sibling temporary directory first and moved into place once
    complete, so readers never see a half-written checkpoint.

    Args:
        model (Model): The model to save.
        path (str | Path): Target directory.

    Returns:
        Path: The checkpoint directory.
    """
    path = Path(path)
    manifest, blobs = _manifest(model)
    staging = path.with_name(path.name + ".tmp")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    try:
        with open(staging / WEIGHTS_NAME, "wb") as f:
            for blob in blobs:
                f.write(blob)
        with open(staging / MANIFEST_NAME, "w", encoding="utf-8") as f:
            f.write(json.dumps(manifest, indent=2) + "\n")
    except OSError as e:
        shutil.rmtree(staging, ignore_errors=True)
        raise OSError(f"Could not write checkpoint to {path}: {e}") from e
    if path.exists():
        shutil.rmtree(path)
    staging.rename(path)
    logger.info("Saved checkpoint with %d tensors to %s", len(blobs), path)
    return path


def load_checkpoint(path: str | Path) -> Model:
    """
    Load a checkpoint written by ``save_checkpoint``.

    Args:
        path (str | Path): Checkpoint directory.

    Returns:
        Model: A model with bit-identical parameters, spec, freeze flags and class names.

    Raises:
        CheckpointError: On a manifest that is not an object or lacks a key, an unknown format
            version, a malformed tensor table, a blob whose length disagrees with the
            manifest, or a tensor whose shape disagrees with the architecture.
    """
    path = Path(path)
    try:
        with open(path / MANIFEST_NAME, encoding="utf-8") as f:
            manifest = json.load(f)
        blob = (path / WEIGHTS_NAME).read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Could not read checkpoint at {path}: {e}") from e

    if not isinstance(manifest, dict):
        raise CheckpointError(f"{MANIFEST_NAME} in {path} must hold a JSON object")
    absent = [key for key in MANIFEST_KEYS if key not in manifest]
    if absent:
        raise CheckpointError(f"{MANIFEST_NAME} in {path} is missing keys: {absent}")
    version = manifest["format_version"]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unknown checkpoint format version {version!r} in {path}")

    try:
        entries = [_TensorEntry.from_dict(entry) for entry in manifest["tensors"]]
        frozen = {str(name) for name in manifest["frozen_layers"]}
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Invalid tensor table in checkpoint manifest {path}: {e}") from e
    expected_length = sum(entry.byte_length for entry in entries)
    if len(blob) != expected_length:
        raise CheckpointError(
            f"{WEIGHTS_NAME} holds {len(blob)} bytes but the manifest describes {expected_length}"
        )

    try:
        spec = HybridSpec.from_dict(manifest["spec"])
        model = build(spec, seed=0, class_names=manifest["class_names"])
    except (SpecError, KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Invalid spec in checkpoint manifest {path}: {e}") from e

    params = model.parameters()
    listed = {entry.name for entry in entries}
    missing = sorted(set(params) - listed)
    if missing:
        raise CheckpointError(f"Checkpoint is missing tensors: {missing}")
    for entry in entries:
        name = entry.name
        if name not in params:
            raise CheckpointError(f"Checkpoint tensor {name} does not exist in the model")
        target = params[name]
        if entry.shape != target.shape:
            raise CheckpointError(
                f"Tensor {name}: manifest shape {list(entry.shape)} disagrees with model shape "
                f"{list(target.shape)}"
            )
        start, length = entry.byte_offset, entry.byte_length
        if length != target.size * WEIGHT_DTYPE.itemsize or start + length > len(blob):
            raise CheckpointError(
                f"Tensor {name}: byte range {start}+{length} disagrees with shape "
                f"{list(entry.shape)}"
            )
        values = np.frombuffer(blob, dtype=WEIGHT_DTYPE, count=target.size, offset=start)
        target[...] = values.reshape(entry.shape)

    for layer in model.layers():
        layer.trainable = layer.name not in frozen
    check_feature_width(model)
    return model
