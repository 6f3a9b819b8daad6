"""The hybrid classifier: a VGG-style and an Inception-style backbone, each global-average-pooled,
concatenated, and fed to a dense head."""

import fnmatch
import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from aggronet.layers import (
    Layer,
    LayerCache,
    LayerKind,
    Mode,
    backward,
    conv_layer,
    dense_layer,
    dropout_layer,
    forward,
    maxpool_layer,
    simple_layer,
)
from aggronet.models import DimensionError, SpecError
from aggronet.tensor import Padding, Tensor

logger = logging.getLogger(__name__)

BRANCHES = ("b1x1", "b3x3", "b5x5", "pool")


class BackboneFamily(Enum):
    VGG_STYLE = "vgg_style"
    INCEPTION_STYLE = "inception_style"


@dataclass(frozen=True)
class InceptionWidths:
    b1x1: int
    b3x3_reduce: int
    b3x3: int
    b5x5_reduce: int
    b5x5: int
    pool_proj: int

    def __post_init__(self) -> None:
        for name, value in self.to_dict().items():
            if value < 1:
                raise SpecError(f"inception width {name} must be positive, got {value}")

    @property
    def out_channels(self) -> int:
        return self.b1x1 + self.b3x3 + self.b5x5 + self.pool_proj

    def to_dict(self) -> dict[str, int]:
        return {
            "b1x1": self.b1x1,
            "b3x3_reduce": self.b3x3_reduce,
            "b3x3": self.b3x3,
            "b5x5_reduce": self.b5x5_reduce,
            "b5x5": self.b5x5,
            "pool_proj": self.pool_proj,
        }

    @classmethod
    def from_sequence(cls, values: Sequence[int]) -> "InceptionWidths":
        if len(values) != 6:
            raise SpecError(
                "inception widths need 6 values "
                f"(b1x1, b3x3_reduce, b3x3, b5x5_reduce, b5x5, pool_proj), got {list(values)}"
            )
        return cls(*(int(v) for v in values))


@dataclass(frozen=True)
class BackboneSpec:
    """
    A miniature backbone.

    vgg_style uses ``blocks`` as (conv_count, channels) pairs, each block ending in a 2x2/2 max
    pool. inception_style uses a 3x3 stem conv of ``stem_channels`` plus a 2x2/2 max pool,
    then ``block_count`` inception blocks of ``widths``.
    """

    family: BackboneFamily
    blocks: tuple[tuple[int, int], ...] = ()
    stem_channels: int = 16
    widths: InceptionWidths | None = None
    block_count: int = 1

    def __post_init__(self) -> None:
        if self.family is BackboneFamily.VGG_STYLE:
            if not self.blocks:
                raise SpecError("vgg_style backbone needs at least one block")
            for conv_count, channels in self.blocks:
                if conv_count < 1 or channels < 1:
                    raise SpecError(
                        f"vgg block widths must be positive, got ({conv_count}, {channels})"
                    )
        else:
            if self.widths is None:
                raise SpecError("inception_style backbone needs branch widths")
            if self.stem_channels < 1 or self.block_count < 1:
                raise SpecError(
                    "inception stem channels and block count must be positive, got "
                    f"{self.stem_channels} and {self.block_count}"
                )

    @classmethod
    def vgg_style(cls, blocks: Sequence[Sequence[int]]) -> "BackboneSpec":
        return cls(
            family=BackboneFamily.VGG_STYLE,
            blocks=tuple((int(b[0]), int(b[1])) for b in blocks),
        )

    @classmethod
    def inception_style(
        cls, stem_channels: int, widths: InceptionWidths, block_count: int = 1
    ) -> "BackboneSpec":
        return cls(
            family=BackboneFamily.INCEPTION_STYLE,
            stem_channels=stem_channels,
            widths=widths,
            block_count=block_count,
        )

    @property
    def out_channels(self) -> int:
        if self.family is BackboneFamily.VGG_STYLE:
            return self.blocks[-1][1]
        assert self.widths is not None
        return self.widths.out_channels

    def to_dict(self) -> dict[str, Any]:
        if self.family is BackboneFamily.VGG_STYLE:
            return {"family": self.family.value, "blocks": [list(b) for b in self.blocks]}
        assert self.widths is not None
        return {
            "family": self.family.value,
            "stem_channels": self.stem_channels,
            "widths": list(self.widths.to_dict().values()),
            "block_count": self.block_count,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BackboneSpec":
        family = BackboneFamily(data["family"])
        if family is BackboneFamily.VGG_STYLE:
            return cls.vgg_style(data["blocks"])
        return cls.inception_style(
            int(data.get("stem_channels", 16)),
            InceptionWidths.from_sequence(data["widths"]),
            int(data.get("block_count", 1)),
        )


DEFAULT_BACKBONE_A = BackboneSpec.vgg_style(((2, 8), (2, 16)))
DEFAULT_BACKBONE_B = BackboneSpec.inception_style(16, InceptionWidths(8, 8, 16, 4, 8, 8))


@dataclass(frozen=True)
class HybridSpec:
    input_size: tuple[int, int] = (32, 32)
    class_count: int = 8
    backbone_a: BackboneSpec = DEFAULT_BACKBONE_A
    backbone_b: BackboneSpec = DEFAULT_BACKBONE_B
    head: tuple[int, ...] = (64, 8)
    dropout_rate: float = 0.5
    freeze: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        height, width = self.input_size
        if height < 1 or width < 1:
            raise SpecError(f"input_size must be positive, got {self.input_size}")
        if self.class_count < 2:
            raise SpecError(f"class_count must be >= 2, got {self.class_count}")
        if not self.head:
            raise SpecError("head must list at least the final dense width")
        if any(w < 1 for w in self.head):
            raise SpecError(f"head widths must be positive, got {list(self.head)}")
        if self.head[-1] != self.class_count:
            raise SpecError(
                f"final head width {self.head[-1]} must equal class_count {self.class_count}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise SpecError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.backbone_a.family is not BackboneFamily.VGG_STYLE:
            raise SpecError("backbone_a must be vgg_style")
        if self.backbone_b.family is not BackboneFamily.INCEPTION_STYLE:
            raise SpecError("backbone_b must be inception_style")
        factor = 2 ** len(self.backbone_a.blocks)
        if height % factor or width % factor:
            raise SpecError(
                f"input_size {self.input_size} is not divisible by {factor}, "
                f"required by {len(self.backbone_a.blocks)} vgg pooling blocks"
            )
        if height // 2 < 5 or width // 2 < 5:
            raise SpecError(
                f"input_size {self.input_size} leaves less than 5x5 for the inception blocks"
            )

    @property
    def head_input_width(self) -> int:
        return self.backbone_a.out_channels + self.backbone_b.out_channels

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_size": list(self.input_size),
            "class_count": self.class_count,
            "backbone_a": self.backbone_a.to_dict(),
            "backbone_b": self.backbone_b.to_dict(),
            "head": list(self.head),
            "dropout_rate": self.dropout_rate,
            "freeze": list(self.freeze),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "HybridSpec":
        return cls(
            input_size=(int(data["input_size"][0]), int(data["input_size"][1])),
            class_count=int(data["class_count"]),
            backbone_a=BackboneSpec.from_dict(data["backbone_a"]),
            backbone_b=BackboneSpec.from_dict(data["backbone_b"]),
            head=tuple(int(w) for w in data["head"]),
            dropout_rate=float(data["dropout_rate"]),
            freeze=tuple(str(p) for p in data.get("freeze", [])),
        )


@dataclass
class InceptionBlock:
    name: str
    widths: InceptionWidths
    branches: dict[str, list[Layer]]
    concat: Layer


Stage = Layer | InceptionBlock


@dataclass
class Model:
    spec: HybridSpec
    class_names: tuple[str, ...]
    backbone_a: list[Stage]
    backbone_b: list[Stage]
    fusion: Layer
    head: list[Layer]
    softmax: Layer = field(default_factory=lambda: simple_layer("head/softmax", LayerKind.SOFTMAX))

    def layers(self) -> Iterator[Layer]:
        for stage in [*self.backbone_a, *self.backbone_b]:
            if isinstance(stage, InceptionBlock):
                for branch in stage.branches.values():
                    yield from branch
                yield stage.concat
            else:
                yield stage
        yield self.fusion
        yield from self.head
        yield self.softmax

    def parameters(self) -> dict[str, Tensor]:
        """Every parameter tensor keyed ``<layer name>/<param name>``, in layer order."""
        return {
            f"{layer.name}/{name}": tensor
            for layer in self.layers()
            for name, tensor in layer.params.items()
        }

    def frozen_parameters(self) -> set[str]:
        return {
            f"{layer.name}/{name}"
            for layer in self.layers()
            if not layer.trainable
            for name in layer.params
        }

    def freeze(self, patterns: Sequence[str]) -> list[str]:
        """Mark layers whose hierarchical name matches any glob pattern as non-trainable."""
        frozen = []
        for layer in self.layers():
            if any(fnmatch.fnmatchcase(layer.name, pattern) for pattern in patterns):
                layer.trainable = False
                frozen.append(layer.name)
        return frozen


def _vgg_backbone(spec: BackboneSpec, rng: np.random.Generator) -> list[Stage]:
    stages: list[Stage] = []
    channels = 3
    for b, (conv_count, width) in enumerate(spec.blocks, start=1):
        for c in range(1, conv_count + 1):
            stages.append(conv_layer(f"backbone_a/block{b}/conv{c}", channels, width, 3, rng))
            stages.append(simple_layer(f"backbone_a/block{b}/relu{c}", LayerKind.RELU))
            channels = width
        stages.append(maxpool_layer(f"backbone_a/block{b}/pool", 2, 2))
    stages.append(simple_layer("backbone_a/gap", LayerKind.GLOBAL_AVG_POOL))
    return stages


def build_inception_block(
    name: str, c_in: int, widths: InceptionWidths, rng: np.random.Generator
) -> InceptionBlock:
    relu = LayerKind.RELU
    branches = {
        "b1x1": [
            conv_layer(f"{name}/b1x1/conv", c_in, widths.b1x1, 1, rng),
            simple_layer(f"{name}/b1x1/relu", relu),
        ],
        "b3x3": [
            conv_layer(f"{name}/b3x3/reduce", c_in, widths.b3x3_reduce, 1, rng),
            simple_layer(f"{name}/b3x3/reduce_relu", relu),
            conv_layer(f"{name}/b3x3/conv", widths.b3x3_reduce, widths.b3x3, 3, rng),
            simple_layer(f"{name}/b3x3/relu", relu),
        ],
        "b5x5": [
            conv_layer(f"{name}/b5x5/reduce", c_in, widths.b5x5_reduce, 1, rng),
            simple_layer(f"{name}/b5x5/reduce_relu", relu),
            conv_layer(f"{name}/b5x5/conv", widths.b5x5_reduce, widths.b5x5, 5, rng),
            simple_layer(f"{name}/b5x5/relu", relu),
        ],
        "pool": [
            maxpool_layer(f"{name}/pool/pool", 3, 1, Padding.SAME),
            conv_layer(f"{name}/pool/proj", c_in, widths.pool_proj, 1, rng),
            simple_layer(f"{name}/pool/relu", relu),
        ],
    }
    return InceptionBlock(
        name=name,
        widths=widths,
        branches=branches,
        concat=simple_layer(f"{name}/concat", LayerKind.CONCAT),
    )


def _inception_backbone(spec: BackboneSpec, rng: np.random.Generator) -> list[Stage]:
    assert spec.widths is not None
    stages: list[Stage] = [
        conv_layer("backbone_b/stem/conv", 3, spec.stem_channels, 3, rng),
        simple_layer("backbone_b/stem/relu", LayerKind.RELU),
        maxpool_layer("backbone_b/stem/pool", 2, 2),
    ]
    channels = spec.stem_channels
    for i in range(1, spec.block_count + 1):
        stages.append(build_inception_block(f"backbone_b/inception{i}", channels, spec.widths, rng))
        channels = spec.widths.out_channels
    stages.append(simple_layer("backbone_b/gap", LayerKind.GLOBAL_AVG_POOL))
    return stages


def _head(spec: HybridSpec, rng: np.random.Generator) -> list[Layer]:
    layers: list[Layer] = []
    fan_in = spec.head_input_width
    for i, width in enumerate(spec.head[:-1], start=1):
        layers.append(dense_layer(f"head/dense{i}", fan_in, width, rng))
        layers.append(simple_layer(f"head/relu{i}", LayerKind.RELU))
        layers.append(dropout_layer(f"head/dropout{i}", spec.dropout_rate))
        fan_in = width
    layers.append(dense_layer("head/logits", fan_in, spec.head[-1], rng))
    return layers


def default_class_names(class_count: int) -> tuple[str, ...]:
    return tuple(f"class_{k}" for k in range(class_count))


def build(spec: HybridSpec, seed: int, class_names: Sequence[str] | None = None) -> Model:
    """
    Instantiate a model from its spec.

    Conv and dense weights are He-uniform from a generator seeded with ``seed`` and drawn in
    layer order; biases start at zero. Layers matching ``spec.freeze`` become non-trainable.

    Args:
        spec (HybridSpec): The architecture.
        seed (int): Initialization seed.
        class_names (Sequence[str] | None): Class-name table; defaults to ``class_<k>``.

    Returns:
        Model: The built model.

    Raises:
        SpecError: If the class-name table does not match the class count, or the fused
            feature width disagrees with the head.
    """
    names = tuple(class_names) if class_names is not None else default_class_names(spec.class_count)
    if len(names) != spec.class_count:
        raise SpecError(f"{len(names)} class names given for class_count {spec.class_count}")
    rng = np.random.default_rng(seed)
    model = Model(
        spec=spec,
        class_names=names,
        backbone_a=_vgg_backbone(spec.backbone_a, rng),
        backbone_b=_inception_backbone(spec.backbone_b, rng),
        fusion=simple_layer("fusion/concat", LayerKind.CONCAT),
        head=_head(spec, rng),
    )
    check_feature_width(model)
    frozen = model.freeze(spec.freeze)
    if spec.freeze:
        logger.info("Froze %d layers matching %s", len(frozen), list(spec.freeze))
    return model


def fused_features(model: Model, batch: Tensor) -> Tensor:
    """The concatenated GAP vector that enters the head (inference mode)."""
    features_a, _ = run_stages(model.backbone_a, batch, Mode.INFER, None)
    features_b, _ = run_stages(model.backbone_b, batch, Mode.INFER, None)
    fused, _ = forward(model.fusion, [features_a, features_b])
    return fused


def check_feature_width(model: Model) -> None:
    height, width = model.spec.input_size
    probe = np.zeros((1, height, width, 3), dtype=np.float32)
    fused = fused_features(model, probe)
    expected = model.spec.head_input_width
    head_in = model.head[0].params["kernel"].shape[0]
    if fused.shape[1] != expected or head_in != expected:
        raise SpecError(
            f"fused feature width {fused.shape[1]} and head input {head_in} must both equal "
            f"{expected} (backbone_a {model.spec.backbone_a.out_channels} + "
            f"backbone_b {model.spec.backbone_b.out_channels})"
        )


@dataclass
class InceptionCache:
    branches: dict[str, list[Any]]
    concat: LayerCache


def inception_forward(
    block: InceptionBlock, x: Tensor, mode: Mode, rng: np.random.Generator | None
) -> tuple[Tensor, InceptionCache]:
    if x.ndim != 4 or x.shape[1] < 5 or x.shape[2] < 5:
        raise DimensionError(
            f"inception block {block.name} needs a rank-4 input at least 5x5, got {x.shape}"
        )
    outputs, caches = [], {}
    for key in BRANCHES:
        y, caches[key] = run_stages(block.branches[key], x, mode, rng)
        outputs.append(y)
    out, concat_cache = forward(block.concat, outputs)
    return out, InceptionCache(caches, concat_cache)


def inception_block(x: Tensor, block: InceptionBlock) -> Tensor:
    """Four parallel ReLU branches (1x1; 1x1->3x3; 1x1->5x5; 3x3 max pool->1x1), concatenated.

    Output channels are ``b1x1 + b3x3 + b5x5 + pool_proj``.
    """
    return inception_forward(block, x, Mode.INFER, None)[0]


def run_stages(
    stages: Sequence[Stage], x: Tensor, mode: Mode, rng: np.random.Generator | None
) -> tuple[Tensor, list[Any]]:
    caches: list[Any] = []
    for stage in stages:
        if isinstance(stage, InceptionBlock):
            x, cache = inception_forward(stage, x, mode, rng)
        else:
            x, cache = forward(stage, x, mode, rng)
        caches.append(cache)
    return x, caches


def backprop_stages(
    stages: Sequence[Stage], caches: Sequence[Any], upstream: Tensor, grads: dict[str, Tensor]
) -> Tensor:
    """Backpropagate through ``stages`` in reverse, collecting parameter gradients."""
    for stage, cache in zip(reversed(stages), reversed(caches), strict=True):
        if isinstance(stage, InceptionBlock):
            split = backward(stage.concat, cache.concat, upstream).inputs
            assert isinstance(split, tuple)
            total: Tensor | None = None
            for key, branch_grad in zip(BRANCHES, split, strict=True):
                dx = backprop_stages(
                    stage.branches[key], cache.branches[key], branch_grad, grads
                )
                total = dx if total is None else total + dx
            assert total is not None
            upstream = total
        else:
            bundle = backward(stage, cache, upstream)
            for name, grad in bundle.params.items():
                grads[f"{stage.name}/{name}"] = grad
            assert isinstance(bundle.inputs, np.ndarray)
            upstream = bundle.inputs
    return upstream


@dataclass
class ForwardPass:
    probs: Tensor
    logits: Tensor
    caches: dict[str, Any]


def _check_batch(model: Model, batch: Tensor) -> None:
    height, width = model.spec.input_size
    if batch.ndim != 4 or batch.shape[1:] != (height, width, 3):
        raise DimensionError(
            f"batch shape {batch.shape} does not match [N, {height}, {width}, 3]"
        )
    if batch.size and (batch.min() < 0.0 or batch.max() > 1.0):
        logger.warning(
            "Pixel values outside [0, 1] (min %.4f, max %.4f); inputs should be rescaled",
            float(batch.min()),
            float(batch.max()),
        )


def forward_pass(
    model: Model,
    batch: Tensor,
    mode: Mode = Mode.INFER,
    rng: np.random.Generator | None = None,
) -> ForwardPass:
    """Run both backbones on ``batch``, fuse, and apply the head, keeping caches for backward."""
    _check_batch(model, batch)
    features_a, caches_a = run_stages(model.backbone_a, batch, mode, rng)
    features_b, caches_b = run_stages(model.backbone_b, batch, mode, rng)
    fused, fusion_cache = forward(model.fusion, [features_a, features_b])
    logits, head_caches = run_stages(model.head, fused, mode, rng)
    probs, _ = forward(model.softmax, logits)
    return ForwardPass(
        probs=probs,
        logits=logits,
        caches={
            "backbone_a": caches_a,
            "backbone_b": caches_b,
            "fusion": fusion_cache,
            "head": head_caches,
        },
    )


def forward_hybrid(
    model: Model,
    batch: Tensor,
    mode: Mode = Mode.INFER,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Class probabilities [N, K] for an NHWC batch of pixels in [0, 1]."""
    return forward_pass(model, batch, mode, rng).probs


def backward_pass(model: Model, result: ForwardPass, grad_logits: Tensor) -> dict[str, Tensor]:
    """Parameter gradients from the gradient with respect to the pre-softmax logits."""
    grads: dict[str, Tensor] = {}
    caches = result.caches
    grad_fused = backprop_stages(model.head, caches["head"], grad_logits, grads)
    split = backward(model.fusion, caches["fusion"], grad_fused).inputs
    assert isinstance(split, tuple)
    grad_a, grad_b = split
    backprop_stages(model.backbone_a, caches["backbone_a"], grad_a, grads)
    backprop_stages(model.backbone_b, caches["backbone_b"], grad_b, grads)
    return grads
