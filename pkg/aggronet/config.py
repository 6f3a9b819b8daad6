"""TOML run configuration: parsing, validation with field-path messages, and CLI overrides."""

import tomllib
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TypeVar

from aggronet.models import AugmentParams, ConfigError, SpecError, TrainConfig
from aggronet.network import (
    DEFAULT_BACKBONE_A,
    DEFAULT_BACKBONE_B,
    BackboneFamily,
    BackboneSpec,
    HybridSpec,
    InceptionWidths,
)
from aggronet.train import SplitCounts, counts_from_fractions

T = TypeVar("T")

DEFAULT_OUT_DIR = Path("runs") / "desk"
DEFAULT_FRACTIONS = (0.7, 0.2, 0.1)
DEFAULT_HIDDEN_WIDTH = 64

TOP_LEVEL_KEYS = {"seed", "out", "data", "split", "model", "train", "augment"}


@dataclass(frozen=True)
class SynthConfig:
    n_per_class: int = 75
    class_count: int = 8
    size: int = 32

    def __post_init__(self) -> None:
        if self.n_per_class < 1:
            raise ConfigError(f"data.synth.n_per_class: must be positive, got {self.n_per_class}")
        if not 2 <= self.class_count <= 8:
            raise ConfigError(
                f"data.synth.class_count: must lie in [2, 8], got {self.class_count}"
            )
        if self.size < 8:
            raise ConfigError(f"data.synth.size: must be at least 8, got {self.size}")

    @property
    def total(self) -> int:
        return self.n_per_class * self.class_count


@dataclass(frozen=True)
class SplitSpec:
    """Either exact (train, val, test) counts or fractions resolved against the dataset size."""

    counts: tuple[int, int, int] | None = None
    fractions: tuple[float, float, float] | None = DEFAULT_FRACTIONS

    def __post_init__(self) -> None:
        if (self.counts is None) == (self.fractions is None):
            raise ConfigError("split: give exactly one of split.counts or split.fractions")
        if self.counts is not None and min(self.counts) < 0:
            raise ConfigError(f"split.counts: must be non-negative, got {list(self.counts)}")
        if self.fractions is not None and (
            min(self.fractions) < 0 or abs(sum(self.fractions) - 1.0) > 1e-9
        ):
            raise ConfigError(
                f"split.fractions: must be non-negative and sum to 1, got {list(self.fractions)}"
            )

    def resolve(self, n: int) -> SplitCounts:
        if self.counts is not None:
            return SplitCounts(*self.counts)
        assert self.fractions is not None
        return counts_from_fractions(n, self.fractions)

    def to_dict(self) -> dict[str, list[int] | list[float]]:
        if self.counts is not None:
            return {"counts": list(self.counts)}
        assert self.fractions is not None
        return {"fractions": list(self.fractions)}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    out_dir: Path = DEFAULT_OUT_DIR
    data_path: Path | None = None
    synth: SynthConfig | None = None
    split: SplitSpec = field(default_factory=SplitSpec)
    model: HybridSpec = field(default_factory=HybridSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {}
        if self.data_path is not None:
            data["path"] = str(self.data_path)
        if self.synth is not None:
            data["synth"] = {
                "n_per_class": self.synth.n_per_class,
                "class_count": self.synth.class_count,
                "size": self.synth.size,
            }
        return {
            "seed": self.seed,
            "out": str(self.out_dir),
            "data": data,
            "split": self.split.to_dict(),
            "model": self.model.to_dict(),
            "train": {
                "batch_size": self.train.batch_size,
                "epochs": self.train.epochs,
                "base_lr": self.train.base_lr,
                "gamma": self.train.gamma,
                "step_epochs": self.train.step_epochs,
                "shuffle": self.train.shuffle,
            },
            "augment": {
                "p_hflip": self.augment.p_hflip,
                "max_rotation_deg": self.augment.max_rotation_deg,
                "max_zoom": self.augment.max_zoom,
            },
        }


def _int(value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise TypeError(f"expected an integer, got {value!r}")
    return value


def _float(value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, int | float):
        raise TypeError(f"expected a number, got {value!r}")
    return float(value)


def _bool(value: Any) -> bool:
    if not isinstance(value, bool):
        raise TypeError(f"expected true or false, got {value!r}")
    return value


def _str(value: Any) -> str:
    if not isinstance(value, str):
        raise TypeError(f"expected a string, got {value!r}")
    return value


def _list_of(convert: Callable[[Any], T]) -> Callable[[Any], list[T]]:
    def parse(value: Any) -> list[T]:
        if not isinstance(value, list):
            raise TypeError(f"expected an array, got {value!r}")
        return [convert(v) for v in value]

    return parse


def _get(
    table: Mapping[str, Any], key: str, convert: Callable[[Any], T], path: str, default: T
) -> T:
    if key not in table:
        return default
    try:
        return convert(table[key])
    except (TypeError, ValueError) as e:
        name = f"{path}.{key}" if path else key
        raise ConfigError(f"{name}: {e}") from e


def _table(data: Mapping[str, Any], key: str, path: str, allowed: set[str]) -> dict[str, Any]:
    value = data.get(key, {})
    full = f"{path}.{key}" if path else key
    if not isinstance(value, dict):
        raise ConfigError(f"{full}: expected a table, got {value!r}")
    unknown = sorted(set(value) - allowed)
    if unknown:
        raise ConfigError(f"{full}.{unknown[0]}: unknown field")
    return value


def _parse_synth(data: Mapping[str, Any]) -> SynthConfig:
    table = _table(data, "synth", "data", {"n_per_class", "class_count", "size"})
    return SynthConfig(
        n_per_class=_get(table, "n_per_class", _int, "data.synth", 75),
        class_count=_get(table, "class_count", _int, "data.synth", 8),
        size=_get(table, "size", _int, "data.synth", 32),
    )


def _parse_split(raw: Mapping[str, Any]) -> SplitSpec:
    table = _table(raw, "split", "", {"counts", "fractions"})
    counts = _get(table, "counts", _list_of(_int), "split", None)
    fractions = _get(table, "fractions", _list_of(_float), "split", None)
    for name, values in (("counts", counts), ("fractions", fractions)):
        if values is not None and len(values) != 3:
            raise ConfigError(f"split.{name}: expected [train, val, test], got {values}")
    if counts is None and fractions is None:
        return SplitSpec()
    return SplitSpec(
        counts=None if counts is None else (counts[0], counts[1], counts[2]),
        fractions=None if fractions is None else (fractions[0], fractions[1], fractions[2]),
    )


def _input_size(value: Any) -> tuple[int, int]:
    if isinstance(value, list):
        if len(value) != 2:
            raise ValueError(f"expected [height, width], got {value}")
        return _int(value[0]), _int(value[1])
    size = _int(value)
    return size, size


def _check_family(table: Mapping[str, Any], path: str, expected: BackboneFamily) -> None:
    family = _get(table, "family", _str, path, expected.value)
    if family != expected.value:
        raise ConfigError(f"{path}.family: must be {expected.value!r}, got {family!r}")


def _parse_model(raw: Mapping[str, Any], default_classes: int) -> HybridSpec:
    table = _table(
        raw,
        "model",
        "",
        {
            "input_size",
            "class_count",
            "head",
            "dropout_rate",
            "freeze",
            "backbone_a",
            "backbone_b",
        },
    )
    class_count = _get(table, "class_count", _int, "model", default_classes)
    head = _get(table, "head", _list_of(_int), "model", [DEFAULT_HIDDEN_WIDTH, class_count])

    a_table = _table(table, "backbone_a", "model", {"family", "blocks"})
    b_table = _table(
        table, "backbone_b", "model", {"family", "stem_channels", "widths", "block_count"}
    )
    _check_family(a_table, "model.backbone_a", BackboneFamily.VGG_STYLE)
    _check_family(b_table, "model.backbone_b", BackboneFamily.INCEPTION_STYLE)
    b_table = {key: value for key, value in b_table.items() if key != "family"}
    try:
        backbone_a = DEFAULT_BACKBONE_A
        if "blocks" in a_table:
            blocks = _get(a_table, "blocks", _list_of(_list_of(_int)), "model.backbone_a", [])
            if any(len(b) != 2 for b in blocks):
                raise ConfigError(
                    f"model.backbone_a.blocks: each block is [conv_count, channels], got {blocks}"
                )
            backbone_a = BackboneSpec.vgg_style(blocks)
        backbone_b = DEFAULT_BACKBONE_B
        if b_table:
            assert DEFAULT_BACKBONE_B.widths is not None
            widths = _get(
                b_table,
                "widths",
                _list_of(_int),
                "model.backbone_b",
                list(DEFAULT_BACKBONE_B.widths.to_dict().values()),
            )
            backbone_b = BackboneSpec.inception_style(
                _get(b_table, "stem_channels", _int, "model.backbone_b", 16),
                InceptionWidths.from_sequence(widths),
                _get(b_table, "block_count", _int, "model.backbone_b", 1),
            )
        return HybridSpec(
            input_size=_get(table, "input_size", _input_size, "model", (32, 32)),
            class_count=class_count,
            backbone_a=backbone_a,
            backbone_b=backbone_b,
            head=tuple(head),
            dropout_rate=_get(table, "dropout_rate", _float, "model", 0.5),
            freeze=tuple(_get(table, "freeze", _list_of(_str), "model", [])),
        )
    except SpecError as e:
        raise ConfigError(f"model: {e}") from e


def _parse_train(raw: Mapping[str, Any], seed: int) -> TrainConfig:
    table = _table(
        raw, "train", "", {"batch_size", "epochs", "base_lr", "gamma", "step_epochs", "shuffle"}
    )
    defaults = TrainConfig()
    values: dict[str, Any] = {
        "batch_size": _get(table, "batch_size", _int, "train", defaults.batch_size),
        "epochs": _get(table, "epochs", _int, "train", defaults.epochs),
        "base_lr": _get(table, "base_lr", _float, "train", defaults.base_lr),
        "gamma": _get(table, "gamma", _float, "train", defaults.gamma),
        "step_epochs": _get(table, "step_epochs", _int, "train", defaults.step_epochs),
        "shuffle": _get(table, "shuffle", _bool, "train", defaults.shuffle),
    }
    try:
        return TrainConfig(seed=seed, **values)
    except ConfigError as e:
        raise ConfigError(f"train.{e}") from e


def _parse_augment(raw: Mapping[str, Any]) -> AugmentParams:
    table = _table(raw, "augment", "", {"p_hflip", "max_rotation_deg", "max_zoom"})
    defaults = AugmentParams()
    values: dict[str, Any] = {
        name: _get(table, name, _float, "augment", getattr(defaults, name))
        for name in ("p_hflip", "max_rotation_deg", "max_zoom")
    }
    try:
        return AugmentParams(**values)
    except ConfigError as e:
        raise ConfigError(f"augment.{e}") from e


def apply_overrides(raw: dict[str, Any], overrides: Mapping[str, Any]) -> dict[str, Any]:
    """
    Fold command-line values into the raw TOML tables (flag > file > default).

    Recognised keys: ``seed``, ``out``, ``epochs``, ``batch_size``, ``base_lr``, ``image_size``,
    ``dropout``. ``None`` values are ignored.
    """
    merged = {key: dict(value) if isinstance(value, dict) else value for key, value in raw.items()}
    targets = {
        "seed": ("", "seed"),
        "out": ("", "out"),
        "epochs": ("train", "epochs"),
        "batch_size": ("train", "batch_size"),
        "base_lr": ("train", "base_lr"),
        "image_size": ("model", "input_size"),
        "dropout": ("model", "dropout_rate"),
    }
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in targets:
            raise ConfigError(f"{key}: unknown override")
        section, name = targets[key]
        if not section:
            merged[name] = str(value) if key == "out" else value
            continue
        table = merged.setdefault(section, {})
        if not isinstance(table, dict):
            raise ConfigError(f"{section}: expected a table, got {table!r}")
        table[name] = value
    return merged


def parse_run_config(raw: Mapping[str, Any], require_data: bool = True) -> RunConfig:
    """
    Validate a raw TOML document into a ``RunConfig``.

    Args:
        raw (Mapping[str, Any]): The parsed TOML tables, overrides already applied.
        require_data (bool): Demand exactly one of ``data.path`` and ``data.synth``.

    Returns:
        RunConfig: The validated configuration.

    Raises:
        ConfigError: On any invalid field; the message starts with the dotted field path.
    """
    unknown = sorted(set(raw) - TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown field")
    seed = _get(raw, "seed", _int, "", 42)
    if not 0 <= seed < 2**64:
        raise ConfigError(f"seed: must be an unsigned 64-bit integer, got {seed}")
    out_dir = Path(_get(raw, "out", _str, "", str(DEFAULT_OUT_DIR)))

    data = _table(raw, "data", "", {"path", "synth"})
    data_path = _get(data, "path", _str, "data", None)
    synth = _parse_synth(data) if "synth" in data else None
    if require_data and (data_path is None) == (synth is None):
        raise ConfigError("data: give exactly one of data.path or data.synth")

    default_classes = synth.class_count if synth is not None else HybridSpec().class_count
    return RunConfig(
        seed=seed,
        out_dir=out_dir,
        data_path=None if data_path is None else Path(data_path),
        synth=synth,
        split=_parse_split(raw),
        model=_parse_model(raw, default_classes),
        train=_parse_train(raw, seed),
        augment=_parse_augment(raw),
    )


def load_run_config(
    path: str | Path | None,
    overrides: Mapping[str, Any] | None = None,
    require_data: bool = True,
) -> RunConfig:
    """
    Read ``path`` (TOML), apply command-line overrides and validate.

    Args:
        path (str | Path | None): Config file; ``None`` starts from the defaults.
        overrides (Mapping[str, Any] | None): Command-line values, see ``apply_overrides``.
        require_data (bool): Demand a data source.

    Returns:
        RunConfig: The resolved configuration.

    Raises:
        ConfigError: If the file is unreadable, is not valid TOML, or fails validation.
    """
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        except OSError as e:
            raise ConfigError(f"config: could not read {path}: {e}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"config: {path} is not valid TOML: {e}") from e
    return parse_run_config(apply_overrides(raw, overrides or {}), require_data)
