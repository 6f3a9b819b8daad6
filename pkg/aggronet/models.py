from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
import pandas as pd


class AggronetError(Exception):
    """Base class for every error raised by the package."""


class DimensionError(AggronetError, ValueError):
    pass


class NonFiniteError(AggronetError, ArithmeticError):
    pass


class SpecError(AggronetError, ValueError):
    pass


class CheckpointError(AggronetError, ValueError):
    pass


class ImageDecodeError(AggronetError, ValueError):
    pass


class DatasetError(AggronetError, ValueError):
    pass


class TrainingError(AggronetError, RuntimeError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, epoch: int, batch: int, detail: str) -> None:
        super().__init__(f"Training diverged at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


class MetricError(AggronetError, ValueError):
    pass


class ConfigError(AggronetError, ValueError):
    pass


class Partition(Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass
class Image:
    """8-bit RGB raster, rows top to bottom. ``pixels`` has shape (height, width, 3)."""

    width: int
    height: int
    pixels: npt.NDArray[np.uint8]

    def __post_init__(self) -> None:
        if self.pixels.shape != (self.height, self.width, 3):
            raise DimensionError(
                f"Pixel array shape {self.pixels.shape} does not match "
                f"{self.width}x{self.height} RGB image"
            )


@dataclass
class LabeledImage:
    image: Image
    label: int
    source: Path | None = None


@dataclass
class SplitAssignment:
    partitions: tuple[Partition, ...]
    seed: int

    def indices(self, partition: Partition) -> list[int]:
        return [i for i, p in enumerate(self.partitions) if p is partition]

    def counts(self) -> dict[Partition, int]:
        return {p: sum(1 for q in self.partitions if q is p) for p in Partition}


@dataclass
class Dataset:
    examples: list[LabeledImage]
    class_names: tuple[str, ...]
    split: SplitAssignment | None = None

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def labels(self) -> npt.NDArray[np.int64]:
        return np.array([example.label for example in self.examples], dtype=np.int64)

    def class_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=len(self.class_names))
        return {name: int(count) for name, count in zip(self.class_names, counts, strict=True)}


@dataclass(frozen=True)
class AugmentParams:
    p_hflip: float = 0.5
    max_rotation_deg: float = 10.0
    max_zoom: float = 0.1

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_hflip <= 1.0:
            raise ConfigError(f"p_hflip: must lie in [0, 1], got {self.p_hflip}")
        if self.max_rotation_deg < 0.0:
            raise ConfigError(f"max_rotation_deg: must be >= 0, got {self.max_rotation_deg}")
        if not 0.0 <= self.max_zoom < 1.0:
            raise ConfigError(f"max_zoom: must lie in [0, 1), got {self.max_zoom}")

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(p_hflip=0.0, max_rotation_deg=0.0, max_zoom=0.0)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 20
    base_lr: float = 1e-3
    gamma: float = 0.5
    step_epochs: int = 5
    seed: int = 42
    shuffle: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be positive, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs: must be >= 0, got {self.epochs}")
        if not self.base_lr > 0.0:
            raise ConfigError(f"base_lr: must be positive, got {self.base_lr}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma: must lie in (0, 1], got {self.gamma}")
        if self.step_epochs < 1:
            raise ConfigError(f"step_epochs: must be >= 1, got {self.step_epochs}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed: must be an unsigned 64-bit integer, got {self.seed}")


HISTORY_COLUMNS = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr"]


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    def append(
        self,
        train_loss: float,
        train_accuracy: float,
        val_loss: float,
        val_accuracy: float,
        learning_rate: float,
    ) -> None:
        self.train_loss.append(train_loss)
        self.train_accuracy.append(train_accuracy)
        self.val_loss.append(val_loss)
        self.val_accuracy.append(val_accuracy)
        self.learning_rate.append(learning_rate)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "epoch": list(range(len(self))),
                "train_loss": self.train_loss,
                "train_acc": self.train_accuracy,
                "val_loss": self.val_loss,
                "val_acc": self.val_accuracy,
                "lr": self.learning_rate,
            },
            columns=HISTORY_COLUMNS,
        )

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "History":
        missing = [column for column in HISTORY_COLUMNS if column not in df.columns]
        if missing:
            raise ValueError(f"History table is missing columns: {missing}")
        return cls(
            train_loss=[float(x) for x in df["train_loss"]],
            train_accuracy=[float(x) for x in df["train_acc"]],
            val_loss=[float(x) for x in df["val_loss"]],
            val_accuracy=[float(x) for x in df["val_acc"]],
            learning_rate=[float(x) for x in df["lr"]],
        )


@dataclass
class EvaluationResult:
    loss: float
    accuracy: float
    predictions: npt.NDArray[np.int64]
    labels: npt.NDArray[np.int64]
    scores: npt.NDArray[np.float32]


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns are predicted classes."""

    counts: npt.NDArray[np.int64]
    class_names: tuple[str, ...]

    @property
    def support(self) -> npt.NDArray[np.int64]:
        return self.counts.sum(axis=1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            self.counts,
            index=pd.Index(list(self.class_names), name="true\\pred"),
            columns=list(self.class_names),
        )


@dataclass(frozen=True)
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class AverageMetrics:
    precision: float
    recall: float
    f1: float


@dataclass
class ClassReport:
    classes: list[ClassMetrics]
    accuracy: float
    total: int
    macro: AverageMetrics
    weighted: AverageMetrics

    def to_dict(self) -> dict[str, Any]:
        # key order is the documented report.json schema
        return {
            "accuracy": self.accuracy,
            "total": self.total,
            "classes": [
                {
                    "name": c.name,
                    "precision": c.precision,
                    "recall": c.recall,
                    "f1": c.f1,
                    "support": c.support,
                }
                for c in self.classes
            ],
            "macro_avg": {
                "precision": self.macro.precision,
                "recall": self.macro.recall,
                "f1": self.macro.f1,
            },
            "weighted_avg": {
                "precision": self.weighted.precision,
                "recall": self.weighted.recall,
                "f1": self.weighted.f1,
            },
        }


@dataclass
class RocCurve:
    class_index: int
    class_name: str
    fpr: npt.NDArray[np.float64]
    tpr: npt.NDArray[np.float64]
    thresholds: npt.NDArray[np.float64]
    auc: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"threshold": self.thresholds, "fpr": self.fpr, "tpr": self.tpr})
