"""Writes evaluation artifacts: report.json/.txt, confusion and ROC CSVs, history, SVG plots."""

import json
import logging
import re
from collections.abc import Sequence
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402
from tabulate import tabulate  # noqa: E402

from aggronet.models import ClassReport, ConfusionMatrix, History, RocCurve  # noqa: E402
from aggronet.utils import write_json  # noqa: E402

logger = logging.getLogger(__name__)

REPORT_JSON = "report.json"
REPORT_TXT = "report.txt"
CONFUSION_CSV = "confusion.csv"
HISTORY_CSV = "history.csv"
HISTORY_JSON = "history.json"
CURVES_SVG = "curves.svg"
CONFUSION_SVG = "confusion.svg"
ROC_SVG = "roc.svg"
_ROC_FILE = re.compile(r"roc_class_(\d+)\.csv")

# fixed salt and no date so identical figures give identical SVG bytes
_SVG_RC = {"svg.hashsalt": "aggronet", "font.size": 10}


def roc_filename(class_index: int) -> str:
    return f"roc_class_{class_index}.csv"


def percent_half_up(rate: float) -> int:
    """A rate in [0, 1] as a whole percentage, rounding halves up (0.935 -> 94)."""
    return int((Decimal(str(rate)) * 100).quantize(Decimal("1"), rounding=ROUND_HALF_UP))


def _pct(rate: float) -> str:
    return f"{percent_half_up(rate)}%"


def format_report(report: ClassReport) -> str:
    """
    Fixed-width classification report: one row per class, then accuracy and the averages.

    Args:
        report (ClassReport): The report to format.

    Returns:
        str: The table, percentages rounded half-up to integers.
    """
    rows: list[list[str | int]] = [
        [c.name, _pct(c.precision), _pct(c.recall), _pct(c.f1), c.support] for c in report.classes
    ]
    rows.append(["Accuracy", "", "", _pct(report.accuracy), report.total])
    for label, avg in (("Macro Avg", report.macro), ("Weighted Avg", report.weighted)):
        rows.append([label, _pct(avg.precision), _pct(avg.recall), _pct(avg.f1), report.total])
    table = tabulate(
        rows,
        headers=["", "Precision", "Recall", "F1-score", "Support"],
        tablefmt="simple",
        colalign=("left", "right", "right", "right", "right"),
    )
    return table + "\n"


def write_history(history: History, out_dir: str | Path) -> list[Path]:
    """Write the per-epoch history as ``history.csv`` and ``history.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    df = history.to_frame()
    csv_path = out_dir / HISTORY_CSV
    df.to_csv(csv_path, index=False, lineterminator="\n")
    json_path = write_json(df.to_dict(orient="records"), out_dir / HISTORY_JSON)
    return [csv_path, json_path]


def read_history(path: str | Path) -> History:
    """Read a history written by ``write_history``, from either its CSV or its JSON file."""
    path = Path(path)
    try:
        if path.suffix == ".json":
            with open(path, encoding="utf-8") as f:
                df = pd.DataFrame.from_records(json.load(f))
        else:
            df = pd.read_csv(path)
    except (OSError, ValueError) as e:
        raise ValueError(f"Could not read history from {path}: {e}") from e
    return History.from_frame(df)


def read_confusion(path: str | Path) -> ConfusionMatrix:
    df = pd.read_csv(path, index_col=0)
    return ConfusionMatrix(
        counts=df.to_numpy(dtype=np.int64), class_names=tuple(str(c) for c in df.columns)
    )


def read_roc_curves(out_dir: str | Path, class_names: Sequence[str]) -> list[RocCurve]:
    """Load every ``roc_class_<k>.csv`` in ``out_dir``; the AUC is recomputed from the points."""
    curves = []
    for path in sorted(Path(out_dir).glob("roc_class_*.csv")):
        match = _ROC_FILE.fullmatch(path.name)
        if match is None:
            continue
        k = int(match.group(1))
        df = pd.read_csv(path)
        fpr = df["fpr"].to_numpy(dtype=np.float64)
        tpr = df["tpr"].to_numpy(dtype=np.float64)
        auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1])) / 2.0)
        name = class_names[k] if k < len(class_names) else f"class_{k}"
        curves.append(
            RocCurve(
                class_index=k,
                class_name=name,
                fpr=fpr,
                tpr=tpr,
                thresholds=df["threshold"].to_numpy(dtype=np.float64),
                auc=auc,
            )
        )
    return sorted(curves, key=lambda c: c.class_index)


def _save_svg(fig: Figure, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_curves(history: History, path: str | Path) -> Path:
    """Train/validation accuracy and loss per epoch, side by side."""
    df = history.to_frame()
    with plt.rc_context(_SVG_RC):
        fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(10, 4))
        ax_acc.plot(df["epoch"], df["train_acc"], marker="o", label="train")
        ax_acc.plot(df["epoch"], df["val_acc"], marker="o", label="validation")
        ax_acc.set_ylabel("Accuracy")
        ax_acc.set_ylim(0, 1)
        ax_loss.plot(df["epoch"], df["train_loss"], marker="o", label="train")
        ax_loss.plot(df["epoch"], df["val_loss"], marker="o", label="validation")
        ax_loss.set_ylabel("Loss")
        for ax in (ax_acc, ax_loss):
            ax.set_xlabel("Epoch")
            ax.grid(linestyle="--")
            ax.legend()
        return _save_svg(fig, Path(path))


def plot_confusion(cm: ConfusionMatrix, path: str | Path) -> Path:
    k = len(cm.class_names)
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(1.0 + 0.8 * k, 1.0 + 0.7 * k))
        ax.imshow(cm.counts, cmap="Blues")
        threshold = cm.counts.max() / 2.0 if cm.counts.size else 0.0
        for t in range(k):
            for p in range(k):
                value = int(cm.counts[t, p])
                colour = "white" if value > threshold else "black"
                ax.text(p, t, str(value), ha="center", va="center", color=colour)
        ax.set_xticks(range(k), list(cm.class_names), rotation=45, ha="right")
        ax.set_yticks(range(k), list(cm.class_names))
        ax.set_xlabel("Predicted")
        ax.set_ylabel("True")
        return _save_svg(fig, Path(path))


def plot_roc(curves: Sequence[RocCurve], path: str | Path) -> Path:
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(6, 6))
        for curve in curves:
            ax.plot(curve.fpr, curve.tpr, label=f"{curve.class_name} (AUC {curve.auc:.3f})")
        ax.plot([0, 1], [0, 1], linestyle="--", color="grey")
        ax.set_xlabel("False Positive Rate")
        ax.set_ylabel("True Positive Rate")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.grid(linestyle="--")
        ax.legend(loc="lower right")
        return _save_svg(fig, Path(path))


def emit(
    report: ClassReport,
    cm: ConfusionMatrix,
    rocs: Sequence[RocCurve],
    out_dir: str | Path,
    history: History | None = None,
    plots: bool = False,
) -> list[Path]:
    """
    Write the evaluation artifacts to ``out_dir``, overwriting earlier files of the same name.

    Args:
        report (ClassReport): Written as ``report.json`` (full precision) and ``report.txt``.
        cm (ConfusionMatrix): Written as ``confusion.csv``.
        rocs (Sequence[RocCurve]): One ``roc_class_<k>.csv`` each; may be empty.
        out_dir (str | Path): Output directory, created if missing.
        history (History | None): Written as ``history.csv``/``history.json`` when given.
        plots (bool): Also render ``confusion.svg``, ``roc.svg`` and ``curves.svg``.

    Returns:
        list[Path]: Files written, in order.

    Raises:
        OSError: If a file cannot be written; the message names the path.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = [write_json(report.to_dict(), out_dir / REPORT_JSON)]
        txt = out_dir / REPORT_TXT
        txt.write_text(format_report(report), encoding="utf-8")
        written.append(txt)
        confusion_path = out_dir / CONFUSION_CSV
        cm.to_frame().to_csv(confusion_path, lineterminator="\n")
        written.append(confusion_path)
        for curve in rocs:
            roc_path = out_dir / roc_filename(curve.class_index)
            curve.to_frame().to_csv(roc_path, index=False, lineterminator="\n")
            written.append(roc_path)
        if history is not None:
            written.extend(write_history(history, out_dir))
        if plots:
            written.append(plot_confusion(cm, out_dir / CONFUSION_SVG))
            if rocs:
                written.append(plot_roc(rocs, out_dir / ROC_SVG))
            if history is not None and len(history):
                written.append(plot_curves(history, out_dir / CURVES_SVG))
    except OSError as e:
        raise OSError(f"Could not write report files to {out_dir}: {e}") from e
    logger.info("Wrote %d report files to %s", len(written), out_dir)
    return written
