"""Command-line entry point: ``aggronet {synth,train,eval,predict,report}``."""

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np
from dotenv import load_dotenv

from aggronet.checkpoint import load_checkpoint, save_checkpoint
from aggronet.config import RunConfig, load_run_config
from aggronet.datapipe import rescale, resize_bilinear, synth_dataset
from aggronet.image_io import encode_ppm, load_dataset, read_image, write_dataset
from aggronet.metrics import confusion, report_from_confusion, roc_all
from aggronet.models import (
    CheckpointError,
    ConfigError,
    Dataset,
    DatasetError,
    DivergenceError,
    Partition,
    SpecError,
)
from aggronet.network import build, forward_hybrid
from aggronet.report_io import (
    CONFUSION_CSV,
    CONFUSION_SVG,
    CURVES_SVG,
    HISTORY_CSV,
    ROC_SVG,
    emit,
    format_report,
    plot_confusion,
    plot_curves,
    plot_roc,
    read_confusion,
    read_history,
    read_roc_curves,
    write_history,
)
from aggronet.train import evaluate_partition, split, train_loop
from aggronet.utils import blob_hash, content_hash, worker_count, write_json

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID = 2
EXIT_DIVERGED = 3

CHECKPOINT_DIR = "checkpoint"
DATASET_DIR = "dataset"
RUN_MANIFEST = "run_manifest.json"


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    names = ("seed", "out", "epochs", "batch_size", "base_lr", "image_size", "dropout")
    return {name: getattr(args, name, None) for name in names}


def _run_config(args: argparse.Namespace, require_data: bool = True) -> RunConfig:
    return load_run_config(args.config, _overrides(args), require_data)


def _example_name(dataset: Dataset, index: int, per_class: list[int]) -> str:
    example = dataset.examples[index]
    if example.source is not None:
        return f"{example.source.parent.name}/{example.source.name}"
    name = dataset.class_names[example.label]
    label_index = per_class[example.label]
    per_class[example.label] += 1
    return f"{name}/{name}_{label_index:05d}.ppm"


def load_run_dataset(config: RunConfig) -> Dataset:
    """The dataset named by the config, split with the config's counts and seed."""
    if config.data_path is not None:
        dataset = load_dataset(config.data_path)
    else:
        assert config.synth is not None
        synth = config.synth
        dataset = synth_dataset(synth.n_per_class, synth.class_count, synth.size, config.seed)
    counts = config.split.resolve(len(dataset))
    dataset.split = split(len(dataset), counts, config.seed)
    return dataset


def _check_class_count(dataset: Dataset, class_count: int, source: str) -> None:
    if len(dataset.class_names) != class_count:
        raise DatasetError(
            f"dataset has {len(dataset.class_names)} classes but {source} expects {class_count}"
        )


def cmd_synth(args: argparse.Namespace) -> int:
    config = _run_config(args, require_data=False)
    if config.synth is None:
        raise ConfigError("data.synth: the synth command needs a [data.synth] table")
    synth = config.synth
    dataset = synth_dataset(synth.n_per_class, synth.class_count, synth.size, config.seed)
    root = config.out_dir / DATASET_DIR
    try:
        written = write_dataset(dataset, root)
    except OSError as e:
        raise OSError(f"Could not write dataset to {root}: {e}") from e
    for name, count in dataset.class_counts().items():
        print(f"{name}: {count}")
    print(f"{len(written)} images in {len(dataset.class_names)} classes written to {root}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _run_config(args)
    dataset = load_run_dataset(config)
    _check_class_count(dataset, config.model.class_count, "model.class_count")
    assert dataset.split is not None

    model = build(config.model, config.seed, dataset.class_names)
    model, history = train_loop(
        model,
        dataset,
        dataset.split,
        config.train,
        config.augment,
        workers=worker_count(),
        progress=not args.quiet,
    )
    out_dir = config.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out_dir / CHECKPOINT_DIR)
    write_history(history, out_dir)

    results: dict[str, float | None] = {}
    for partition in (Partition.VAL, Partition.TEST):
        if dataset.split.indices(partition):
            accuracy = evaluate_partition(model, dataset, partition).accuracy
            results[f"{partition.value}_accuracy"] = accuracy
            print(f"{partition.value} accuracy: {accuracy:.4f}")
        else:
            results[f"{partition.value}_accuracy"] = None

    per_class = [0] * len(dataset.class_names)
    blobs = [blob_hash(encode_ppm(example.image)) for example in dataset.examples]
    inputs = [
        {"name": _example_name(dataset, i, per_class), "label": example.label, "blob": blob}
        for i, (example, blob) in enumerate(zip(dataset.examples, blobs, strict=True))
    ]
    manifest = {
        "config": config.to_dict(),
        "class_names": list(dataset.class_names),
        "split": {p.value: n for p, n in dataset.split.counts().items()},
        "inputs": {
            "count": len(inputs),
            "content_hash": content_hash(blobs),
            "files": inputs,
        },
        "epochs_completed": len(history),
        "results": results,
    }
    write_json(manifest, out_dir / RUN_MANIFEST)
    logger.info("Run written to %s", out_dir)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _run_config(args)
    checkpoint = Path(args.checkpoint) if args.checkpoint else config.out_dir / CHECKPOINT_DIR
    model = load_checkpoint(checkpoint)
    dataset = load_run_dataset(config)
    _check_class_count(dataset, model.spec.class_count, f"checkpoint {checkpoint}")

    partition = Partition(args.partition)
    result = evaluate_partition(model, dataset, partition, progress=not args.quiet)
    cm = confusion(result.predictions, result.labels, model.spec.class_count, model.class_names)
    report = report_from_confusion(cm)
    rocs = roc_all(result.scores, result.labels, model.class_names)
    out_dir = config.out_dir / f"eval_{partition.value}"
    history_path = config.out_dir / HISTORY_CSV
    history = read_history(history_path) if history_path.exists() else None
    emit(report, cm, rocs, out_dir, history=history, plots=args.plots)
    print(format_report(report), end="")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    height, width = model.spec.input_size
    for image_path in args.images:
        image = read_image(image_path)
        batch = resize_bilinear(rescale(image), width, height)[np.newaxis]
        probs = forward_hybrid(model, batch)[0]
        top = int(np.argmax(probs))
        print(f"{image_path}: {model.class_names[top]}")
        for name, p in zip(model.class_names, probs, strict=True):
            print(f"  {name}: {p:.4f}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    rendered = []
    if (run_dir / HISTORY_CSV).exists():
        rendered.append(plot_curves(read_history(run_dir / HISTORY_CSV), run_dir / CURVES_SVG))
    if (run_dir / CONFUSION_CSV).exists():
        cm = read_confusion(run_dir / CONFUSION_CSV)
        rendered.append(plot_confusion(cm, run_dir / CONFUSION_SVG))
        curves = read_roc_curves(run_dir, cm.class_names)
        if curves:
            rendered.append(plot_roc(curves, run_dir / ROC_SVG))
    if not rendered:
        raise ConfigError(f"run_dir: no {HISTORY_CSV} or {CONFUSION_CSV} in {run_dir}")
    for path in rendered:
        print(path)
    return EXIT_OK


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="TOML run configuration.")
    parser.add_argument("--seed", type=int, default=None, help="Override the run seed.")
    parser.add_argument("--out", type=str, default=None, help="Override the output directory.")


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epochs", type=int, default=None, help="Override train.epochs.")
    parser.add_argument(
        "--batch-size", dest="batch_size", type=int, default=None, help="Override train.batch_size."
    )
    parser.add_argument(
        "--base-lr", dest="base_lr", type=float, default=None, help="Override train.base_lr."
    )
    parser.add_argument(
        "--image-size",
        dest="image_size",
        type=int,
        default=None,
        help="Override model.input_size with a square size.",
    )
    parser.add_argument(
        "--dropout", type=float, default=None, help="Override model.dropout_rate."
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aggronet",
        description="Train and evaluate a hybrid two-backbone CNN leaf-disease classifier.",
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", "-v", action="store_true", help="Debug logging.")
    verbosity.add_argument(
        "--quiet", "-q", action="store_true", help="Warnings only, no progress bars."
    )
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="Write the synthetic dataset as PPM files.")
    _add_config_flags(synth)
    synth.set_defaults(handler=cmd_synth)

    train = commands.add_parser("train", help="Train a model and write checkpoint and history.")
    _add_config_flags(train)
    _add_train_flags(train)
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("eval", help="Evaluate a checkpoint and write report files.")
    _add_config_flags(evaluate)
    evaluate.add_argument(
        "--checkpoint", type=str, default=None, help="Checkpoint dir (default: <out>/checkpoint)."
    )
    evaluate.add_argument(
        "--partition",
        choices=[p.value for p in Partition],
        default=Partition.TEST.value,
        help="Partition to evaluate.",
    )
    evaluate.add_argument("--plots", action="store_true", help="Also render SVG plots.")
    evaluate.set_defaults(handler=cmd_eval)

    predict = commands.add_parser("predict", help="Classify image files with a checkpoint.")
    predict.add_argument("--checkpoint", type=str, required=True, help="Checkpoint directory.")
    predict.add_argument("images", nargs="+", help="PPM or PNG files.")
    predict.set_defaults(handler=cmd_predict)

    report = commands.add_parser("report", help="Render SVG plots from a run or eval directory.")
    report.add_argument("run_dir", help="Directory holding history.csv and/or confusion.csv.")
    report.set_defaults(handler=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """
    Run one command and return its exit code.

    Exit codes: 0 success, 2 invalid configuration or input, 3 training diverged, 1 anything else.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    else:
        level = logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    load_dotenv()

    try:
        return int(args.handler(args))
    except DivergenceError as e:
        logger.error("Training diverged: %s", e)
        return EXIT_DIVERGED
    except (ConfigError, SpecError, DatasetError, CheckpointError) as e:
        logger.error("%s", e)
        return EXIT_INVALID
    except Exception as e:
        logger.error("aggronet %s failed: %s", args.command, e, exc_info=args.verbose)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
