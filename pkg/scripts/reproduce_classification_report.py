"""Recompute the published tomato-leaf classification report aggregates from its per-class rows"""

import argparse
import sys
from pathlib import Path

import pandas as pd

from aggronet.metrics import aggregate_check, f1_score
from aggronet.report_io import percent_half_up

PROJECT_ROOT = Path(__file__).resolve().parents[1]

# name: (precision %, recall %, f1 %, support), as printed
PUBLISHED_ROWS = {
    "Early blight": (96, 96, 96, 50),
    "Healthy": (82, 82, 82, 22),
    "Late blight": (94, 97, 95, 92),
    "Leaf Miner": (93, 93, 93, 104),
    "Magnesium Deficiency": (99, 98, 98, 95),
    "Nitrogen Deficiency": (88, 100, 94, 37),
    "Potassium Deficiency": (100, 75, 86, 8),
    "Spotted Wilt Virus": (96, 85, 90, 53),
}
PUBLISHED_MACRO = (93, 91, 92)
PUBLISHED_WEIGHTED = (94, 94, 94)
TOLERANCE_PP = 0.5


def reproduce_table(tolerance: float = TOLERANCE_PP) -> pd.DataFrame:
    """
    Compare every printed F1 cell and aggregate against values recomputed from the rows.

    Args:
        tolerance (float): Allowed deviation in percentage points.

    Returns:
        pd.DataFrame: One row per checked cell with published, recomputed, deviation, ok.
    """
    rows = [(p / 100, r / 100, f / 100, s) for p, r, f, s in PUBLISHED_ROWS.values()]
    records = []
    for name, (precision, recall, f1, _) in zip(PUBLISHED_ROWS, rows, strict=True):
        records.append((f"{name} F1", PUBLISHED_ROWS[name][2], 100 * f1_score(precision, recall)))

    macro, weighted = aggregate_check(rows)
    for label, published, recomputed in (
        ("Macro Avg", PUBLISHED_MACRO, macro),
        ("Weighted Avg", PUBLISHED_WEIGHTED, weighted),
    ):
        values = (recomputed.precision, recomputed.recall, recomputed.f1)
        metrics = ("precision", "recall", "F1")
        for metric, printed, value in zip(metrics, published, values, strict=True):
            records.append((f"{label} {metric}", printed, 100 * value))

    df = pd.DataFrame(records, columns=["cell", "published", "recomputed"])
    df["rounded"] = [percent_half_up(v / 100) for v in df["recomputed"]]
    df["deviation (pp)"] = (df["recomputed"] - df["published"]).abs().round(4)
    df["ok"] = df["deviation (pp)"] <= tolerance + 1e-9
    return df


def parse_arguments() -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        description="Check the published classification report for arithmetic consistency."
    )
    parser.add_argument(
        "--tolerance",
        type=float,
        default=TOLERANCE_PP,
        help="Allowed deviation in percentage points (default: 0.5).",
    )
    parser.add_argument(
        "--output_file",
        type=str,
        default=None,
        help="Optional Markdown file, relative to the project root.",
    )
    return parser.parse_args()


def main() -> int:
    args = parse_arguments()
    df = reproduce_table(args.tolerance)
    print(df.to_markdown(index=False, floatfmt=".2f"))
    if args.output_file:
        df.to_markdown(PROJECT_ROOT / args.output_file, index=False, floatfmt=".2f")

    failed = df[~df["ok"]]
    if not failed.empty:
        print(f"\n{len(failed)} cell(s) deviate by more than {args.tolerance} pp")
        return 1
    print(f"\nAll {len(df)} cells within {args.tolerance} pp")
    return 0


if __name__ == "__main__":
    sys.exit(main())
