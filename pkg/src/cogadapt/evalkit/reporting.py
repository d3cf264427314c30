"""Per-subject distribution summaries and CSV reports."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import UndefinedMetricError
from .metrics import accuracy, auroc, macro_f1

REPORT_COLUMNS = ("id", "accuracy", "macro_f1", "auroc")
DIST_COLUMNS = ("metric", "n", "mean", "std", "median", "q1", "q3", "whisker_low", "whisker_high")


@dataclass
class SubjectSummary:
    n: int
    mean: float
    std: float
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float


def subject_summary(values) -> SubjectSummary:
    """Box-plot statistics; whiskers reach the last points within 1.5 IQR."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values to summarize")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    inside_lo = v[v >= q1 - 1.5 * iqr]
    inside_hi = v[v <= q3 + 1.5 * iqr]
    return SubjectSummary(
        n=int(v.size),
        mean=float(v.mean()),
        std=float(v.std()),
        median=float(med),
        q1=float(q1),
        q3=float(q3),
        whisker_low=float(inside_lo.min()),
        whisker_high=float(inside_hi.max()),
    )


def safe_auroc(preds) -> float:
    try:
        return auroc(preds)
    except UndefinedMetricError:
        return math.nan


def metric_row(row_id: str, preds) -> dict:
    return {
        "id": row_id,
        "accuracy": accuracy(preds),
        "macro_f1": macro_f1(preds),
        "auroc": safe_auroc(preds),
    }


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def fold_report(fold_preds: dict[str, list]) -> list[dict]:
    """One row per fold, then a ``mean`` row (fold average, AUROC over defined
    folds only) and a ``pooled`` row (metrics over all predictions at once)."""
    rows = [metric_row(fid, preds) for fid, preds in fold_preds.items()]
    mean = {"id": "mean"}
    for col in ("accuracy", "macro_f1", "auroc"):
        vals = [r[col] for r in rows if not math.isnan(r[col])]
        mean[col] = float(np.mean(vals)) if vals else math.nan
    pooled = metric_row("pooled", [p for preds in fold_preds.values() for p in preds])
    return rows + [mean, pooled]


def distribution_rows(rows: list[dict]) -> list[dict]:
    out = []
    per_fold = [r for r in rows if r["id"] not in ("mean", "pooled")]
    for col in ("accuracy", "macro_f1", "auroc"):
        vals = [r[col] for r in per_fold if not math.isnan(r[col])]
        if not vals:
            continue
        out.append({"metric": col, **asdict(subject_summary(vals))})
    return out
