"""Classification and reconstruction metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError, UndefinedMetricError


@dataclass(frozen=True)
class Prediction:
    window_id: str
    subject_id: str
    true_class: int
    predicted_class: int
    positive_prob: float

    def __post_init__(self):
        if not 0.0 <= self.positive_prob <= 1.0:
            raise ValueError(f"probability {self.positive_prob} outside [0, 1]")


def _arrays(preds):
    if len(preds) == 0:
        raise ValueError("no predictions")
    y = np.fromiter((p.true_class for p in preds), dtype=np.int64, count=len(preds))
    yhat = np.fromiter((p.predicted_class for p in preds), dtype=np.int64, count=len(preds))
    return y, yhat


def accuracy(preds) -> float:
    y, yhat = _arrays(preds)
    return float(np.count_nonzero(y == yhat) / len(y))


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    """Class F1 from one-vs-rest counts; 0 when precision + recall is 0.

    2PR/(P+R) reduces to 2tp/(2tp+fp+fn), which rounds only once.
    """
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


def macro_f1(preds) -> float:
    """Unweighted mean of the two class F1 scores."""
    y, yhat = _arrays(preds)
    scores = []
    for c in (0, 1):
        tp = int(np.count_nonzero((yhat == c) & (y == c)))
        fp = int(np.count_nonzero((yhat == c) & (y != c)))
        fn = int(np.count_nonzero((yhat != c) & (y == c)))
        scores.append(f1_from_counts(tp, fp, fn))
    return (scores[0] + scores[1]) / 2


def auroc(preds) -> float:
    """Trapezoidal area under the empirical ROC curve.

    Tied scores form one ROC step, which makes the area identical to the
    Mann-Whitney statistic with ties counted as one half. The sum is kept in
    integers (twice the area in count units) and divided once at the end.
    """
    y, _ = _arrays(preds)
    s = np.fromiter((p.positive_prob for p in preds), dtype=np.float64, count=len(preds))
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes in the ground truth")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    distinct = np.flatnonzero(np.diff(s)) if len(s) > 1 else np.array([], dtype=int)
    ends = np.concatenate([distinct, [len(s) - 1]])
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    tp = np.concatenate([[0], tp]).astype(np.int64)
    fp = np.concatenate([[0], fp]).astype(np.int64)
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return twice_area / (2 * n_pos * n_neg)


def _frames(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.ndim == 3:  # (B, L, T) -> (L, B*T)
        pred = pred.transpose(1, 0, 2).reshape(pred.shape[1], -1)
        target = target.transpose(1, 0, 2).reshape(target.shape[1], -1)
    return pred, target


def rmse_per_lead(pred, target) -> np.ndarray:
    pred, target = _frames(pred, target)
    d = pred - target
    return np.sqrt((d * d).mean(axis=1))


def pearson_cc_per_lead(pred, target) -> np.ndarray:
    pred, target = _frames(pred, target)
    pc = pred - pred.mean(axis=1, keepdims=True)
    tc = target - target.mean(axis=1, keepdims=True)
    sp = np.sqrt((pc * pc).sum(axis=1))
    st = np.sqrt((tc * tc).sum(axis=1))
    if np.any(sp == 0) or np.any(st == 0):
        raise UndefinedMetricError("correlation undefined for a zero-variance lead")
    return (pc * tc).sum(axis=1) / (sp * st)
