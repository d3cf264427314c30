"""Cross-validation plans and early stopping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError


@dataclass
class Fold:
    fold_id: str
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass
class SplitPlan:
    strategy: str  # "kfold" or "loso"
    folds: list[Fold] = field(default_factory=list)

    def __len__(self):
        return len(self.folds)


def kfold_split(labels, k: int = 10, seed: int = 0, val_fraction: float = 0.1) -> SplitPlan:
    """Window-level stratified K-fold with a stratified validation carve-out.

    Each class is shuffled and the concatenation (class 0 then class 1) is dealt
    round-robin into the folds, so per-fold class counts and fold sizes each
    differ by at most one.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ConfigError("k must be >= 2")
    rng = np.random.default_rng(seed)
    dealt = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            raise ConfigError(f"class {c} has {len(idx)} windows, fewer than k={k}")
        dealt.append(rng.permutation(idx))
    order = np.concatenate(dealt)
    fold_of = np.empty(len(labels), dtype=np.int64)
    fold_of[order] = np.arange(len(order)) % k
    plan = SplitPlan("kfold")
    for f in range(k):
        test = np.flatnonzero(fold_of == f)
        rest = np.flatnonzero(fold_of != f)
        frng = np.random.default_rng([seed, f])
        val = []
        for c in np.unique(labels[rest]):
            idx = frng.permutation(rest[labels[rest] == c])
            n_val = int(round(val_fraction * len(idx)))
            if val_fraction > 0 and len(idx) >= 2:
                n_val = max(n_val, 1)
            val.append(idx[:n_val])
        val = np.sort(np.concatenate(val)) if val else np.array([], dtype=np.int64)
        train = np.setdiff1d(rest, val)
        plan.folds.append(Fold(str(f), train, val, test))
    return plan


def loso_split(subjects) -> SplitPlan:
    """One fold per subject; the next subject in id order is the validation set."""
    subjects = np.asarray([str(s) for s in subjects])
    ids = sorted(set(subjects.tolist()))
    if len(ids) < 3:
        raise ConfigError("leave-one-subject-out needs at least 3 subjects")
    plan = SplitPlan("loso")
    for i, sid in enumerate(ids):
        vid = ids[(i + 1) % len(ids)]
        test = np.flatnonzero(subjects == sid)
        val = np.flatnonzero(subjects == vid)
        train = np.flatnonzero((subjects != sid) & (subjects != vid))
        plan.folds.append(Fold(sid, train, val, test))
    return plan


@dataclass
class EarlyStopState:
    patience: int = 10
    mode: str = "maximize"
    min_epochs: int = 0
    best_metric: float | None = None
    best_epoch: int | None = None
    epochs_since_improve: int = 0

    def __post_init__(self):
        if self.mode not in ("maximize", "minimize"):
            raise ConfigError(f"unknown early-stopping mode {self.mode!r}")

    def improved(self, metric: float) -> bool:
        if self.best_metric is None:
            return True
        if self.mode == "maximize":
            return metric > self.best_metric
        return metric < self.best_metric


def early_stop_observe(state: EarlyStopState, epoch: int, metric: float) -> str:
    """Record the metric of a (1-based) epoch; returns "continue" or "stop"."""
    if not np.isfinite(metric):
        raise ValueError("early stopping needs a finite metric")
    if state.improved(metric):
        state.best_metric = float(metric)
        state.best_epoch = epoch
        state.epochs_since_improve = 0
        return "continue"
    state.epochs_since_improve += 1
    if state.epochs_since_improve > state.patience and epoch >= state.min_epochs:
        return "stop"
    return "continue"
