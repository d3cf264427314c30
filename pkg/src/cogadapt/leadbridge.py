"""3 -> 12 lead adapter, its reconstruction pretraining, and linear baselines."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import lead_math
from . import signal_pipeline as sp
from .errors import ConfigError, DimensionError, NonFiniteError
from .evalkit.splits import EarlyStopState, early_stop_observe
from .nn_core import (
    BatchNorm1d,
    Conv1x1,
    Dropout,
    OptimizerState,
    PlateauState,
    ReLU,
    ScheduleConfig,
    Sequential,
    adamw_step,
    schedule_lr,
    smooth_l1_mean,
)

log = logging.getLogger(__name__)


class Adapter(Sequential):
    """W3 . relu(BN(W2 . relu(BN(W1 x)))) applied at every timestep.

    Dropout sits between the second activation and the output projection and is
    active only in training.
    """

    def __init__(self, rng: np.random.Generator, hidden: int = 64, dropout: float = 0.1,
                 in_leads: int = 3, out_leads: int = 12, bn_momentum: float = 0.1,
                 bn_eps: float = 1e-5):
        super().__init__(
            ("conv1", Conv1x1(in_leads, hidden, rng)),
            ("bn1", BatchNorm1d(hidden, bn_momentum, bn_eps)),
            ("relu1", ReLU()),
            ("conv2", Conv1x1(hidden, hidden, rng)),
            ("bn2", BatchNorm1d(hidden, bn_momentum, bn_eps)),
            ("relu2", ReLU()),
            ("dropout", Dropout(dropout)),
            ("conv3", Conv1x1(hidden, out_leads, rng)),
        )
        self.hidden = hidden
        self.in_leads = in_leads

    def forward(self, x, train=False, rng=None):
        if np.shape(x)[-2] != self.in_leads:
            raise DimensionError(f"adapter expects {self.in_leads} input leads, got {np.shape(x)[-2]}")
        return super().forward(x, train, rng)


def adapter_forward(p: Adapter, x3: np.ndarray, mode: str = "eval", rng=None) -> np.ndarray:
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown mode {mode!r}")
    single = np.ndim(x3) == 2
    out = p.forward(x3[None] if single else x3, train=(mode == "train"), rng=rng)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Fixed and least-squares baselines
# ---------------------------------------------------------------------------


@dataclass
class FixedLeadTransform:
    matrix: np.ndarray  # (12, 3)
    name: str = "fixed"
    intercept: np.ndarray | None = None  # (12,)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (12, 3) or not np.isfinite(self.matrix).all():
            raise DimensionError(f"lead transform must be a finite 12x3 matrix, got {self.matrix.shape}")


def apply_fixed_transform(t: FixedLeadTransform, x3: np.ndarray) -> np.ndarray:
    x3 = np.asarray(x3, dtype=np.float64)
    if x3.shape[-2] != 3:
        raise DimensionError(f"need 3 input leads, got {x3.shape[-2]}")
    out = np.matmul(t.matrix, x3)
    if t.intercept is not None:
        out = out + t.intercept[:, None]
    return out


def load_fixed_transform(path, name: str | None = None) -> FixedLeadTransform:
    """Read a 12-row, 3-column whitespace-separated text matrix ('#' comments)."""
    m = np.loadtxt(path, comments="#", dtype=np.float64, ndmin=2)
    return FixedLeadTransform(m, name or Path(str(path)).stem)


def dower_transform() -> FixedLeadTransform:
    """Bundled Dower-based transform for [I, II, V2] inputs."""
    ref = resources.files("cogadapt.assets").joinpath("dower_3lead.txt")
    with resources.as_file(ref) as p:
        return load_fixed_transform(p, "dower")


def least_squares_fit(x3, y12, ridge: float = 1e-8) -> FixedLeadTransform:
    """Per-lead OLS with intercept over every timestep of every window.

    ``x3`` is (N, 3, T) and ``y12`` is (N, 12, T). Solved through the normal
    equations with ``ridge`` added to the Gram diagonal.
    """
    x3 = np.asarray(x3, dtype=np.float64)
    y12 = np.asarray(y12, dtype=np.float64)
    if x3.ndim == 2:
        x3, y12 = x3[None], y12[None]
    if x3.shape[0] != y12.shape[0] or x3.shape[2] != y12.shape[2]:
        raise DimensionError("input and target windows do not line up")
    n = x3.shape[0] * x3.shape[2]
    if n < 4:
        raise ValueError("least squares needs at least 4 samples")
    gram = np.zeros((4, 4))
    rhs = np.zeros((4, y12.shape[1]))
    for xw, yw in zip(x3, y12):
        a = np.vstack([xw, np.ones(xw.shape[1])])
        gram += a @ a.T
        rhs += a @ yw.T
    # The jitter only conditions a full-rank system; a column it alone props up
    # (a constant or duplicated input lead) is still an error.
    if np.linalg.matrix_rank(gram) < 4:
        raise np.linalg.LinAlgError("Gram matrix is rank deficient")
    gram[np.diag_indices(4)] += ridge
    if np.linalg.cond(gram) > 1e14:
        raise np.linalg.LinAlgError("Gram matrix is ill conditioned")
    coef = np.linalg.solve(gram, rhs)  # (4, 12)
    return FixedLeadTransform(coef[:3].T, "least_squares", intercept=coef[3].copy())


# ---------------------------------------------------------------------------
# Reconstruction pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    beta: float = 0.1
    lr: float = 3e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    early_stop_patience: int = 5
    min_epochs: int = 20
    epochs: int = 100
    batch: int = 512
    grad_accum: int = 4
    hidden: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        for name in ("beta", "batch", "grad_accum", "hidden"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr < 0 or self.weight_decay < 0 or self.epochs < 0:
            raise ConfigError("lr, weight_decay and epochs must be non-negative")

    @property
    def effective_batch(self) -> int:
        return self.batch * self.grad_accum


@dataclass
class PretrainResult:
    adapter: Adapter
    log: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_loss: float = math.inf


def evaluate_adapter(adapter: Adapter, x3, y12, beta: float, batch: int = 256) -> float:
    """Mean smooth-L1 over all leads and samples, eval mode."""
    total = 0.0
    n = x3.shape[0]
    for s in range(0, n, batch):
        out = adapter.forward(x3[s:s + batch], train=False)
        loss, _ = smooth_l1_mean(out, y12[s:s + batch], beta)
        total += loss * out.size
    return total / (n * y12.shape[1] * y12.shape[2])


def predict_adapter(adapter: Adapter, x3, batch: int = 256) -> np.ndarray:
    return np.concatenate([adapter.forward(x3[s:s + batch], train=False)
                           for s in range(0, x3.shape[0], batch)])


def accumulated_gradients(adapter: Adapter, micro_batches, beta: float, rng, trainable=None):
    """Gradient of the mean loss over the union of equally-weighted samples.

    Each micro-batch contributes in proportion to its element count, which
    reproduces the single large-batch gradient when no layer mixes samples.
    """
    total = sum(xb.shape[0] for xb, _ in micro_batches)
    acc: dict[str, np.ndarray] = {}
    loss_sum = 0.0
    for xb, yb in micro_batches:
        out = adapter.forward(xb, train=True, rng=rng)
        loss, dout = smooth_l1_mean(out, yb, beta)
        if not math.isfinite(loss):
            raise NonFiniteError(f"pretraining loss diverged ({loss})")
        adapter.backward(dout)
        w = xb.shape[0] / total
        loss_sum += loss * w
        for k, g in adapter.gradients().items():
            if trainable is not None and k not in trainable:
                continue
            acc[k] = acc[k] + w * g if k in acc else w * g
    return loss_sum, acc


def pretrain_adapter(train_x, train_y, val_x, val_y, cfg: PretrainConfig,
                     rng: np.random.Generator, adapter: Adapter | None = None) -> PretrainResult:
    """Fit the adapter to 12-lead targets with smooth-L1 and AdamW.

    Schedule: linear warmup, cosine annealing and reduce-on-plateau on the
    validation loss. Early stopping never fires before ``cfg.min_epochs``. The
    adapter comes back holding the best-validation weights.
    """
    if len(train_x) < 1 or len(val_x) < 1:
        raise ValueError("need at least one training and one validation window")
    if adapter is None:
        adapter = Adapter(rng, hidden=cfg.hidden, dropout=cfg.dropout)
    result = PretrainResult(adapter)
    params = adapter.parameters()
    opt = OptimizerState(groups={k: "adapter" for k in params},
                         no_decay=adapter.no_decay_names(), weight_decay=cfg.weight_decay)
    sched = ScheduleConfig(eta_max=cfg.lr, total_epochs=max(cfg.epochs, 1),
                           warmup_epochs=min(cfg.warmup_epochs, max(cfg.epochs, 1)),
                           plateau_factor=cfg.plateau_factor,
                           plateau_patience=cfg.plateau_patience)
    plateau = PlateauState(patience=cfg.plateau_patience, factor=cfg.plateau_factor)
    stopper = EarlyStopState(patience=cfg.early_stop_patience, mode="minimize",
                             min_epochs=cfg.min_epochs)
    best_state = adapter.state_dict()
    n = len(train_x)
    group = cfg.effective_batch
    steps_per_epoch = math.ceil(n / group)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        train_loss = 0.0
        lr = 0.0
        for step in range(steps_per_epoch):
            idx = order[step * group:(step + 1) * group]
            micro = [(train_x[idx[s:s + cfg.batch]], train_y[idx[s:s + cfg.batch]])
                     for s in range(0, len(idx), cfg.batch)]
            loss, grads = accumulated_gradients(adapter, micro, cfg.beta, rng)
            train_loss += loss * len(idx) / n
            lr = schedule_lr(sched, epoch + step / steps_per_epoch, plateau)
            adamw_step(opt, params, grads, {"adapter": lr})
        val_loss = evaluate_adapter(adapter, val_x, val_y, cfg.beta)
        if not math.isfinite(val_loss):
            raise NonFiniteError(f"validation loss diverged at epoch {epoch + 1}")
        plateau.observe(val_loss)
        improved = stopper.improved(val_loss)
        decision = early_stop_observe(stopper, epoch + 1, val_loss)
        if improved:
            best_state = adapter.state_dict()
            result.best_epoch = epoch + 1
            result.best_val_loss = val_loss
        result.log.append({"epoch": epoch + 1, "train_loss": train_loss,
                           "val_loss": val_loss, "lr": lr,
                           "plateau_reductions": plateau.reductions})
        log.info("pretrain epoch %d train %.6g val %.6g lr %.3g", epoch + 1, train_loss, val_loss, lr)
        if decision == "stop":
            break
    adapter.load_state_dict(best_state)
    if result.best_epoch is None:
        result.best_val_loss = evaluate_adapter(adapter, val_x, val_y, cfg.beta)
    return result


def reconstruction_pairs(rec12: sp.Recording, cfg: sp.WindowingConfig, mode: str = "train",
                         chest_pick: str = "V2", normalize_inputs: bool = False):
    """(WCT 3-lead input, 12-lead target) window pairs from a clinical recording.

    The 12-lead signal is conditioned first; the wearable view is then simulated
    from it and re-referenced to WCT. Targets stay in millivolts.
    """
    if list(rec12.leads) != list(lead_math.LEADS_12):
        raise DimensionError("reconstruction pairs need a 12-lead recording in standard order")
    rec = sp.clean(rec12)
    rec = sp.resample(rec, cfg.target_fs)
    rec = sp.bandpass(rec, cfg.band, cfg.filter_order)
    xs, ys = [], []
    for w in sp.segment(rec, cfg, mode):
        frame = lead_math.LeadFrame12(w.data)
        x3 = lead_math.wct_rereference(lead_math.make_3lead_from_12(frame, chest_pick)).as_array()
        if normalize_inputs:
            x3 = sp.normalize_array(x3, cfg.norm_eps)
        xs.append(x3)
        ys.append(w.data)
    if not xs:
        return np.empty((0, 3, cfg.window_samples)), np.empty((0, 12, cfg.window_samples))
    return np.stack(xs), np.stack(ys)
