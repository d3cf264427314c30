"""Scenario partitioning, learning-rate assignment and the fine-tuning loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .. import signal_pipeline as sp
from ..errors import ConfigError, NonFiniteError, UndefinedMetricError
from ..evalkit.metrics import Prediction, auroc, macro_f1
from ..evalkit.splits import EarlyStopState, early_stop_observe
from ..nn_core import (
    BatchNorm1d,
    OptimizerState,
    ScheduleConfig,
    adamw_step,
    cross_entropy_batch,
    focal_loss_batch,
    schedule_lr,
)
from .model import CogAdaptModel, predict_proba

log = logging.getLogger(__name__)

SCENARIOS = ("A", "B", "C")
TIERS = ("top", "mid", "bottom")

# (epochs, batch, lr_head, lr_adapter, lr_top, lr_mid, lr_bottom) per scenario and protocol
_TABLE = {
    ("A", "kfold"): (30, 64, 1e-3, 1e-4, None, None, None),
    ("A", "loso"): (30, 64, 1e-3, 1e-4, None, None, None),
    ("B", "kfold"): (20, 64, 5e-4, 1e-4, 1e-5, None, None),
    ("B", "loso"): (20, 64, 5e-4, 1e-4, 1e-5, None, None),
    ("C", "kfold"): (10, 32, 1e-4, 3e-5, 1e-5, 3e-6, 1e-6),
    ("C", "loso"): (10, 32, 5e-5, 1e-5, 5e-6, 1e-6, 5e-7),
}


@dataclass
class ScenarioConfig:
    scenario: str = "A"
    K: int = 2
    lr_head: float = 1e-3
    lr_adapter: float = 1e-4
    lr_encoder_top: float | None = None
    lr_encoder_mid: float | None = None
    lr_encoder_bottom: float | None = None
    lr_mode: str = "tiered"  # scenario C: "tiered" thirds or "geometric" per layer
    xi: float = 0.3
    eta_base: float | None = None
    loss: str = "focal"
    gamma: float = 2.0
    class_weighting: bool = True
    augment: bool = True
    augment_cfg: sp.AugmentConfig = field(default_factory=sp.AugmentConfig)
    epochs: int = 30
    batch: int = 64
    adapter_trainable: bool = True
    weight_decay: float = 1e-4
    warmup_ratio: float = 0.1
    patience: int = 10
    metric: str = "auroc"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.loss not in ("focal", "cross_entropy"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.gamma < 0:
            raise ConfigError("focal gamma must be >= 0")
        if not 0.0 < self.xi < 1.0:
            raise ConfigError("xi must lie in (0, 1)")
        if self.lr_mode not in ("tiered", "geometric"):
            raise ConfigError(f"unknown lr_mode {self.lr_mode!r}")
        if self.metric not in ("auroc", "macro_f1"):
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.K < 0 or self.epochs < 0 or self.batch < 1 or self.patience < 0:
            raise ConfigError("K, epochs and patience must be >= 0 and batch >= 1")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ConfigError("warmup_ratio must lie in [0, 1]")
        for name in ("lr_head", "lr_adapter", "lr_encoder_top", "lr_encoder_mid",
                     "lr_encoder_bottom", "eta_base"):
            v = getattr(self, name)
            if v is not None and (v < 0 or not math.isfinite(v)):
                raise ConfigError(f"{name} must be a non-negative finite number")

    @classmethod
    def preset(cls, scenario: str, protocol: str = "kfold", **overrides) -> "ScenarioConfig":
        """Default hyperparameters for a scenario under "kfold" or "loso"."""
        if (scenario, protocol) not in _TABLE:
            raise ConfigError(f"no preset for scenario {scenario!r} / protocol {protocol!r}")
        epochs, batch, head, adapter, top, mid, bottom = _TABLE[(scenario, protocol)]
        base = dict(scenario=scenario, epochs=epochs, batch=batch, lr_head=head,
                    lr_adapter=adapter, lr_encoder_top=top, lr_encoder_mid=mid,
                    lr_encoder_bottom=bottom,
                    loss="focal" if scenario == "A" else "cross_entropy",
                    class_weighting=scenario == "A", augment=scenario == "A",
                    metric="auroc" if protocol == "kfold" else "macro_f1")
        base.update(overrides)
        return cls(**base)


@dataclass
class Partition:
    trainable: set[str]
    frozen: set[str]
    frozen_modules: list[str]  # module prefixes run with frozen batchnorm


def _module_groups(model: CogAdaptModel) -> dict[str, list[str]]:
    """Top-level parameter groups: adapter, head, encoder.embed, encoder.layerJ."""
    groups: dict[str, list[str]] = {}
    for name in model.parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] == "encoder" else parts[0]
        groups.setdefault(key, []).append(name)
    return groups


def select_trainable(model: CogAdaptModel, cfg: ScenarioConfig) -> Partition:
    """Split every parameter leaf into trainable and frozen sets for the scenario."""
    L = model.encoder.n_layers
    if cfg.scenario == "B" and cfg.K > L:
        raise ConfigError(f"K={cfg.K} exceeds the encoder depth L={L}")
    train_groups = {"head"}
    if cfg.adapter_trainable:
        train_groups.add("adapter")
    if cfg.scenario == "B":
        train_groups |= {f"encoder.layer{j}" for j in range(L - cfg.K + 1, L + 1)}
    elif cfg.scenario == "C":
        train_groups |= {"encoder.embed"} | {f"encoder.layer{j}" for j in range(1, L + 1)}
    trainable, frozen, frozen_mods = set(), set(), []
    for key, names in _module_groups(model).items():
        if key in train_groups:
            trainable |= set(names)
        else:
            frozen |= set(names)
            frozen_mods.append(key)
    return Partition(trainable, frozen, sorted(frozen_mods))


def tier_of_layer(j: int, L: int) -> str:
    """Encoder layer j (1 = bottom) falls in the top, mid or bottom third."""
    return TIERS[min(2, (3 * (L - j)) // L)]


def depth_decay_rates(eta_base: float, xi: float, L: int) -> list[float]:
    """eta_base * xi**(L - j) for j = 1..L (bottom first)."""
    return [eta_base * xi ** (L - j) for j in range(1, L + 1)]


@dataclass
class LrPlan:
    group_of: dict[str, str]  # parameter name -> group label
    rates: dict[str, float]  # group label -> base learning rate


def assign_learning_rates(model: CogAdaptModel, partition: Partition,
                          cfg: ScenarioConfig) -> LrPlan:
    """Base learning rate for every trainable parameter group.

    Scenario B enforces head > adapter > encoder. Scenario C uses top/mid/bottom
    thirds of the encoder, or per-layer geometric decay with ``lr_mode="geometric"``.
    """
    L = model.encoder.n_layers
    rates = {"head": cfg.lr_head, "adapter": cfg.lr_adapter}
    enc_rate: dict[str, str] = {}
    if cfg.scenario == "B":
        if cfg.lr_encoder_top is None:
            raise ConfigError("scenario B needs lr_encoder_top")
        rates["encoder"] = cfg.lr_encoder_top
        if cfg.adapter_trainable:
            ok = cfg.lr_head > cfg.lr_adapter > cfg.lr_encoder_top
        else:
            ok = cfg.lr_head > cfg.lr_encoder_top
        if not ok:
            raise ConfigError("scenario B requires lr_head > lr_adapter > lr_encoder")
        for j in range(1, L + 1):
            enc_rate[f"encoder.layer{j}"] = "encoder"
    elif cfg.scenario == "C":
        if cfg.lr_mode == "tiered":
            tiers = {"top": cfg.lr_encoder_top, "mid": cfg.lr_encoder_mid,
                     "bottom": cfg.lr_encoder_bottom}
            if any(v is None for v in tiers.values()):
                raise ConfigError("scenario C needs top, mid and bottom encoder rates")
            if not tiers["top"] >= tiers["mid"] >= tiers["bottom"]:
                raise ConfigError("encoder rates must not increase with depth")
            for t, v in tiers.items():
                rates[f"encoder_{t}"] = v
            for j in range(1, L + 1):
                enc_rate[f"encoder.layer{j}"] = f"encoder_{tier_of_layer(j, L)}"
            enc_rate["encoder.embed"] = "encoder_bottom"
        else:
            base = cfg.eta_base if cfg.eta_base is not None else cfg.lr_encoder_top
            if base is None:
                raise ConfigError("geometric decay needs eta_base")
            for j, r in enumerate(depth_decay_rates(base, cfg.xi, L), start=1):
                rates[f"encoder.layer{j}"] = r
                enc_rate[f"encoder.layer{j}"] = f"encoder.layer{j}"
            rates["encoder.embed"] = base * cfg.xi**L
            enc_rate["encoder.embed"] = "encoder.embed"
    group_of = {}
    for key, names in _module_groups(model).items():
        label = enc_rate.get(key, key)
        for n in names:
            if n in partition.trainable:
                if label not in rates:
                    raise ConfigError(f"no learning rate for trainable group {key}")
                group_of[n] = label
    used = set(group_of.values())
    return LrPlan(group_of, {k: v for k, v in rates.items() if k in used})


@dataclass
class ClassWeights:
    alpha: np.ndarray


def compute_class_weights(labels) -> ClassWeights:
    """alpha_c = (n0 + n1) / (2 n_c) from training labels only."""
    y = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(y, minlength=2)
    if len(counts) != 2 or (counts == 0).any():
        raise ConfigError(f"class weights need both classes present, counts={counts.tolist()}")
    return ClassWeights((counts.sum() / (2.0 * counts)).astype(np.float64))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def batch_loss(logits, y, cfg: ScenarioConfig, alpha):
    if cfg.loss == "focal":
        return focal_loss_batch(logits, y, alpha, cfg.gamma)
    return cross_entropy_batch(logits, y)


def evaluate(model: CogAdaptModel, x, y, metric: str, subject_ids=None,
             window_ids=None) -> tuple[float, list[Prediction]]:
    """Validation metric and per-window predictions in eval mode.

    AUROC falls back to macro-F1 when only one class is present.
    """
    probs = predict_proba(model, x)
    preds = make_predictions(probs, y, subject_ids, window_ids)
    if metric == "auroc":
        try:
            return auroc(preds), preds
        except UndefinedMetricError:
            return macro_f1(preds), preds
    return macro_f1(preds), preds


def make_predictions(probs, y, subject_ids=None, window_ids=None) -> list[Prediction]:
    n = len(y)
    subject_ids = subject_ids if subject_ids is not None else [""] * n
    window_ids = window_ids if window_ids is not None else [str(i) for i in range(n)]
    pos = np.clip(probs[:, 1], 0.0, 1.0)
    return [Prediction(str(window_ids[i]), str(subject_ids[i]), int(y[i]),
                       int(probs[i, 1] > probs[i, 0]), float(pos[i])) for i in range(n)]


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    best_metric: float
    best_epoch: int
    log: list[dict]
    partition: Partition
    lr_plan: LrPlan


def _freeze_modules(model: CogAdaptModel, partition: Partition) -> None:
    frozen = tuple(partition.frozen_modules)
    for name, mod in model.named_modules():
        if isinstance(mod, BatchNorm1d):
            mod.frozen = any(name == p or name.startswith(p + ".") for p in frozen)


def _frozen_snapshot(model, partition):
    params = model.parameters()
    snap = {k: params[k].copy() for k in partition.frozen}
    for k, v in model.buffers().items():
        if any(k.startswith(p + ".") for p in partition.frozen_modules):
            snap[k] = v.copy()
    return snap


def _check_frozen(model, snap):
    state = {**model.parameters(), **model.buffers()}
    changed = [k for k, v in snap.items() if not np.array_equal(state[k], v)]
    if changed:
        raise AssertionError(f"frozen leaves changed during training: {changed[:5]}")


def train(model: CogAdaptModel, train_x, train_y, val_x, val_y, cfg: ScenarioConfig,
          rng: np.random.Generator, val_subjects=None) -> TrainResult:
    """Fine-tune ``model`` in place and restore its best-validation weights.

    Per epoch the training windows are shuffled and batched. Scenario-A batches
    are augmented window by window with generators seeded from
    (run seed, epoch, window index), so augmentation does not depend on batch
    order. Learning rates follow linear warmup and cosine decay, evaluated per
    step. Early stopping watches ``cfg.metric`` on the validation set.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    if len(train_x) == 0 or len(val_x) == 0:
        raise ValueError("training and validation sets must be non-empty")
    partition = select_trainable(model, cfg)
    plan = assign_learning_rates(model, partition, cfg)
    _freeze_modules(model, partition)
    alpha = np.ones(2)
    if cfg.loss == "focal" and cfg.class_weighting:
        alpha = compute_class_weights(train_y).alpha
    params = model.parameters()
    opt = OptimizerState(groups=plan.group_of, no_decay=model.no_decay_names(),
                         weight_decay=cfg.weight_decay)
    epochs = max(cfg.epochs, 1)
    sched = ScheduleConfig(eta_max=1.0, total_epochs=epochs, warmup_epochs=cfg.warmup_ratio * epochs)
    stopper = EarlyStopState(patience=cfg.patience, mode="maximize")
    snap = _frozen_snapshot(model, partition)
    aug_seed = int(rng.integers(2**63))
    n = len(train_x)
    steps = math.ceil(n / cfg.batch)
    best_state = model.state_dict()
    best_metric, best_epoch = -math.inf, 0
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        mult = 0.0
        for step in range(steps):
            idx = order[step * cfg.batch:(step + 1) * cfg.batch]
            xb = train_x[idx]
            if cfg.scenario == "A" and cfg.augment:
                xb = np.stack([sp.augment(xb[i], cfg.augment_cfg,
                                          np.random.default_rng([aug_seed, epoch, int(w)]))
                               for i, w in enumerate(idx)])
            logits = model.forward(xb, train=True, rng=rng)
            loss, dlogits = batch_loss(logits, train_y[idx], cfg, alpha)
            if not math.isfinite(loss):
                raise NonFiniteError(f"training loss is {loss} at epoch {epoch + 1}, step {step}")
            model.backward(dlogits)
            grads = {k: g for k, g in model.gradients().items() if k in plan.group_of}
            mult = schedule_lr(sched, epoch + step / steps)
            adamw_step(opt, params, grads, {g: r * mult for g, r in plan.rates.items()})
            loss_sum += loss * len(idx)
        metric, _ = evaluate(model, val_x, val_y, cfg.metric, val_subjects)
        decision = early_stop_observe(stopper, epoch + 1, metric)
        if stopper.best_epoch == epoch + 1:
            best_state = model.state_dict()
            best_metric, best_epoch = metric, epoch + 1
        history.append({"epoch": epoch + 1, "train_loss": loss_sum / n,
                        f"val_{cfg.metric}": metric,
                        "lr": {g: r * mult for g, r in sorted(plan.rates.items())}})
        log.info("epoch %d loss %.5f val %s %.4f", epoch + 1, loss_sum / n, cfg.metric, metric)
        if decision == "stop":
            break
    _check_frozen(model, snap)
    model.load_state_dict(best_state)
    if best_epoch == 0:
        best_metric, _ = evaluate(model, val_x, val_y, cfg.metric, val_subjects)
    return TrainResult(best_state, best_metric, best_epoch, history, partition, plan)


__all__ = [
    "ScenarioConfig", "Partition", "LrPlan", "ClassWeights", "TrainResult",
    "select_trainable", "assign_learning_rates", "compute_class_weights",
    "depth_decay_rates", "tier_of_layer", "train", "evaluate", "make_predictions",
    "batch_loss",
]
