"""Small deterministic layer kernel with hand-derived backward passes.

Everything operates on float64 numpy arrays shaped ``(batch, channels, time)``.
A single ``(channels, time)`` tensor is accepted wherever a batch is, and is
treated as a batch of one.

Layers follow a cache-and-backward pattern: ``forward`` stores whatever the
matching ``backward`` needs, ``backward`` returns the input gradient and fills
``grads`` for the layer's own parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigError, DimensionError, NonFiniteError

PROB_CLAMP = 1e-12


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise DimensionError(f"expected (C, T) or (B, C, T), got shape {x.shape}")
    return x, False


# ---------------------------------------------------------------------------
# Functional ops
# ---------------------------------------------------------------------------


@dataclass
class LinearChannelMap:
    """Per-timestep linear map (a kernel-size-1 convolution)."""

    weight: np.ndarray  # (out_ch, in_ch)
    bias: np.ndarray  # (out_ch,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"weight {self.weight.shape} and bias {self.bias.shape} do not match"
            )

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]


def linear_channel_forward(m: LinearChannelMap, x: np.ndarray) -> np.ndarray:
    """out[o, t] = sum_i weight[o, i] * x[i, t] + bias[o]."""
    xb, single = _as_batch(x)
    if xb.shape[1] != m.in_ch:
        raise DimensionError(f"channel mismatch: map expects {m.in_ch}, got {xb.shape[1]}")
    out = np.matmul(m.weight, xb) + m.bias[None, :, None]
    return out[0] if single else out


def linear_channel_backward(m: LinearChannelMap, x: np.ndarray, dy: np.ndarray):
    """Return (dx, dweight, dbias) for a batch."""
    xb, single = _as_batch(x)
    dyb, _ = _as_batch(dy)
    dw = np.tensordot(dyb, xb, axes=([0, 2], [0, 2]))
    db = dyb.sum(axis=(0, 2))
    dx = np.matmul(m.weight.T, dyb)
    return (dx[0] if single else dx), dw, db


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"

    @classmethod
    def identity(cls, channels: int, **kw) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            **kw,
        )

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError("batchnorm momentum must lie in (0, 1)")
        if self.eps <= 0:
            raise ConfigError("batchnorm eps must be positive")
        if self.mode not in ("train", "eval"):
            raise ConfigError(f"unknown batchnorm mode {self.mode!r}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm_forward(bn: BatchNormState, x_batch: np.ndarray, update_stats: bool = True):
    """Normalize per channel; returns (y, cache).

    Train mode uses statistics over batch and time and (optionally) folds them
    into the running estimates. Eval mode uses the running estimates only.
    """
    x = np.asarray(x_batch, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] == 0:
        raise DimensionError(f"batchnorm needs a non-empty (B, C, T) batch, got {x.shape}")
    if x.shape[1] != bn.channels:
        raise DimensionError(f"batchnorm expects {bn.channels} channels, got {x.shape[1]}")
    g = bn.gamma[None, :, None]
    b = bn.beta[None, :, None]
    if bn.mode == "eval":
        inv_std = 1.0 / np.sqrt(bn.running_var + bn.eps)
        xhat = (x - bn.running_mean[None, :, None]) * inv_std[None, :, None]
        return g * xhat + b, ("eval", inv_std, xhat)
    n = x.shape[0] * x.shape[2]
    if n < 2:
        raise DimensionError("train-mode batchnorm needs at least two values per channel")
    mean = x.mean(axis=(0, 2))
    centered = x - mean[None, :, None]
    var = (centered * centered).mean(axis=(0, 2))
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = centered * inv_std[None, :, None]
    if update_stats:
        m = bn.momentum
        bn.running_mean = (1 - m) * bn.running_mean + m * mean
        bn.running_var = (1 - m) * bn.running_var + m * var * (n / (n - 1))
    return g * xhat + b, ("train", inv_std, xhat)


def batchnorm_backward(bn: BatchNormState, cache, dy: np.ndarray):
    """Return (dx, dgamma, dbeta)."""
    kind, inv_std, xhat = cache
    dgamma = (dy * xhat).sum(axis=(0, 2))
    dbeta = dy.sum(axis=(0, 2))
    dxhat = dy * bn.gamma[None, :, None]
    if kind == "eval":
        return dxhat * inv_std[None, :, None], dgamma, dbeta
    n = dy.shape[0] * dy.shape[2]
    s1 = dxhat.sum(axis=(0, 2))[None, :, None]
    s2 = (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
    dx = (inv_std[None, :, None] / n) * (n * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def mean_pool_time(h: np.ndarray) -> np.ndarray:
    """Temporal mean: (C, T) -> (C,), (B, C, T) -> (B, C)."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] < 1:
        raise DimensionError("cannot pool over an empty time axis")
    return h.mean(axis=-1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def focal_loss(probs, true_class: int, alpha, gamma: float) -> float:
    """-alpha_y * (1 - p_t)^gamma * log(p_t) for a single example.

    p_t is clamped to 1e-12 before the log so the loss stays finite.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if abs(probs.sum() - 1.0) > 1e-5:
        raise ValueError("probabilities must sum to 1")
    if gamma < 0:
        raise ConfigError("focal gamma must be non-negative")
    pt = max(float(probs[true_class]), PROB_CLAMP)
    return float(-alpha[true_class] * (1.0 - pt) ** gamma * math.log(pt))


def focal_loss_batch(logits: np.ndarray, y: np.ndarray, alpha, gamma: float):
    """Mean focal loss over a batch and its gradient w.r.t. the logits."""
    p = softmax(logits)
    n = p.shape[0]
    idx = np.arange(n)
    a = np.asarray(alpha, dtype=np.float64)[y]
    pt_raw = p[idx, y]
    pt = np.maximum(pt_raw, PROB_CLAMP)
    log_pt = np.log(pt)
    one_m = 1.0 - pt
    mod = one_m**gamma
    loss = -a * mod * log_pt
    # dL/dp_t, zero inside the clamp region
    if gamma == 0:
        dpt = -a / pt
    else:
        dpt = -a * (-gamma * one_m ** (gamma - 1) * log_pt + mod / pt)
    dpt = np.where(pt_raw > PROB_CLAMP, dpt, 0.0)
    onehot = np.zeros_like(p)
    onehot[idx, y] = 1.0
    dlogits = (dpt * pt_raw)[:, None] * (onehot - p)
    return float(loss.mean()), dlogits / n


def cross_entropy_batch(logits: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    n = z.shape[0]
    idx = np.arange(n)
    loss = lse - z[idx, y]
    p = np.exp(z - lse[:, None])
    p[idx, y] -= 1.0
    return float(loss.mean()), p / n


def smooth_l1(pred, target, beta: float):
    """Elementwise smooth-L1 (Huber scaled by 1/beta)."""
    if beta <= 0:
        raise ConfigError("smooth-L1 beta must be positive")
    d = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))
    out = np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)
    return out if out.ndim else float(out)


def smooth_l1_mean(pred: np.ndarray, target: np.ndarray, beta: float):
    """Mean smooth-L1 over every element and its gradient w.r.t. pred."""
    d = pred - target
    ad = np.abs(d)
    loss = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(ad < beta, d / beta, np.sign(d))
    return float(loss.mean()), grad / d.size


def kaiming_init(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """He-normal draw, N(0, 2 / fan_in)."""
    if fan_in < 1:
        raise ConfigError("fan_in must be >= 1")
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Module:
    """Tiny container protocol: named parameters, buffers, forward/backward."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: list[tuple[str, "Module"]] = []
        self.no_decay: set[str] = set()

    def add(self, name: str, module: "Module") -> "Module":
        self.children.append((name, module))
        return module

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children:
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for mname, mod in self.named_modules(prefix):
            for k, v in mod.params.items():
                out[f"{mname}.{k}" if mname else k] = v
        return out

    def gradients(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for mname, mod in self.named_modules(prefix):
            for k, v in mod.grads.items():
                out[f"{mname}.{k}" if mname else k] = v
        return out

    def no_decay_names(self, prefix: str = "") -> set[str]:
        out = set()
        for mname, mod in self.named_modules(prefix):
            out |= {f"{mname}.{k}" if mname else k for k in mod.no_decay}
        return out

    def buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for mname, mod in self.named_modules(prefix):
            for k, v in mod.local_buffers().items():
                out[f"{mname}.{k}" if mname else k] = v
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed by qualified name."""
        out = {k: v.copy() for k, v in self.parameters().items()}
        out.update({k: v.copy() for k, v in self.buffers().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        bufs = self.buffers()
        expected = set(params) | set(bufs)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise DimensionError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        load_parameters(self, {k: state[k] for k in params})
        for k in bufs:
            if bufs[k].shape != state[k].shape:
                raise DimensionError(f"{k}: expected {bufs[k].shape}, got {state[k].shape}")
        set_buffers(self, {k: state[k] for k in bufs})

    def local_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)

    def forward(self, x, train: bool = False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


def _check_finite(y: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(y).all():
        raise NonFiniteError(f"non-finite values produced by {where}")
    return y


class Conv1x1(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator | None = None,
                 init: str = "kaiming"):
        super().__init__()
        if init == "kaiming":
            if rng is None:
                raise ConfigError("kaiming init needs an rng")
            w = kaiming_init((out_ch, in_ch), in_ch, rng)
        else:
            w = np.zeros((out_ch, in_ch))
        self.params = {"weight": w, "bias": np.zeros(out_ch)}
        self.no_decay = {"bias"}
        self._x = None

    @property
    def map(self) -> LinearChannelMap:
        return LinearChannelMap(self.params["weight"], self.params["bias"])

    def forward(self, x, train=False, rng=None):
        self._x = x
        return _check_finite(linear_channel_forward(self.map, x), "linear map")

    def backward(self, dy):
        dx, dw, db = linear_channel_backward(self.map, self._x, dy)
        self.grads = {"weight": dw, "bias": db}
        return dx


class BatchNorm1d(Module):
    """Batch norm over (batch, time). ``frozen`` forces the running-stat path."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.state = BatchNormState.identity(channels, momentum=momentum, eps=eps)
        self.params = {"gamma": self.state.gamma, "beta": self.state.beta}
        self.no_decay = {"gamma", "beta"}
        self.frozen = False
        self._cache = None

    def local_buffers(self):
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def set_buffer(self, name, value):
        setattr(self.state, name, np.array(value, dtype=np.float64))

    def forward(self, x, train=False, rng=None):
        self.state.gamma = self.params["gamma"]
        self.state.beta = self.params["beta"]
        self.state.mode = "train" if (train and not self.frozen) else "eval"
        y, self._cache = batchnorm_forward(self.state, x)
        return _check_finite(y, "batchnorm")

    def backward(self, dy):
        dx, dg, db = batchnorm_backward(self.state, self._cache, dy)
        self.grads = {"gamma": dg, "beta": db}
        return dx


class ReLU(Module):
    def __init__(self):
        super().__init__()
        self.mask = None

    def forward(self, x, train=False, rng=None):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, dy):
        return np.where(self.mask, dy, 0.0)


class Dropout(Module):
    """Inverted dropout; identity outside training or when p == 0."""

    def __init__(self, p: float):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigError("dropout probability must lie in [0, 1)")
        self.p = p
        self._scale = None

    def forward(self, x, train=False, rng=None):
        if not train or self.p == 0.0:
            self._scale = None
            return x
        if rng is None:
            raise ConfigError("training-mode dropout needs an rng")
        keep = rng.random(x.shape) >= self.p
        self._scale = keep / (1.0 - self.p)
        return x * self._scale

    def backward(self, dy):
        return dy if self._scale is None else dy * self._scale


class Sequential(Module):
    def __init__(self, *named: tuple[str, Module]):
        super().__init__()
        for name, mod in named:
            self.add(name, mod)

    def forward(self, x, train=False, rng=None):
        for _, mod in self.children:
            x = mod.forward(x, train, rng)
        return x

    def backward(self, dy):
        for _, mod in reversed(self.children):
            dy = mod.backward(dy)
        return dy


def set_buffers(module: Module, buffers: dict[str, np.ndarray]) -> None:
    for mname, mod in module.named_modules():
        for k in mod.local_buffers():
            key = f"{mname}.{k}" if mname else k
            if key in buffers:
                mod.set_buffer(k, buffers[key])


def load_parameters(module: Module, values: dict[str, np.ndarray]) -> None:
    """Copy values into the module's parameter arrays in place."""
    params = module.parameters()
    for k, v in values.items():
        if k not in params:
            raise KeyError(f"unknown parameter {k}")
        if params[k].shape != np.shape(v):
            raise DimensionError(f"{k}: expected {params[k].shape}, got {np.shape(v)}")
        params[k][...] = v


def compute_gradients(
    module: Module,
    x: np.ndarray,
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    trainable: set[str] | None = None,
    rng: np.random.Generator | None = None,
    train: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    """Reverse-mode gradients of ``loss_fn(module(x))`` for the trainable leaves.

    Leaves outside ``trainable`` are left out of the returned set.
    """
    out = module.forward(x, train=train, rng=rng)
    loss, dout = loss_fn(out)
    if not math.isfinite(loss):
        raise NonFiniteError("loss is not finite")
    module.backward(dout)
    grads = module.gradients()
    if trainable is not None:
        grads = {k: v for k, v in grads.items() if k in trainable}
    return loss, grads


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """AdamW state; ``groups`` maps each parameter name to a group label."""

    groups: dict[str, str]
    no_decay: set[str] = field(default_factory=set)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(opt: OptimizerState, params: dict[str, np.ndarray],
               grads: dict[str, np.ndarray], lr_per_group: dict[str, float]) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    Only names present in ``grads`` move. Bias and normalization leaves listed
    in ``opt.no_decay`` skip the decay term.
    """
    for g, lr in lr_per_group.items():
        if lr < 0 or not math.isfinite(lr):
            raise ConfigError(f"learning rate for group {g!r} must be >= 0, got {lr}")
    opt.step += 1
    t = opt.step
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        lr = lr_per_group[opt.groups[name]]
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1 - opt.beta1) * g
        v *= opt.beta2
        v += (1 - opt.beta2) * g * g
        if lr == 0.0:
            continue
        if opt.weight_decay and name not in opt.no_decay:
            p *= 1.0 - lr * opt.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)


@dataclass
class ScheduleConfig:
    eta_max: float
    total_epochs: int
    warmup_epochs: float = 0
    eta_min: float = 0.0
    plateau_factor: float = 1.0
    plateau_patience: int = 0

    def __post_init__(self):
        if self.eta_min > self.eta_max:
            raise ConfigError("eta_min must not exceed eta_max")
        if self.warmup_epochs > self.total_epochs:
            raise ConfigError("warmup longer than the whole run")
        if not 0.0 < self.plateau_factor <= 1.0:
            raise ConfigError("plateau_factor must lie in (0, 1]")


@dataclass
class PlateauState:
    """Reduce-on-plateau bookkeeping for a minimized validation loss."""

    patience: int = 0
    factor: float = 1.0
    best: float = math.inf
    bad_epochs: int = 0
    reductions: int = 0

    @property
    def multiplier(self) -> float:
        return self.factor**self.reductions

    def observe(self, val_loss: float) -> bool:
        """Record one epoch; returns True when a reduction was triggered."""
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.patience > 0 and self.factor < 1.0 and self.bad_epochs >= self.patience:
            self.reductions += 1
            self.bad_epochs = 0
            return True
        return False


def schedule_lr(cfg: ScheduleConfig, epoch: float, plateau: PlateauState | None = None) -> float:
    """Linear warmup from 0, cosine decay afterwards, times the plateau multiplier.

    ``epoch`` may be fractional to give per-step values.
    """
    if epoch < cfg.warmup_epochs:
        lr = cfg.eta_max * epoch / cfg.warmup_epochs
    else:
        span = cfg.total_epochs - cfg.warmup_epochs
        frac = (epoch - cfg.warmup_epochs) / span if span > 0 else 1.0
        lr = cfg.eta_min + 0.5 * (cfg.eta_max - cfg.eta_min) * (1.0 + math.cos(math.pi * frac))
    if plateau is not None:
        lr *= plateau.multiplier
    return lr
