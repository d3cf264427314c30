"""End-to-end classifier: adapter -> toy encoder -> temporal mean pool -> head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DimensionError
from ..leadbridge import Adapter
from ..nn_core import BatchNorm1d, Conv1x1, Dropout, Module, ReLU, Sequential, softmax


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 32
    stride: int = 1
    head_hidden: int = 256
    head_dropout: float = 0.2
    adapter_hidden: int = 64
    adapter_dropout: float = 0.1
    n_classes: int = 2
    residual: bool = True

    def __post_init__(self):
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.d_model < 1 or self.stride < 1 or self.head_hidden < 1:
            raise ConfigError("d_model, stride and head_hidden must be >= 1")
        if self.n_classes != 2:
            raise ConfigError("only binary classification is supported")


class Subsample(Module):
    """Keep every ``stride``-th timestep."""

    def __init__(self, stride: int):
        super().__init__()
        self.stride = stride
        self._shape = None

    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        return x[..., ::self.stride]

    def backward(self, dy):
        dx = np.zeros(self._shape)
        dx[..., ::self.stride] = dy
        return dx


class ResidualBlock(Module):
    """h + relu(BN(W h + b)), or without the skip when ``residual`` is off."""

    def __init__(self, d: int, rng, residual: bool = True):
        super().__init__()
        self.residual = residual
        self.body = Sequential(("linear", Conv1x1(d, d, rng)), ("bn", BatchNorm1d(d)), ("relu", ReLU()))
        self.add("linear", self.body.children[0][1])
        self.add("bn", self.body.children[1][1])
        self.add("relu", self.body.children[2][1])

    def forward(self, x, train=False, rng=None):
        y = self.body.forward(x, train, rng)
        return x + y if self.residual else y

    def backward(self, dy):
        dx = self.body.backward(dy)
        return dx + dy if self.residual else dx


class ToyEncoder(Module):
    """Embed 12 -> d (after temporal subsampling) followed by L residual blocks.

    Blocks are named ``layer1`` (bottom) through ``layerL`` (top).
    """

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.n_layers = cfg.n_layers
        self.add("subsample", Subsample(cfg.stride))
        self.add("embed", Conv1x1(12, cfg.d_model, rng))
        for j in range(1, cfg.n_layers + 1):
            self.add(f"layer{j}", ResidualBlock(cfg.d_model, rng, cfg.residual))

    def layer(self, j: int) -> ResidualBlock:
        return dict(self.children)[f"layer{j}"]

    def forward(self, x, train=False, rng=None):
        if x.shape[-2] != 12:
            raise DimensionError(f"encoder expects 12 leads, got {x.shape[-2]}")
        for _, mod in self.children:
            x = mod.forward(x, train, rng)
        return x

    def backward(self, dy):
        for _, mod in reversed(self.children):
            dy = mod.backward(dy)
        return dy


class TimeMeanPool(Module):
    """(B, d, T) -> (B, d, 1) mean over time."""

    def __init__(self):
        super().__init__()
        self._t = None

    def forward(self, x, train=False, rng=None):
        self._t = x.shape[-1]
        return x.mean(axis=-1, keepdims=True)

    def backward(self, dy):
        return np.repeat(dy / self._t, self._t, axis=-1)


class Head(Sequential):
    """d -> hidden -> ReLU -> dropout -> n_classes; output layer starts at zero."""

    def __init__(self, d: int, rng, hidden: int = 256, dropout: float = 0.2, n_classes: int = 2):
        super().__init__(
            ("hidden", Conv1x1(d, hidden, rng)),
            ("relu", ReLU()),
            ("dropout", Dropout(dropout)),
            ("out", Conv1x1(hidden, n_classes, init="zeros")),
        )


class CogAdaptModel(Module):
    """Returns logits of shape (B, n_classes); use ``predict_proba`` for softmax."""

    STAGES = ("adapter", "encoder", "pool", "head")

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.adapter = self.add("adapter", Adapter(rng, hidden=cfg.adapter_hidden,
                                                   dropout=cfg.adapter_dropout))
        self.encoder = self.add("encoder", ToyEncoder(cfg, rng))
        self.pool = self.add("pool", TimeMeanPool())
        self.head = self.add("head", Head(cfg.d_model, rng, cfg.head_hidden, cfg.head_dropout,
                                          cfg.n_classes))

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        for name, mod in self.children:
            try:
                x = mod.forward(x, train, rng)
            except DimensionError as exc:
                raise DimensionError(f"[{name}] {exc}") from exc
        return x[..., 0]

    def backward(self, dy):
        dy = dy[..., None]
        for _, mod in reversed(self.children):
            dy = mod.backward(dy)
        return dy


def model_forward(model: CogAdaptModel, x3, mode: str = "eval", rng=None) -> np.ndarray:
    """Class probabilities for one (3, T) window or a (B, 3, T) batch."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown mode {mode!r}")
    single = np.ndim(x3) == 2
    p = softmax(model.forward(x3, train=(mode == "train"), rng=rng))
    return p[0] if single else p


def predict_proba(model: CogAdaptModel, x3, batch: int = 256) -> np.ndarray:
    x3 = np.asarray(x3)
    if len(x3) == 0:
        return np.empty((0, model.cfg.n_classes))
    return np.concatenate([model_forward(model, x3[s:s + batch]) for s in range(0, len(x3), batch)])


def toy_encoder_forward(enc: ToyEncoder, x12, mode: str = "eval", rng=None) -> np.ndarray:
    single = np.ndim(x12) == 2
    out = enc.forward(np.asarray(x12, dtype=np.float64)[None] if single else x12,
                      train=(mode == "train"), rng=rng)
    return out[0] if single else out
