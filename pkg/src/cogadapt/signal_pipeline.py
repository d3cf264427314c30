"""Raw-signal conditioning: resampling, filtering, cleanup, windowing, labels.

The conventional order for a wearable recording is::

    clean -> resample -> bandpass -> WCT re-reference -> segment -> label -> normalize

``preprocess_recording`` runs that chain end to end.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from scipy import signal

from . import lead_math
from .errors import CogAdaptError, ConfigError, DimensionError, SignalError

log = logging.getLogger(__name__)

GAP_FACTOR = 1.5
FLAT_TOL = 1e-12


@dataclass
class Recording:
    """Continuous multi-lead signal plus its sparse label stream.

    ``samples`` is lead-major, shape (n_leads, n). ``timestamps`` holds one time
    in seconds per sample; jumps larger than 1.5 sample periods are data gaps.
    """

    subject_id: str
    fs: float
    leads: list[str]
    samples: np.ndarray
    timestamps: np.ndarray | None = None
    t0: float = 0.0
    label_stream: list[tuple[int, int]] = field(default_factory=list)
    label_period: float = 10.0
    reference: str = "RL"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] != len(self.leads):
            raise DimensionError(
                f"samples shape {self.samples.shape} does not match {len(self.leads)} leads"
            )
        if self.fs <= 0:
            raise ConfigError("sampling rate must be positive")
        if self.label_period <= 0:
            raise ConfigError("label period must be positive")
        if self.timestamps is None:
            self.timestamps = self.t0 + np.arange(self.samples.shape[1]) / self.fs
        else:
            self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
            if self.timestamps.shape != (self.samples.shape[1],):
                raise DimensionError("one timestamp per sample required")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def with_samples(self, samples, timestamps=None, fs=None, **kw) -> "Recording":
        return replace(self, samples=samples, timestamps=timestamps,
                       fs=self.fs if fs is None else fs, **kw)


@dataclass
class EcgWindow:
    subject_id: str
    data: np.ndarray  # (C, T)
    fs: float
    t_start: float
    label: int | None = None
    raw_label: int | None = None

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def samples(self) -> int:
        return self.data.shape[1]


@dataclass
class WindowingConfig:
    window_seconds: float = 5.0
    train_stride_seconds: float = 2.5
    eval_stride_seconds: float | None = None
    target_fs: float = 500.0
    band: tuple[float, float] = (0.5, 40.0)
    filter_order: int = 4
    norm_eps: float = 1e-8

    def __post_init__(self):
        self.band = tuple(float(b) for b in self.band)
        if self.eval_stride_seconds is None:
            self.eval_stride_seconds = self.window_seconds
        if not 0 < self.train_stride_seconds <= self.window_seconds:
            raise ConfigError("train stride must satisfy 0 < s <= w")
        if self.eval_stride_seconds <= 0:
            raise ConfigError("eval stride must be positive")
        lo, hi = self.band
        if not 0 < lo < hi < self.target_fs / 2:
            raise ConfigError(f"band {self.band} invalid for fs={self.target_fs}")
        if self.filter_order < 1:
            raise ConfigError("filter order must be >= 1")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_seconds * self.target_fs))

    def stride(self, mode: str) -> float:
        if mode == "train":
            return self.train_stride_seconds
        if mode == "eval":
            return self.eval_stride_seconds
        raise ConfigError(f"unknown segmentation mode {mode!r}")


@dataclass
class AugmentConfig:
    jitter_alpha: float = 0.1
    noise_sigma: float = 0.02
    max_shift_samples: int = 50
    apply_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ConfigError("apply_prob must lie in [0, 1]")


def contiguous_runs(timestamps: np.ndarray, fs: float) -> list[tuple[int, int]]:
    """Half-open index ranges without timestamp jumps above 1.5 periods."""
    n = len(timestamps)
    if n == 0:
        return []
    breaks = np.flatnonzero(np.diff(timestamps) > GAP_FACTOR / fs) + 1
    edges = np.concatenate([[0], breaks, [n]])
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def _rational(ratio: float) -> Fraction:
    for limit in (1_000, 100_000, 10_000_000):
        frac = Fraction(ratio).limit_denominator(limit)
        if abs(float(frac) - ratio) <= 1e-9 * ratio:
            return frac
    raise ConfigError(f"cannot approximate resampling ratio {ratio} rationally")


def _polyphase_filter(up: int, down: int) -> np.ndarray:
    """Kaiser low-pass with every polyphase branch normalized to unit DC gain.

    The stock design leaves a small per-phase DC ripple (about 1e-3 for
    256 -> 500 Hz); normalizing each branch removes it.
    """
    rate = max(up, down)
    h = signal.firwin(20 * rate + 1, 1.0 / rate, window=("kaiser", 5.0))
    for p in range(up):
        h[p::up] /= up * h[p::up].sum()
    return h


def resample(rec: Recording, target_fs: float) -> Recording:
    """Polyphase FIR resampling of every contiguous run to ``target_fs``."""
    if target_fs <= 0:
        raise ConfigError("target sampling rate must be positive")
    if target_fs == rec.fs:
        return rec.with_samples(rec.samples.copy(), rec.timestamps.copy())
    frac = _rational(target_fs / rec.fs)
    up, down = frac.numerator, frac.denominator
    chunks, stamps = [], []
    for a, b in contiguous_runs(rec.timestamps, rec.fs):
        x = rec.samples[:, a:b]
        n_out = int(round((b - a) * target_fs / rec.fs))
        if n_out == 0:
            continue
        y = signal.resample_poly(x, up, down, axis=1, window=_polyphase_filter(up, down),
                                 padtype="line")
        if y.shape[1] >= n_out:
            y = y[:, :n_out]
        else:
            y = np.pad(y, ((0, 0), (0, n_out - y.shape[1])), mode="edge")
        chunks.append(y)
        stamps.append(rec.timestamps[a] + np.arange(n_out) / target_fs)
    if not chunks:
        raise SignalError("recording too short to resample")
    return rec.with_samples(np.concatenate(chunks, axis=1), np.concatenate(stamps), fs=target_fs)


def bandpass(rec: Recording, band=(0.5, 40.0), order: int = 4) -> Recording:
    """Zero-phase Butterworth bandpass (forward-backward) per contiguous run.

    Edges are padded by mirror reflection over 3 * (order + 1) samples.
    """
    lo, hi = band
    if not 0 < lo < hi < rec.fs / 2:
        raise ConfigError(f"band {band} invalid for fs={rec.fs}")
    sos = signal.butter(order, [lo, hi], btype="bandpass", fs=rec.fs, output="sos")
    padlen = 3 * (order + 1)
    out = np.empty_like(rec.samples)
    for a, b in contiguous_runs(rec.timestamps, rec.fs):
        if b - a <= padlen:
            raise SignalError(f"segment of {b - a} samples is shorter than the filter padding ({padlen})")
        out[:, a:b] = signal.sosfiltfilt(sos, rec.samples[:, a:b], axis=1,
                                         padtype="even", padlen=padlen)
    return rec.with_samples(out, rec.timestamps.copy())


def clean(rec: Recording) -> Recording:
    """Drop rows where every lead is missing, zero-fill isolated NaNs.

    Flat leads are handled per window during segmentation (``zero_flat_leads``).
    """
    x = rec.samples
    missing = np.isnan(x)
    keep = ~missing.all(axis=0)
    if not keep.any():
        raise SignalError(f"recording {rec.subject_id!r} is empty after cleanup")
    x = np.where(missing, 0.0, x)[:, keep]
    return rec.with_samples(x, rec.timestamps[keep])


def zero_flat_leads(data: np.ndarray, tol: float = FLAT_TOL) -> np.ndarray:
    """Set every lead whose variance within the block is ~0 to all zeros."""
    flat = data.var(axis=1) <= tol
    if not flat.any():
        return data
    out = data.copy()
    out[flat] = 0.0
    return out


def wct_rereference_recording(rec: Recording) -> Recording:
    if rec.reference == "WCT":
        return rec
    if rec.samples.shape[0] != 3:
        raise DimensionError("WCT re-referencing needs exactly [I, II, Vx]")
    f = lead_math.wct_rereference(lead_math.LeadFrame3.from_array(rec.samples, "RL"))
    return replace(rec, samples=f.as_array(), reference="WCT")


def segment(rec: Recording, cfg: WindowingConfig, mode: str) -> list[EcgWindow]:
    """Cut fixed-length windows starting at t0 + k * stride.

    A window is kept only if all of its samples lie in one contiguous run. The
    short tail of a run is dropped.
    """
    stride = cfg.stride(mode)
    n_win = int(round(cfg.window_seconds * rec.fs))
    half = 0.5 / rec.fs
    ts = rec.timestamps
    out = []
    for a, b in contiguous_runs(ts, rec.fs):
        k = math.ceil((ts[a] - rec.t0 - half) / stride)
        while True:
            t = rec.t0 + k * stride
            i = a + int(round((t - ts[a]) * rec.fs))
            if i + n_win > b:
                break
            if i >= a and abs(ts[i] - t) <= half:
                data = zero_flat_leads(rec.samples[:, i:i + n_win])
                out.append(EcgWindow(rec.subject_id, data, rec.fs, t))
            k += 1
    return out


def binarize_label(raw: int) -> int:
    """1-4 -> 0 (low load), 5-9 -> 1 (high load)."""
    raw = int(raw)
    if not 1 <= raw <= 9:
        raise ValueError(f"raw label must be in 1..9, got {raw}")
    return 0 if raw <= 4 else 1


def label_index(t_start: float, window_seconds: float, delta: float, t0: float = 0.0) -> int:
    """Index of the label interval containing the window midpoint."""
    return int(math.floor((t_start - t0 + window_seconds / 2.0) / delta + 1e-9))


def assign_label(window: EcgWindow, label_stream, delta: float, t0: float = 0.0):
    """Binarized label of the interval holding the window midpoint, or None.

    ``None`` means no label covers the midpoint and the window should be dropped.
    """
    labels = dict(label_stream)
    i = label_index(window.t_start, window.samples / window.fs, delta, t0)
    raw = labels.get(i)
    if raw is None:
        return None
    return binarize_label(raw)


def label_windows(windows: list[EcgWindow], rec: Recording) -> tuple[list[EcgWindow], int]:
    """Attach labels; returns the kept windows and the number discarded."""
    labels = dict(rec.label_stream)
    kept, dropped = [], 0
    for w in windows:
        i = label_index(w.t_start, w.samples / w.fs, rec.label_period, rec.t0)
        raw = labels.get(i)
        if raw is None:
            dropped += 1
            continue
        kept.append(replace(w, label=binarize_label(raw), raw_label=int(raw)))
    if dropped:
        log.warning("%s: %d window(s) discarded, midpoint outside the labelled span",
                    rec.subject_id, dropped)
    return kept, dropped


def normalize_array(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    return (x - mu) / (sd + eps)


def normalize_window(window: EcgWindow, eps: float = 1e-8) -> EcgWindow:
    """Per-lead z-score using this window's own statistics only."""
    return replace(window, data=normalize_array(window.data, eps))


def apply_augmentations(x: np.ndarray, cfg: AugmentConfig, jitter_z=None,
                        noise=None, shift: int | None = None) -> np.ndarray:
    """Apply the given draws in the order jitter, noise, circular shift."""
    out = np.array(x, dtype=np.float64)
    if jitter_z is not None:
        out = out * (1.0 + cfg.jitter_alpha * np.asarray(jitter_z))[:, None]
    if noise is not None:
        out = out + noise
    if shift is not None:
        out = np.roll(out, -int(shift), axis=1)
    return out


def augment(window, cfg: AugmentConfig, rng: np.random.Generator):
    """Random amplitude jitter, additive noise and circular shift.

    Each transform fires independently with probability ``cfg.apply_prob``.
    Accepts an ``EcgWindow`` or a bare (C, T) array and returns the same kind.
    """
    x = window.data if isinstance(window, EcgWindow) else window
    c, t = x.shape
    p = cfg.apply_prob
    jitter = rng.standard_normal(c) if rng.random() < p else None
    noise = rng.normal(0.0, cfg.noise_sigma, size=(c, t)) if rng.random() < p else None
    shift = None
    if rng.random() < p:
        shift = int(rng.integers(-cfg.max_shift_samples, cfg.max_shift_samples + 1))
    y = apply_augmentations(x, cfg, jitter, noise, shift)
    return replace(window, data=y) if isinstance(window, EcgWindow) else y


@dataclass
class PreprocessStats:
    windows: int = 0
    discarded_unlabelled: int = 0
    labels: dict[int, int] = field(default_factory=dict)


def preprocess_recording(rec: Recording, cfg: WindowingConfig, mode: str,
                         stats: PreprocessStats | None = None) -> list[EcgWindow]:
    """Full chain for one 3-lead wearable recording; returns normalized windows."""
    stages = (
        ("clean", clean),
        ("resample", lambda r: resample(r, cfg.target_fs)),
        ("bandpass", lambda r: bandpass(r, cfg.band, cfg.filter_order)),
        ("wct", wct_rereference_recording),
    )
    for name, fn in stages:
        try:
            rec = fn(rec)
        except (CogAdaptError, ValueError, FloatingPointError) as exc:
            try:
                wrapped = type(exc)(f"[{name}] {exc}")
            except TypeError:
                wrapped = SignalError(f"[{name}] {exc}")
            raise wrapped from exc
    windows, dropped = label_windows(segment(rec, cfg, mode), rec)
    windows = [normalize_window(w, cfg.norm_eps) for w in windows]
    if stats is not None:
        stats.windows += len(windows)
        stats.discarded_unlabelled += dropped
        for w in windows:
            stats.labels[w.label] = stats.labels.get(w.label, 0) + 1
    return windows
