"""Synthetic 12-lead ECG with an alternating cognitive-load state.

A 3-D cardiac source made of Gaussian P, Q, R, S and T bumps is mixed into the
independent leads (I, II, V1..V6) by a 12x3 lead-field matrix. The remaining
limb leads are derived from I and II, so Einthoven's and Goldberger's relations
hold exactly even with noise.

Load changes the heart rhythm in two ways. High load raises the heart rate and
damps the respiratory sinus arrhythmia, so RR-interval variability drops.
RR interval k is ``mean + sqrt(2) * sigma * sin(2 pi k / resp_beats + phase)``
plus a little beat-to-beat jitter, which makes ``sigma`` the RR standard
deviation of the state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import lead_math
from ..errors import ConfigError
from ..signal_pipeline import Recording

# (offset from R in seconds, width in seconds, amplitude, direction)
_WAVES = {
    "P": (-0.16, 0.022, 0.15, (0.45, 0.80, -0.40)),
    "Q": (-0.028, 0.009, -0.12, (0.20, 0.90, 0.40)),
    "R": (0.0, 0.011, 1.10, (0.60, 0.70, 0.38)),
    "S": (0.030, 0.011, -0.30, (-0.30, 0.60, -0.74)),
    "T": (None, 0.055, 0.32, (0.75, 0.35, -0.56)),
}

# lead fields of I, II and V2 for the default mixing matrix
_BASIS = np.array([
    [1.00, 0.05, 0.10],
    [0.55, 0.95, 0.05],
    [-0.20, 0.15, 1.20],
])


@dataclass
class SynthConfig:
    n_subjects: int = 20
    minutes_per_subject: float = 10.0
    fs: float = 500.0
    base_heart_rate: float = 70.0
    heart_rate_offset: float = 5.0  # per-subject offset drawn from +-this
    load_heart_rate_shift: float = 20.0  # added to the rate under high load
    rr_std_low_load: float = 0.080
    rr_std_high_load: float = 0.020
    rr_jitter: float = 0.004
    resp_beats: tuple[float, float] = (3.5, 4.5)
    block_seconds: float = 30.0
    label_period: float = 10.0
    noise_std: float = 0.01
    baseline_wander: float = 0.0
    precordial_mismatch: float = 0.15
    axis_rotation_deg: float = 10.0
    chest_pick: str = "V2"
    mixing: np.ndarray | None = None  # 12x3; default built from _BASIS and the fixed transform
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1 or self.minutes_per_subject <= 0 or self.fs <= 0:
            raise ConfigError("n_subjects, minutes_per_subject and fs must be positive")
        if self.rr_std_low_load == self.rr_std_high_load:
            raise ConfigError("the two load states need distinct RR variability")
        if min(self.rr_std_low_load, self.rr_std_high_load) < 0 or self.noise_std < 0:
            raise ConfigError("standard deviations must be non-negative")
        if self.label_period <= 0 or self.block_seconds <= 0:
            raise ConfigError("label_period and block_seconds must be positive")
        if self.chest_pick not in lead_math.CHEST_LEADS:
            raise ConfigError(f"unknown chest pick {self.chest_pick!r}")
        if self.mixing is not None:
            m = np.asarray(self.mixing, dtype=np.float64)
            if m.shape != (12, 3) or np.linalg.matrix_rank(m) < 3:
                raise ConfigError("mixing matrix must be 12x3 with full column rank")
            self.mixing = m

    @property
    def duration(self) -> float:
        return self.minutes_per_subject * 60.0


@dataclass
class SubjectTruth:
    subject_id: str
    recording12: Recording
    source: np.ndarray  # (3, N) rotated latent; recording12 = mixing @ source + noise
    rotation: np.ndarray
    beat_times: np.ndarray
    rr: np.ndarray
    label_states: np.ndarray  # 0/1 per label interval
    heart_rate: tuple[float, float]  # (low load, high load) bpm


@dataclass
class SynthTruth:
    mixing: np.ndarray
    subjects: list[SubjectTruth] = field(default_factory=list)


def default_mixing(rng: np.random.Generator, mismatch: float = 0.15) -> np.ndarray:
    """Lead field whose chest rows deviate from the bundled fixed transform.

    Limb rows follow Einthoven/Goldberger from the rows of I and II. V2 is the
    basis row itself; the other chest rows are the fixed-transform prediction
    plus a relative perturbation of size ``mismatch``.
    """
    from ..leadbridge import dower_transform

    dower = dower_transform().matrix
    chest = dower[6:] @ _BASIS
    for k, lead in enumerate(lead_math.CHEST_LEADS):
        if lead != "V2":
            chest[k] += mismatch * np.linalg.norm(chest[k]) * rng.standard_normal(3) / math.sqrt(3)
    chest[lead_math.CHEST_LEADS.index("V2")] = _BASIS[2]
    return np.vstack([lead_math.limb_rows(_BASIS[0], _BASIS[1]), chest])


def _rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    ang = math.radians(max_deg) * rng.uniform(-1.0, 1.0)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(ang) * k + (1 - math.cos(ang)) * (k @ k)


def _beats(cfg: SynthConfig, rng, hr_low: float, hr_high: float, state_at):
    """Beat times from -1 s to past the end, with the RR model in the module docs."""
    resp = rng.uniform(*cfg.resp_beats)
    phase = rng.uniform(0, 2 * math.pi)
    t = -rng.uniform(0.5, 1.0)
    times, rrs = [t], []
    k = 0
    while t < cfg.duration + 1.0:
        high = state_at(t)
        mean = 60.0 / (hr_high if high else hr_low)
        sigma = cfg.rr_std_high_load if high else cfg.rr_std_low_load
        rr = mean + math.sqrt(2.0) * sigma * math.sin(2 * math.pi * k / resp + phase)
        rr += cfg.rr_jitter * rng.standard_normal()
        rr = max(rr, 0.3)
        t += rr
        times.append(t)
        rrs.append(rr)
        k += 1
    return np.array(times), np.array(rrs)


def _source(cfg: SynthConfig, t: np.ndarray, beat_times: np.ndarray, rrs: np.ndarray) -> np.ndarray:
    src = np.zeros((3, len(t)))
    fs = cfg.fs
    for b, tb in enumerate(beat_times):
        rr = rrs[min(b, len(rrs) - 1)]
        for name, (off, width, amp, direction) in _WAVES.items():
            if off is None:
                off = 0.28 * math.sqrt(rr)  # Bazett-like QT stretch
            centre = tb + off
            lo = max(0, int(math.floor((centre - 5 * width - t[0]) * fs)))
            hi = min(len(t), int(math.ceil((centre + 5 * width - t[0]) * fs)) + 1)
            if hi <= lo:
                continue
            bump = amp * np.exp(-0.5 * ((t[lo:hi] - centre) / width) ** 2)
            src[:, lo:hi] += np.outer(direction, bump)
    return src


def synth_generate(cfg: SynthConfig) -> tuple[list[Recording], SynthTruth]:
    """Wearable 3-lead recordings (RL reference) plus the generating ground truth.

    The output is a pure function of ``cfg``: one generator seeded from
    ``cfg.seed`` draws the mixing matrix, and each subject gets its own
    generator seeded from (seed, subject index).
    """
    mixing = cfg.mixing if cfg.mixing is not None else default_mixing(
        np.random.default_rng([cfg.seed, 0xA11]), cfg.precordial_mismatch)
    truth = SynthTruth(mixing=mixing)
    recordings = []
    n = int(round(cfg.duration * cfg.fs))
    t = np.arange(n) / cfg.fs
    n_labels = math.ceil(cfg.duration / cfg.label_period - 1e-9)
    labels_per_block = cfg.block_seconds / cfg.label_period
    indep = [lead_math.LEADS_12.index(x) for x in ("I", "II") + lead_math.CHEST_LEADS]
    for s in range(cfg.n_subjects):
        rng = np.random.default_rng([cfg.seed, s])
        sid = f"S{s + 1:02d}"
        first = int(rng.integers(2))
        states = np.array([(int(i // labels_per_block) + first) % 2 for i in range(n_labels)])
        raw = np.where(states == 1, rng.integers(5, 10, n_labels), rng.integers(1, 5, n_labels))

        def state_at(tt, states=states):
            i = min(max(int(math.floor(tt / cfg.label_period)), 0), n_labels - 1)
            return states[i] == 1

        hr_low = cfg.base_heart_rate + rng.uniform(-cfg.heart_rate_offset, cfg.heart_rate_offset)
        hr_high = hr_low + cfg.load_heart_rate_shift
        beat_times, rrs = _beats(cfg, rng, hr_low, hr_high, state_at)
        rot = _rotation(rng, cfg.axis_rotation_deg)
        gain = rng.uniform(0.8, 1.2)
        source = gain * (rot @ _source(cfg, t, beat_times, rrs))
        x12 = mixing @ source
        extra = np.zeros((len(indep), n))
        if cfg.noise_std > 0:
            extra += rng.normal(0.0, cfg.noise_std, size=extra.shape)
        if cfg.baseline_wander > 0:
            f = rng.uniform(0.1, 0.4, size=(len(indep), 1))
            ph = rng.uniform(0, 2 * math.pi, size=(len(indep), 1))
            extra += cfg.baseline_wander * np.sin(2 * math.pi * f * t + ph)
        if extra.any():
            x12[indep] += extra
            x12[:6] = lead_math.limb_rows(np.eye(2)[0], np.eye(2)[1]) @ x12[:2]
        lead_i, lead_ii = x12[0], x12[1]
        if not np.allclose(lead_i + x12[2], lead_ii, rtol=0, atol=1e-9):
            raise AssertionError("generated limb leads violate Einthoven's law")
        stream = [(i, int(raw[i])) for i in range(n_labels)]
        rec12 = Recording(sid, cfg.fs, list(lead_math.LEADS_12), x12, t.copy(), 0.0,
                          stream, cfg.label_period, reference="WCT")
        f3 = lead_math.make_3lead_from_12(lead_math.LeadFrame12(x12), cfg.chest_pick)
        rec3 = Recording(sid, cfg.fs, ["I", "II", cfg.chest_pick], f3.as_array(), t.copy(), 0.0,
                         list(stream), cfg.label_period, reference="RL")
        recordings.append(rec3)
        truth.subjects.append(SubjectTruth(sid, rec12, source, rot, beat_times, rrs, states,
                                           (hr_low, hr_high)))
    return recordings, truth


def window_rr_std(beat_times: np.ndarray, t_start: float, window_seconds: float) -> float:
    """Std of the RR intervals whose both beats fall inside the window."""
    inside = beat_times[(beat_times >= t_start) & (beat_times < t_start + window_seconds)]
    if len(inside) < 3:
        return float("nan")
    return float(np.std(np.diff(inside)))


def nearest_centroid_accuracy(feature, labels) -> float:
    """Fit one centroid per class on ``feature`` and score the same windows."""
    x = np.asarray(feature, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    keep = np.isfinite(x)
    x, y = x[keep], y[keep]
    c = np.array([x[y == k].mean() for k in (0, 1)])
    pred = np.argmin(np.abs(x[:, None] - c[None, :]), axis=1)
    return float(np.mean(pred == y))
