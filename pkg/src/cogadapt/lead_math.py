"""Electrocardiographic lead algebra.

Wearable devices record Lead I, Lead II and one chest electrode referenced to
the right leg (RL). Clinical chest leads are referenced to Wilson's central
terminal (WCT), the mean of the RA, LA and LL potentials. With RL taken as
equal to RA the two references differ by (I + II) / 3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

LIMB_LEADS = ("I", "II", "III", "aVR", "aVL", "aVF")
CHEST_LEADS = ("V1", "V2", "V3", "V4", "V5", "V6")
LEADS_12 = LIMB_LEADS + CHEST_LEADS


def _series(*arrays):
    out = [np.asarray(a, dtype=np.float64) for a in arrays]
    shape = out[0].shape
    for a in out[1:]:
        if a.shape != shape:
            raise DimensionError(f"lead length mismatch: {shape} vs {a.shape}")
    return out


@dataclass
class LeadFrame3:
    I: np.ndarray
    II: np.ndarray
    Vx: np.ndarray
    reference: str = "RL"

    def __post_init__(self):
        self.I, self.II, self.Vx = _series(self.I, self.II, self.Vx)
        if self.reference not in ("RL", "WCT"):
            raise ConfigError(f"unknown reference {self.reference!r}")

    def as_array(self) -> np.ndarray:
        return np.stack([self.I, self.II, self.Vx])

    @classmethod
    def from_array(cls, arr: np.ndarray, reference: str = "RL") -> "LeadFrame3":
        arr = np.asarray(arr)
        if arr.shape[0] != 3:
            raise DimensionError(f"need 3 leads, got {arr.shape[0]}")
        return cls(arr[0], arr[1], arr[2], reference)


@dataclass
class LeadFrame12:
    data: np.ndarray  # (12, T) in LEADS_12 order

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] != 12:
            raise DimensionError(f"12-lead frame needs shape (12, T), got {self.data.shape}")

    def __getitem__(self, lead: str) -> np.ndarray:
        try:
            return self.data[LEADS_12.index(lead)]
        except ValueError:
            raise KeyError(lead) from None


def wct_rereference(f: LeadFrame3) -> LeadFrame3:
    """V_x^WCT = V_x^RL + (I + II) / 3; limb leads pass through."""
    if f.reference != "RL":
        raise ConfigError("frame is already WCT-referenced")
    return LeadFrame3(f.I, f.II, f.Vx + (f.I + f.II) / 3.0, reference="WCT")


def simulate_rl_from_wct(v_wct, lead_i, lead_ii) -> np.ndarray:
    """Inverse of the WCT correction: V^RL = V^WCT - (I + II) / 3."""
    v, i, ii = _series(v_wct, lead_i, lead_ii)
    return v - (i + ii) / 3.0


def derive_limb_leads(lead_i, lead_ii):
    """Einthoven and Goldberger relations: returns (III, aVR, aVL, aVF)."""
    i, ii = _series(lead_i, lead_ii)
    return ii - i, -(i + ii) / 2.0, i - ii / 2.0, ii - i / 2.0


def make_3lead_from_12(f: LeadFrame12, chest_pick: str = "V2") -> LeadFrame3:
    """Simulated wearable view [I, II, V_pick^RL] of a clinical recording."""
    if chest_pick not in CHEST_LEADS:
        raise ConfigError(f"chest pick must be one of {CHEST_LEADS}, got {chest_pick!r}")
    i, ii = f["I"], f["II"]
    return LeadFrame3(i, ii, simulate_rl_from_wct(f[chest_pick], i, ii), reference="RL")


def limb_rows(row_i: np.ndarray, row_ii: np.ndarray) -> np.ndarray:
    """Rows for (I, II, III, aVR, aVL, aVF) given lead-field rows of I and II."""
    row_i = np.asarray(row_i, dtype=np.float64)
    row_ii = np.asarray(row_ii, dtype=np.float64)
    return np.stack([row_i, row_ii, *derive_limb_leads(row_i, row_ii)])
