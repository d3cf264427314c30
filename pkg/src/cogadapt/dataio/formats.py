"""Binary window and checkpoint files, and the JSON dataset manifest."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import (
    BadMagicError,
    CheckpointShapeError,
    DimensionError,
    FormatError,
    TruncatedError,
    VersionError,
)
from ..signal_pipeline import EcgWindow

WINDOW_MAGIC = b"CGAW"
WINDOW_VERSION = 1
_WINDOW_HEADER = struct.Struct("<4sHHIf")

CHECKPOINT_MAGIC = b"CGAK"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHI")

MANIFEST_VERSION = 1


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Window files
# ---------------------------------------------------------------------------


def encode_window(data: np.ndarray, fs: float) -> bytes:
    """Header then float32 little-endian samples, channel-major."""
    data = np.asarray(data)
    if data.ndim != 2:
        raise DimensionError(f"window must be (channels, samples), got {data.shape}")
    c, n = data.shape
    if c > 0xFFFF or n > 0xFFFFFFFF:
        raise DimensionError("window too large for the file header")
    header = _WINDOW_HEADER.pack(WINDOW_MAGIC, WINDOW_VERSION, c, n, fs)
    return header + np.ascontiguousarray(data, dtype="<f4").tobytes()


def decode_window(buf: bytes) -> tuple[np.ndarray, float]:
    if len(buf) < _WINDOW_HEADER.size:
        if buf[:4] != WINDOW_MAGIC[:len(buf[:4])]:
            raise BadMagicError("not a window file")
        raise TruncatedError("window header is truncated")
    magic, version, c, n, fs = _WINDOW_HEADER.unpack_from(buf)
    if magic != WINDOW_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != WINDOW_VERSION:
        raise VersionError(f"unsupported window file version {version}")
    expected = c * n * 4
    payload = buf[_WINDOW_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedError(f"payload has {len(payload)} bytes, header promises {expected}")
    if len(payload) > expected:
        raise FormatError(f"{len(payload) - expected} trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(c, n).copy()
    return data, float(fs)


def write_window(path, window: EcgWindow | np.ndarray, fs: float | None = None) -> None:
    if isinstance(window, EcgWindow):
        data, fs = window.data, window.fs
    else:
        data = window
        if fs is None:
            raise ValueError("fs is required when writing a bare array")
    _atomic_write(Path(path), encode_window(data, fs))


def read_window(path) -> tuple[np.ndarray, float]:
    """Returns the float32 payload (channels, samples) and the sampling rate."""
    return decode_window(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def encode_checkpoint(state: dict[str, np.ndarray], metadata: dict | None = None) -> bytes:
    """Deterministic encoding: JSON header (sorted keys) then float64 leaves.

    Leaves are stored little-endian in sorted-name order; the header lists each
    name and shape.
    """
    names = sorted(state)
    header = {
        "leaves": [[k, list(np.shape(state[k]))] for k in names],
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")
    parts = [_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)), blob]
    for k in names:
        parts.append(np.ascontiguousarray(state[k], dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < _CKPT_HEADER.size:
        raise TruncatedError("checkpoint header is truncated")
    magic, version, hlen = _CKPT_HEADER.unpack_from(buf)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    off = _CKPT_HEADER.size
    if len(buf) < off + hlen:
        raise TruncatedError("checkpoint metadata is truncated")
    header = json.loads(buf[off:off + hlen].decode("utf-8"))
    off += hlen
    state = {}
    for name, shape in header["leaves"]:
        count = int(np.prod(shape, dtype=np.int64))
        end = off + 8 * count
        if end > len(buf):
            raise TruncatedError(f"leaf {name} is truncated")
        state[name] = np.frombuffer(buf[off:end], dtype="<f8").reshape(shape).astype(np.float64)
        off = end
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes in checkpoint")
    return state, header["metadata"]


def write_checkpoint(path, state: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    _atomic_write(Path(path), encode_checkpoint(state, metadata))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())


def load_checkpoint_into(module, path) -> dict:
    """Load a checkpoint into ``module``; returns its metadata.

    Any missing, unexpected or differently shaped leaf raises CheckpointShapeError.
    """
    state, meta = read_checkpoint(path)
    try:
        module.load_state_dict(state)
    except (DimensionError, KeyError) as exc:
        raise CheckpointShapeError(f"checkpoint does not fit the model: {exc}") from exc
    return meta


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    path: str
    subject_id: str
    t_start: float
    label: int | None = None
    splits: list[str] = field(default_factory=list)
    raw_label: int | None = None


@dataclass
class Manifest:
    dataset: str
    subjects: list[str] = field(default_factory=list)
    entries: list[ManifestEntry] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def to_json(self) -> str:
        doc = {
            "dataset": self.dataset,
            "version": self.version,
            "subjects": list(self.subjects),
            "entries": [vars(e) for e in self.entries],
            "extra": self.extra,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        doc = json.loads(text)
        if doc.get("version") != MANIFEST_VERSION:
            raise VersionError(f"unsupported manifest version {doc.get('version')}")
        entries = [ManifestEntry(**e) for e in doc.get("entries", [])]
        for e in entries:
            if e.label not in (None, 0, 1):
                raise FormatError(f"manifest label {e.label!r} for {e.path} is not 0/1")
        return cls(doc["dataset"], doc.get("subjects", []), entries, doc.get("extra", {}))


def write_manifest(path, manifest: Manifest) -> None:
    _atomic_write(Path(path), manifest.to_json().encode("utf-8"))


def read_manifest(path, check_files: bool = True) -> Manifest:
    """Parse a manifest; with ``check_files`` every referenced file must exist."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    m = Manifest.from_json(path.read_text(encoding="utf-8"))
    if check_files:
        for e in m.entries:
            if not (path.parent / e.path).exists():
                raise FormatError(f"manifest references missing file {e.path}")
    return m
