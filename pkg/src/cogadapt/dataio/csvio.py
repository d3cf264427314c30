"""Recording CSV ingestion and emission.

Schema: a header row with ``timestamp_s``, one column per lead and an optional
``label`` column. A label cell is filled on the first sample of each labelled
interval and left empty elsewhere.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from ..errors import CsvFormatError
from ..signal_pipeline import Recording

TIME_COLUMN = "timestamp_s"
LABEL_COLUMN = "label"


def _parse_float(cell: str, row: int, column: str) -> float:
    try:
        # float() ignores the process locale, so "1,5" is rejected rather than misread
        return float(cell)
    except ValueError:
        raise CsvFormatError(f"row {row}: column {column!r} is not a number: {cell!r}", row) from None


def ingest_csv(path, subject_id: str | None = None, fs: float | None = None,
               leads: list[str] | None = None, label_period: float = 10.0,
               reference: str = "RL") -> Recording:
    """Parse a recording CSV.

    Row numbers in errors count the header as row 1. ``fs`` defaults to the
    reciprocal of the median timestamp step. Gaps are left for the signal
    pipeline to detect.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvFormatError("empty CSV file", 1) from None
        if TIME_COLUMN not in header:
            raise CsvFormatError(f"missing column {TIME_COLUMN!r}", 1)
        lead_cols = leads or [h for h in header if h not in (TIME_COLUMN, LABEL_COLUMN)]
        missing = [c for c in lead_cols if c not in header]
        if missing or not lead_cols:
            raise CsvFormatError(f"missing lead column(s) {missing or 'any'}", 1)
        t_idx = header.index(TIME_COLUMN)
        l_idx = [header.index(c) for c in lead_cols]
        lab_idx = header.index(LABEL_COLUMN) if LABEL_COLUMN in header else None
        times, values, label_cells = [], [], []
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvFormatError(f"row {rowno}: expected {len(header)} cells, got {len(row)}", rowno)
            times.append(_parse_float(row[t_idx], rowno, TIME_COLUMN))
            values.append([_parse_float(row[i], rowno, header[i]) for i in l_idx])
            if lab_idx is not None and row[lab_idx].strip():
                cell = row[lab_idx].strip()
                try:
                    label_cells.append((rowno, times[-1], int(cell)))
                except ValueError:
                    raise CsvFormatError(f"row {rowno}: label {cell!r} is not an integer", rowno) from None
    if not times:
        raise CsvFormatError("no data rows", 2)
    ts = np.asarray(times)
    if np.any(np.diff(ts) <= 0):
        bad = int(np.flatnonzero(np.diff(ts) <= 0)[0]) + 3
        raise CsvFormatError(f"row {bad}: timestamps must increase strictly", bad)
    if fs is None:
        if len(ts) < 2:
            raise CsvFormatError("cannot infer the sampling rate from one row", 2)
        fs = 1.0 / float(np.median(np.diff(ts)))
    t0 = float(ts[0])
    stream = []
    for rowno, t, raw in label_cells:
        if not 1 <= raw <= 9:
            raise CsvFormatError(f"row {rowno}: label {raw} outside 1..9", rowno)
        stream.append((int(math.floor((t - t0) / label_period + 1e-6)), raw))
    return Recording(subject_id or path.stem, float(fs), list(lead_cols),
                     np.asarray(values, dtype=np.float64).T, ts, t0, stream,
                     label_period, reference)


def emit_csv(path, rec: Recording, float_format: str = "%.9g") -> None:
    """Write ``rec`` in the ingestion schema; labels go on each interval's first sample."""
    label_at = {}
    for idx, raw in rec.label_stream:
        t = rec.t0 + idx * rec.label_period
        i = int(np.searchsorted(rec.timestamps, t - 1e-9))
        if i < rec.n_samples:
            label_at[i] = raw
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = [TIME_COLUMN, *rec.leads] + ([LABEL_COLUMN] if rec.label_stream else [])
        w.writerow(header)
        for i in range(rec.n_samples):
            row = ["%.12g" % rec.timestamps[i]]
            row += [float_format % v for v in rec.samples[:, i]]
            if rec.label_stream:
                row.append(str(label_at[i]) if i in label_at else "")
            w.writerow(row)
