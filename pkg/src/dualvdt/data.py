"""CSV ingestion, windowing, normalization and synthetic series."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np
import torch

from .core import DTYPE, Rng

ETT_COLUMNS = ("date", "HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT")
STD_FLOOR = 1e-8


class DataError(ValueError):
    pass


@dataclass
class RawSeries:
    names: list[str]
    timestamps: list
    values: np.ndarray  # (T, n)
    target: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.names):
            raise DataError(f"values shape {self.values.shape} does not match {len(self.names)} names")
        if len(self.timestamps) != self.values.shape[0]:
            raise DataError("timestamp count differs from row count")
        if self.target not in self.names:
            raise DataError(f"target {self.target!r} not among variables {self.names}")
        if not np.isfinite(self.values).all():
            r, c = np.argwhere(~np.isfinite(self.values))[0]
            raise DataError(f"non-finite value at row {r}, column {self.names[c]!r}")
        for r in range(1, len(self.timestamps)):
            if not self.timestamps[r] > self.timestamps[r - 1]:
                raise DataError(f"timestamps not strictly increasing at row {r}")

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def target_index(self) -> int:
        return self.names.index(self.target)

    def slice(self, start: int, stop: int) -> "RawSeries":
        return RawSeries(list(self.names), self.timestamps[start:stop], self.values[start:stop], self.target)


@dataclass
class SeriesWindow:
    """One lookback/horizon pair.  ``pad`` covers the stacked ``[x; y]`` rows."""

    x: np.ndarray  # (T_x, n)
    y: np.ndarray  # (T_y, n)
    origin: int
    pad: np.ndarray = field(default=None)  # (T_x + T_y, n) bool

    def __post_init__(self):
        if self.pad is None:
            self.pad = np.zeros((self.x.shape[0] + self.y.shape[0], self.x.shape[1]), dtype=bool)

    @property
    def full(self) -> np.ndarray:
        return np.concatenate([self.x, self.y], axis=0)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, w: SeriesWindow) -> SeriesWindow:
        full = np.where(w.pad, 0.0, (w.full - self.mean) / self.std)
        return _split_full(full, w)

    def invert(self, w: SeriesWindow) -> SeriesWindow:
        full = np.where(w.pad, 0.0, w.full * self.std + self.mean)
        return _split_full(full, w)

    def invert_array(self, a: np.ndarray) -> np.ndarray:
        return a * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def _split_full(full, w):
    tx = w.x.shape[0]
    return SeriesWindow(full[:tx].copy(), full[tx:].copy(), w.origin, w.pad.copy())


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _parse_time(text: str, line: int, col: str):
    try:
        return float(text)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"line {line}, column {col!r}: unparseable timestamp {text!r}") from None


def load_csv(path, schema: str = "ett", target: str | None = None, time_column: str | None = None) -> RawSeries:
    """Read an ETT-schema or generic wide CSV.

    ``ett`` requires exactly the published ETT columns with ``OT`` as target.
    ``generic`` takes the first column (or ``time_column``) as timestamps and
    every other column as a numeric variable; ``target`` defaults to the last.
    Errors quote the 1-based file line and the column name.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: missing header row")
    header = [h.strip() for h in rows[0]]

    if schema == "ett":
        missing = [c for c in ETT_COLUMNS if c not in header]
        extra = [c for c in header if c not in ETT_COLUMNS]
        if missing or extra:
            raise DataError(f"{path}: ETT schema mismatch (missing {missing}, unexpected {extra})")
        time_column = "date"
        target = target or "OT"
    elif schema == "generic":
        time_column = time_column or header[0]
        if time_column not in header:
            raise DataError(f"{path}: time column {time_column!r} not in header")
    else:
        raise DataError(f"unknown schema {schema!r}")

    ti = header.index(time_column)
    names = [h for j, h in enumerate(header) if j != ti]
    if not names:
        raise DataError(f"{path}: no value columns")
    target = target or names[-1]
    if target not in names:
        raise DataError(f"{path}: target column {target!r} missing from header {header}")

    stamps, values = [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"line {r}: expected {len(header)} cells, found {len(row)}")
        stamps.append(_parse_time(row[ti], r, time_column))
        vals = []
        for j, cell in enumerate(row):
            if j == ti:
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"line {r}, column {header[j]!r}: non-numeric value {cell!r}") from None
            if not math.isfinite(v):
                raise DataError(f"line {r}, column {header[j]!r}: non-finite value {cell!r}")
            vals.append(v)
        values.append(vals)
    for k in range(1, len(stamps)):
        if type(stamps[k]) is not type(stamps[k - 1]) or not stamps[k] > stamps[k - 1]:
            raise DataError(f"line {k + 2}, column {time_column!r}: timestamps not strictly increasing")
    return RawSeries(names, stamps, np.array(values, dtype=np.float64).reshape(len(values), len(names)), target)


# ---------------------------------------------------------------------------
# Windows and splits
# ---------------------------------------------------------------------------


def make_windows(series: RawSeries, T_x: int, T_y: int, stride: int = 1, pad_partial: bool = False) -> list[SeriesWindow]:
    """Slide a (T_x lookback, T_y horizon) window with the given stride.

    Only full windows are produced unless ``pad_partial``; then trailing
    windows whose horizon overruns the series are zero-padded and flagged.
    """
    if T_x < 1 or T_y < 1 or stride < 1:
        return []
    T, n = series.values.shape
    span = T_x + T_y
    out = []
    last = T - span if not pad_partial else T - T_x - 1
    for o in range(0, last + 1, stride):
        block = np.zeros((span, n))
        pad = np.zeros((span, n), dtype=bool)
        avail = min(span, T - o)
        block[:avail] = series.values[o : o + avail]
        pad[avail:] = True
        out.append(SeriesWindow(block[:T_x].copy(), block[T_x:].copy(), o, pad))
    return out


def split_series(series: RawSeries, ratios=(0.7, 0.1, 0.2)) -> tuple[RawSeries, RawSeries, RawSeries]:
    """Chronological train/validation/test split."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    T = series.T
    a = int(round(T * ratios[0]))
    b = int(round(T * (ratios[0] + ratios[1])))
    return series.slice(0, a), series.slice(a, b), series.slice(b, T)


def fit_normalize(train: list[SeriesWindow]) -> NormStats:
    """Per-variable mean/std over the distinct series rows the windows cover.

    Rows shared by overlapping windows are counted once, keyed on absolute
    position (``origin`` + offset).  Padded cells are ignored.
    """
    if not train:
        raise DataError("fit_normalize: empty training set")
    n = train[0].x.shape[1]
    rows: dict[int, np.ndarray] = {}
    masks: dict[int, np.ndarray] = {}
    for w in train:
        full, pad = w.full, w.pad
        for r in range(full.shape[0]):
            key = w.origin + r
            if key not in rows:
                rows[key] = full[r]
                masks[key] = ~pad[r]
            else:
                masks[key] = masks[key] | ~pad[r]
    keys = sorted(rows)
    vals = np.stack([rows[k] for k in keys])
    valid = np.stack([masks[k] for k in keys])
    mean = np.zeros(n)
    std = np.zeros(n)
    for j in range(n):
        col = vals[valid[:, j], j]
        if col.size:
            mean[j] = col.mean()
            std[j] = col.std()
    return NormStats(mean, np.maximum(std, STD_FLOOR))


def stack_windows(windows: list[SeriesWindow]):
    """Batch tensors: x (B, T_x, n), y (B, T_y, n) and the horizon pad mask (B, T_y, n)."""
    x = torch.from_numpy(np.stack([w.x for w in windows])).to(DTYPE)
    y = torch.from_numpy(np.stack([w.y for w in windows])).to(DTYPE)
    pad = torch.from_numpy(np.stack([w.pad[w.x.shape[0]:] for w in windows]))
    return x, y, pad


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

SYNTH_PERIODS = (24, 12)


def synth_sinusoids(rng: Rng, n: int, T: int, noise_std: float = 0.1) -> RawSeries:
    """``n`` phase-shifted mixtures of a 24- and a 12-step sinusoid plus Gaussian noise.

    Phases come from ``rng``; time enters through ``t mod 24`` so that a
    noise-free series repeats exactly.
    """
    if n < 1 or T < 1:
        raise DataError("synth_sinusoids: n and T must be >= 1")
    phase = rng.uniform((n,), 0.0, 2 * math.pi).numpy()
    amp = rng.uniform((n,), 0.5, 1.5).numpy()
    t = (np.arange(T) % SYNTH_PERIODS[0]).astype(np.float64)[:, None]
    values = amp * np.sin(2 * math.pi * t / SYNTH_PERIODS[0] + phase) + 0.5 * np.sin(
        2 * math.pi * t / SYNTH_PERIODS[1] + 2 * phase
    )
    if noise_std > 0:
        values = values + noise_std * rng.normal((T, n)).numpy()
    names = [f"v{j}" for j in range(n)]
    return RawSeries(names, list(range(T)), values, names[0])


# ---------------------------------------------------------------------------
# Window cache
# ---------------------------------------------------------------------------

_CACHE_HEADER = "<4Q"


def save_window_cache(path, windows: list[SeriesWindow]) -> None:
    """Flat binary: header (n, T_x, T_y, count) as u64, then row-major float64 ``[x; y]`` blocks."""
    if not windows:
        raise DataError("save_window_cache: no windows")
    if any(w.pad.any() for w in windows):
        raise DataError("save_window_cache: padded windows cannot be cached")
    T_x, n = windows[0].x.shape
    T_y = windows[0].y.shape[0]
    with open(path, "wb") as fh:
        fh.write(struct.pack(_CACHE_HEADER, n, T_x, T_y, len(windows)))
        for w in windows:
            fh.write(np.ascontiguousarray(w.full, dtype="<f8").tobytes())


def load_window_cache(path) -> list[SeriesWindow]:
    """Inverse of :func:`save_window_cache`; origins become cache positions."""
    with open(path, "rb") as fh:
        n, T_x, T_y, count = struct.unpack(_CACHE_HEADER, fh.read(struct.calcsize(_CACHE_HEADER)))
        body = np.frombuffer(fh.read(), dtype="<f8")
    if body.size != count * (T_x + T_y) * n:
        raise DataError(f"{path}: body holds {body.size} values, header promises {count * (T_x + T_y) * n}")
    blocks = body.reshape(count, T_x + T_y, n)
    return [SeriesWindow(b[:T_x].copy(), b[T_x:].copy(), k) for k, b in enumerate(blocks)]
