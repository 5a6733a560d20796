"""Multivariate series container, CSV ingestion, windowing and normalization.

Arrays are laid out ``[variable, time]``. Time indices are 0-based
throughout the package.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ConstantVariable,
    DataError,
    EmptyFile,
    MissingColumn,
    NonNumericCell,
    SeriesTooShort,
    UsageError,
)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MultivariateSeries:
    """D-variable, T-step real series. Immutable."""

    values: np.ndarray
    names: tuple[str, ...]
    timestamps: tuple[str, ...] | None = None

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 2:
            raise DataError(f"values must be 2-D [D, T], got ndim={values.ndim}")
        D, T = values.shape
        if D < 1 or T < 2:
            raise DataError(f"need D >= 1 and T >= 2, got D={D}, T={T}")
        if not np.all(np.isfinite(values)):
            d, t = np.argwhere(~np.isfinite(values))[0]
            raise DataError(f"non-finite value at variable {d}, time {t}")
        names = tuple(str(n) for n in self.names)
        if len(names) != D:
            raise DataError(f"{len(names)} names for {D} variables")
        if len(set(names)) != D:
            raise DataError(f"variable names are not unique: {names}")
        stamps = None if self.timestamps is None else tuple(self.timestamps)
        if stamps is not None and len(stamps) != T:
            raise DataError(f"{len(stamps)} timestamps for T={T}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "timestamps", stamps)

    @property
    def D(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "MultivariateSeries":
        stamps = None if self.timestamps is None else self.timestamps[start:stop]
        return MultivariateSeries(self.values[:, start:stop], self.names, stamps)

    def with_values(self, values) -> "MultivariateSeries":
        return MultivariateSeries(values, self.names, self.timestamps)


@dataclass(frozen=True)
class WindowPair:
    """Lookback ``input`` [D, L] immediately followed by ``target`` [D, h]."""

    start: int
    input: np.ndarray
    target: np.ndarray


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2
    stride: int = 1

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if not all(0.0 < f < 1.0 for f in fracs):
            raise UsageError(f"split fractions must lie in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise UsageError(f"split fractions must sum to 1, got {sum(fracs)}")
        if self.stride < 1:
            raise UsageError("stride must be positive", "--stride")

    def ranges(self, T: int) -> tuple[range, range, range]:
        """Contiguous, time-ordered, disjoint index ranges covering [0, T)."""
        n_train = int(T * self.train_frac)
        n_test = int(T * self.test_frac)
        n_val = T - n_train - n_test
        return (
            range(0, n_train),
            range(n_train, n_train + n_val),
            range(n_train + n_val, T),
        )


def _parse_real(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(text)
    return value


def load_csv(
    path,
    columns: Sequence[str] | None = None,
    timestamp_col: str | None = None,
    delimiter: str = ",",
) -> MultivariateSeries:
    """Read a header-first CSV into a series.

    ``columns`` is the ordered schema; when omitted every column except the
    timestamp column is used, in file order. Missing values are an error,
    never imputed.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None:
            raise EmptyFile(path)
        header = [h.strip() for h in header]
        if timestamp_col and timestamp_col not in header:
            raise MissingColumn(timestamp_col, path)
        if columns is None:
            columns = [h for h in header if h != timestamp_col]
        for c in columns:
            if c not in header:
                raise MissingColumn(c, path)
        col_idx = [header.index(c) for c in columns]
        ts_idx = header.index(timestamp_col) if timestamp_col else None

        rows: list[list[float]] = []
        stamps: list[str] = []
        for r, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            parsed = []
            for j in col_idx:
                text = row[j].strip() if j < len(row) else ""
                try:
                    parsed.append(_parse_real(text))
                except ValueError:
                    raise NonNumericCell(r, j + 1, text, path) from None
            rows.append(parsed)
            if ts_idx is not None:
                stamps.append(row[ts_idx].strip())
    if not rows:
        raise EmptyFile(path)
    values = np.asarray(rows, dtype=np.float64).T
    return MultivariateSeries(values, tuple(columns), tuple(stamps) if ts_idx is not None else None)


def save_csv(series: MultivariateSeries, path, timestamp_col: str = "date") -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        has_ts = series.timestamps is not None
        writer.writerow(([timestamp_col] if has_ts else []) + list(series.names))
        for t in range(series.T):
            row = [repr(float(v)) for v in series.values[:, t]]
            writer.writerow(([series.timestamps[t]] if has_ts else []) + row)


def window_starts(T: int, L: int, h: int, stride: int = 1, first: int = 0) -> np.ndarray:
    """Start offsets of every (lookback, horizon) window inside ``[first, T)``."""
    if L < 1 or h < 1 or stride < 1:
        raise UsageError("L, h and stride must be positive")
    if T - first < L + h:
        raise SeriesTooShort(T - first, L, h)
    count = (T - first - L - h) // stride + 1
    return first + stride * np.arange(count)


def make_windows(series: MultivariateSeries, L: int, h: int, stride: int = 1) -> list[WindowPair]:
    starts = window_starts(series.T, L, h, stride)
    v = series.values
    return [WindowPair(int(s), v[:, s : s + L], v[:, s + L : s + L + h]) for s in starts]


def window_arrays(values: np.ndarray, starts: np.ndarray, L: int, h: int):
    """Stack windows as ``inputs [N, D, L]`` and ``targets [N, D, h]``."""
    starts = np.asarray(starts)
    idx_in = starts[:, None] + np.arange(L)
    idx_out = starts[:, None] + L + np.arange(h)
    inputs = np.ascontiguousarray(values[:, idx_in].transpose(1, 0, 2))
    targets = np.ascontiguousarray(values[:, idx_out].transpose(1, 0, 2))
    return inputs, targets


def split_window_starts(T: int, L: int, h: int, split: SplitSpec):
    """Window starts for each split; a window belongs to the split holding its target.

    Training windows lie wholly inside the training range. Validation and test
    windows draw their lookback from whatever precedes them, so their targets
    are disjoint from every earlier split's targets.
    """
    train, val, test = split.ranges(T)
    out = []
    for r, lookback_from in ((train, train.start), (val, val.start - L), (test, test.start - L)):
        lo = max(0, lookback_from)
        stop = r.stop
        if stop - lo < L + h:
            out.append(np.zeros(0, dtype=int))
            continue
        out.append(window_starts(stop, L, h, split.stride, first=lo))
    return tuple(out)


@dataclass(frozen=True)
class Normalizer:
    """Per-variable z-score fitted on the training range."""

    mean: np.ndarray
    std: np.ndarray

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean[:, None]) / self.std[:, None]

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std[:, None] + self.mean[:, None]


def fit_normalizer(series: MultivariateSeries, train_range: range | None = None) -> Normalizer:
    """Sample mean and population (divisor N) std on ``train_range`` only."""
    if train_range is None:
        train_range = range(series.T)
    if len(train_range) < 2:
        raise DataError("train range needs at least 2 points")
    x = series.values[:, train_range.start : train_range.stop]
    mean = x.mean(axis=1)
    std = x.std(axis=1)
    for d, s in enumerate(std):
        if s == 0.0:
            raise ConstantVariable(d, series.names[d])
    return Normalizer(_frozen(mean), _frozen(std))
