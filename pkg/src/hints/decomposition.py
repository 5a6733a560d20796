"""Additive trend / seasonal / residual decomposition.

Two modes:

``classical``
    Seasonal indices are the period-wise means of ``value - MA(value)`` taken
    over points where the centered moving average has a full window, then
    re-centered to zero mean. The trend is the symmetric moving average of the
    deseasonalized series, with the window shrinking symmetrically at the
    edges. A P-periodic zero-mean signal is therefore absorbed entirely by the
    seasonal component and a linear ramp entirely by the trend, edges
    included.

``stl``
    Cleveland et al. (1990) inner loop with degree-1 LOESS smoothers, two
    inner passes and no robustness iterations.

In both modes ``residual = value - trend - seasonal``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PeriodTooLarge, UsageError
from .timeseries import MultivariateSeries

MODES = ("classical", "stl")


@dataclass(frozen=True)
class Decomposition:
    trend: np.ndarray
    seasonal: np.ndarray
    residual: np.ndarray
    period: int

    def reconstruct(self) -> np.ndarray:
        return self.trend + self.seasonal + self.residual


def _ma_weights(period: int) -> np.ndarray:
    """Centered moving-average weights: plain for odd periods, 2xP for even."""
    if period % 2:
        return np.full(period, 1.0 / period)
    w = np.full(period + 1, 1.0 / period)
    w[0] = w[-1] = 0.5 / period
    return w


def centered_moving_average(x: np.ndarray, period: int) -> np.ndarray:
    """Centered MA along the last axis; edges use a shrinking symmetric window."""
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[-1]
    w = _ma_weights(period)
    half = (len(w) - 1) // 2
    out = np.empty_like(x)
    if T > 2 * half:
        out[..., half : T - half] = np.lib.stride_tricks.sliding_window_view(x, len(w), axis=-1) @ w
    for t in list(range(min(half, T))) + list(range(max(T - half, half), T)):
        r = min(t, T - 1 - t)
        out[..., t] = x[..., t - r : t + r + 1].mean(axis=-1)
    return out


def _classical(x: np.ndarray, period: int):
    """Classical decomposition of every row of ``x`` [rows, T]."""
    T = x.shape[-1]
    half = (len(_ma_weights(period)) - 1) // 2
    detrended = x - centered_moving_average(x, period)
    inner = np.arange(half, T - half)
    index = np.zeros(x.shape[:-1] + (period,))
    for p in range(period):
        cols = inner[inner % period == p]
        if cols.size:
            index[..., p] = detrended[..., cols].mean(axis=-1)
    index -= index.mean(axis=-1, keepdims=True)
    seasonal = index[..., np.arange(T) % period]
    trend = centered_moving_average(x - seasonal, period)
    return trend, seasonal


# --- STL ---------------------------------------------------------------------


def _next_odd(v: float) -> int:
    n = int(np.ceil(v))
    return n if n % 2 else n + 1


def _loess_point(y, n, span, deg, xs, nleft, nright):
    """One LOESS fit at abscissa ``xs`` (1-based) using points nleft..nright."""
    j = np.arange(nleft, nright + 1, dtype=np.float64)
    h = max(xs - nleft, nright - xs)
    if span > n:
        h += (span - n) // 2
    r = np.abs(j - xs)
    w = np.zeros_like(j)
    near = r <= 0.999 * h
    w[near] = 1.0
    mid = near & (r > 0.001 * h)
    w[mid] = (1.0 - (r[mid] / h) ** 3) ** 3
    total = w.sum()
    if total <= 0.0:
        return None
    w /= total
    if h > 0 and deg > 0:
        a = np.dot(w, j)
        c = np.dot(w, (j - a) ** 2)
        if np.sqrt(c) > 0.001 * (n - 1):
            b = (xs - a) / c
            w = w * (b * (j - a) + 1.0)
    return float(np.dot(w, y[nleft - 1 : nright]))


def _loess_smooth(y: np.ndarray, span: int, deg: int) -> np.ndarray:
    n = y.shape[0]
    out = np.empty(n)
    if span >= n:
        for i in range(1, n + 1):
            v = _loess_point(y, n, span, deg, i, 1, n)
            out[i - 1] = y[i - 1] if v is None else v
        return out
    nsh = (span + 1) // 2
    nleft, nright = 1, span
    for i in range(1, n + 1):
        if i > nsh and nright != n:
            nleft += 1
            nright += 1
        v = _loess_point(y, n, span, deg, i, nleft, nright)
        out[i - 1] = y[i - 1] if v is None else v
    return out


def _cycle_subseries_smooth(y, period, ns, deg):
    """Smooth each cycle-subseries and extend it one cycle at each end."""
    n = y.shape[0]
    season = np.empty(n + 2 * period)
    for j in range(period):
        sub = y[j::period]
        k = sub.shape[0]
        smooth = np.empty(k + 2)
        smooth[1 : k + 1] = _loess_smooth(sub, ns, deg)
        v = _loess_point(sub, k, ns, deg, 0, 1, min(ns, k))
        smooth[0] = smooth[1] if v is None else v
        v = _loess_point(sub, k, ns, deg, k + 1, max(1, k - ns + 1), k)
        smooth[k + 1] = smooth[k] if v is None else v
        season[j::period] = smooth
    return season


def _moving_average_valid(x, length):
    return np.convolve(x, np.full(length, 1.0 / length), mode="valid")


def _stl_1d(x, period, seasonal_span, trend_span, lowpass_span, n_inner):
    n = x.shape[0]
    trend = np.zeros(n)
    seasonal = np.zeros(n)
    for _ in range(n_inner):
        c = _cycle_subseries_smooth(x - trend, period, seasonal_span, 1)
        low = _moving_average_valid(
            _moving_average_valid(_moving_average_valid(c, period), period), 3
        )
        low = _loess_smooth(low, lowpass_span, 1)
        seasonal = c[period : period + n] - low
        trend = _loess_smooth(x - seasonal, trend_span, 1)
    return trend, seasonal


@dataclass(frozen=True)
class StlParams:
    seasonal_span: int = 7
    trend_span: int | None = None
    lowpass_span: int | None = None
    n_inner: int = 2

    def resolve(self, period: int) -> tuple[int, int, int]:
        ns = _next_odd(max(3, self.seasonal_span))
        nt = self.trend_span or _next_odd(1.5 * period / (1.0 - 1.5 / ns))
        nl = self.lowpass_span or _next_odd(period)
        return ns, _next_odd(max(3, nt)), _next_odd(max(3, nl))


def decompose_array(
    values: np.ndarray, period: int, mode: str = "classical", stl: StlParams | None = None
) -> Decomposition:
    """Decompose a ``[D, T]`` array (or a single ``[T]`` row) variable by variable."""
    x = np.asarray(values, dtype=np.float64)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    T = x.shape[1]
    if period < 1:
        raise UsageError("period must be a positive integer", "--period")
    if T < 2 * period:
        raise PeriodTooLarge(T, period)
    if mode not in MODES:
        raise UsageError(f"unknown decomposition mode {mode!r}; choose from {MODES}", "--decomp-mode")
    if mode == "classical":
        trend, seasonal = _classical(x, period)
    else:
        stl = stl or StlParams()
        ns, nt, nl = stl.resolve(period)
        trend = np.empty_like(x)
        seasonal = np.empty_like(x)
        for d in range(x.shape[0]):
            trend[d], seasonal[d] = _stl_1d(x[d], period, ns, nt, nl, stl.n_inner)
    residual = x - trend - seasonal
    if squeeze:
        return Decomposition(trend[0], seasonal[0], residual[0], period)
    return Decomposition(trend, seasonal, residual, period)


def decompose(series: MultivariateSeries, period: int, mode: str = "classical", stl: StlParams | None = None) -> Decomposition:
    return decompose_array(series.values, period, mode, stl)


def window_residuals(windows: np.ndarray, period: int, mode: str = "classical") -> np.ndarray:
    """Residuals of each lookback window decomposed on its own, ``[N, D, L]``."""
    windows = np.asarray(windows, dtype=np.float64)
    N, D, L = windows.shape
    return decompose_array(windows.reshape(N * D, L), period, mode).residual.reshape(N, D, L)


def dump_debug_csv(series: MultivariateSeries, dec: Decomposition, out_dir) -> list[Path]:
    """One CSV per variable: ``t, value, trend, seasonal, residual``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for d, name in enumerate(series.names):
        path = out_dir / f"decomposition_{name}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "value", "trend", "seasonal", "residual"])
            for t in range(series.T):
                w.writerow([t, *(repr(float(a[d, t])) for a in (series.values, dec.trend, dec.seasonal, dec.residual))])
        paths.append(path)
    return paths
