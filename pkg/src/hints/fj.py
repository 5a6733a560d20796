"""Friedkin-Johnsen machinery.

Influence weights between variables, the FJ-constrained expected Human
Factor (social influence + self-memory + dynamic bias), reference
DeGroot / FJ simulators, and a planted-dynamics series generator.

Time is 0-based here: the expected factor is defined for ``t = 1 .. T-1``
and uses quantities at ``t - 1``; the dynamic bias at ``t`` averages
residuals over ``[max(0, t - W), t - 1]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DegenerateVariable, ShapeMismatch, UsageError
from .timeseries import MultivariateSeries


@dataclass(frozen=True)
class FjConfig:
    beta: float = 0.4
    delta: float = 0.4
    lam: float = 0.5
    window: int = 24

    def __post_init__(self):
        for name in ("beta", "delta", "lam"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise UsageError(f"{name} must lie in [0, 1], got {v}", f"--{name}")
        if self.beta + self.delta > 1.0 + 1e-12:
            raise UsageError(
                f"beta + delta must be <= 1 (got {self.beta} + {self.delta})", "--beta/--delta"
            )
        if self.window < 1:
            raise UsageError("bias window must be a positive integer", "--bias-window")

    @property
    def bias_coef(self) -> float:
        return max(0.0, 1.0 - self.beta - self.delta)


@dataclass(frozen=True)
class InfluenceMatrix:
    """Row-normalized, zero-diagonal, nonnegative weights ``w[i, j]`` (j -> i)."""

    w: np.ndarray
    zero_rows: tuple[int, ...] = ()

    @property
    def D(self) -> int:
        return self.w.shape[0]

    def to_csv(self, path, names=None) -> None:
        names = list(names or range(self.D))
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([""] + [str(n) for n in names])
            for i, row in enumerate(self.w):
                writer.writerow([str(names[i])] + [repr(float(v)) for v in row])


def build_influence_matrix(residuals: np.ndarray, signed: bool = False) -> InfluenceMatrix:
    """Absolute Pearson correlation between residual rows, zero diagonal, row-normalized.

    With ``signed=True`` the raw correlation is kept and rows are divided by
    the sum of absolute values, so weights may be negative.
    """
    R = np.asarray(residuals, dtype=np.float64)
    if R.ndim != 2:
        raise ShapeMismatch("residuals", "[D, T]", R.shape)
    D, T = R.shape
    if T < 3:
        raise DataError(f"need at least 3 time steps to estimate correlations, got {T}")
    centered = R - R.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("dt,dt->d", centered, centered))
    for d in range(D):
        if norms[d] == 0.0:
            raise DegenerateVariable(d)
    corr = (centered @ centered.T) / np.outer(norms, norms)
    w = corr if signed else np.abs(corr)
    np.fill_diagonal(w, 0.0)
    sums = np.abs(w).sum(axis=1)
    zero_rows = tuple(int(i) for i in np.flatnonzero(sums == 0.0))
    safe = np.where(sums == 0.0, 1.0, sums)
    w = w / safe[:, None]
    w.setflags(write=False)
    return InfluenceMatrix(w, zero_rows)


def rolling_bias(residuals: np.ndarray, window: int, t: int) -> np.ndarray:
    """Mean of ``R[:, max(0, t - W) : t]``; requires ``t >= 1``."""
    if t < 1:
        raise DataError("rolling bias needs t >= 1")
    R = np.asarray(residuals, dtype=np.float64)
    return R[:, max(0, t - window) : t].mean(axis=1)


def rolling_bias_all(residuals: np.ndarray, window: int) -> np.ndarray:
    """Rolling bias for every ``t = 1 .. T-1``, returned as ``[D, T-1]``."""
    R = np.asarray(residuals, dtype=np.float64)
    T = R.shape[-1]
    out = np.empty(R.shape[:-1] + (T - 1,))
    head = min(window, T - 1)
    for t in range(1, head + 1):
        out[..., t - 1] = R[..., :t].mean(axis=-1)
    if T - 1 > window:
        # t = window+1 .. T-1 average R[t-W : t]
        full = np.lib.stride_tricks.sliding_window_view(R[..., : T - 1], window, axis=-1)
        out[..., window:] = full[..., 1:, :].mean(axis=-1)
    return out


@dataclass(frozen=True)
class FjTerms:
    """The three additive parts of the expected Human Factor, each ``[D, T-1]``."""

    social: np.ndarray
    memory: np.ndarray
    bias: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.social + self.memory + self.bias


def _check_pair(R, Hhat):
    R = np.asarray(R, dtype=np.float64)
    Hhat = np.asarray(Hhat, dtype=np.float64)
    if R.shape != Hhat.shape:
        raise ShapeMismatch("extracted factor", R.shape, Hhat.shape)
    if R.ndim != 2:
        raise ShapeMismatch("residuals", "[D, T]", R.shape)
    return R, Hhat


def fj_terms(R, Hhat, w: InfluenceMatrix, cfg: FjConfig) -> FjTerms:
    """Social / self-memory / bias contributions for every ``t = 1 .. T-1``."""
    R, Hhat = _check_pair(R, Hhat)
    if w.w.shape != (R.shape[0], R.shape[0]):
        raise ShapeMismatch("influence matrix", (R.shape[0],) * 2, w.w.shape)
    blend = cfg.lam * R[:, :-1] + (1.0 - cfg.lam) * Hhat[:, :-1]
    social = cfg.beta * (w.w @ blend)
    memory = cfg.delta * blend
    bias = cfg.bias_coef * rolling_bias_all(R, cfg.window)
    return FjTerms(social, memory, bias)


def expected_trajectory(R, Hhat, w: InfluenceMatrix, cfg: FjConfig) -> np.ndarray:
    """Expected Human Factor ``H[:, t]`` for ``t = 1 .. T-1`` as ``[D, T-1]``."""
    return fj_terms(R, Hhat, w, cfg).total


def expected_human_factor(R, Hhat, w: InfluenceMatrix, cfg: FjConfig, t: int) -> np.ndarray:
    """Expected Human Factor at a single time ``t`` (``1 <= t <= T-1``)."""
    R, Hhat = _check_pair(R, Hhat)
    if not 1 <= t < R.shape[1]:
        raise DataError(f"t must lie in [1, {R.shape[1] - 1}], got {t}")
    blend = cfg.lam * R[:, t - 1] + (1.0 - cfg.lam) * Hhat[:, t - 1]
    return (
        cfg.beta * (w.w @ blend)
        + cfg.delta * blend
        + cfg.bias_coef * rolling_bias(R, cfg.window, t)
    )


# --- reference simulators ------------------------------------------------------


@dataclass(frozen=True)
class OpinionState:
    z: np.ndarray
    s: np.ndarray
    lam: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        z, s, lam, w = (np.asarray(a, dtype=np.float64) for a in (self.z, self.s, self.lam, self.w))
        N = z.shape[0]
        if s.shape != (N,) or lam.shape != (N,) or w.shape != (N, N):
            raise ShapeMismatch("opinion state", f"z,s,lam [{N}], w [{N},{N}]", (s.shape, lam.shape, w.shape))
        if np.any(lam < 0) or np.any(lam > 1):
            raise DataError("susceptibilities must lie in [0, 1]")
        if np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-9):
            raise DataError("influence matrix rows must sum to 1")
        for name, a in zip(("z", "s", "lam", "w"), (z, s, lam, w)):
            object.__setattr__(self, name, a)


def simulate_fj(state: OpinionState, steps: int) -> np.ndarray:
    """Iterate ``z <- lam * (W z) + (1 - lam) * s``; returns ``z(1) .. z(steps)`` as ``[N, steps]``."""
    z = state.z.copy()
    anchor = (1.0 - state.lam) * state.s
    out = np.empty((z.shape[0], steps))
    for k in range(steps):
        z = state.lam * (state.w @ z) + anchor
        out[:, k] = z
    return out


def simulate_degroot(z0, w, steps: int) -> np.ndarray:
    z = np.asarray(z0, dtype=np.float64).copy()
    w = np.asarray(w, dtype=np.float64)
    if np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-9):
        raise DataError("influence matrix rows must sum to 1")
    out = np.empty((z.shape[0], steps))
    for k in range(steps):
        z = w @ z
        out[:, k] = z
    return out


def fj_fixed_point(state: OpinionState) -> np.ndarray:
    """Closed-form limit ``(I - Lam W)^-1 (I - Lam) s``."""
    N = state.z.shape[0]
    lam = np.diag(state.lam)
    return np.linalg.solve(np.eye(N) - lam @ state.w, (np.eye(N) - lam) @ state.s)


# --- planted-dynamics generator ------------------------------------------------


@dataclass(frozen=True)
class PlantedConfig:
    """Synthetic series: linear trend + sine seasonality + FJ-driven latent + white noise.

    The latent is a population of D opinions following the FJ update with a
    random row-stochastic influence matrix, self-weight ``delta / (beta +
    delta)`` and susceptibility ``beta + delta``. Intrinsic opinions
    ``s(t)`` are an AR(1) shock process with persistence ``shock_persistence``;
    ``lam`` blends the current shock into the intrinsic opinion.
    """

    fj: FjConfig = FjConfig(beta=0.5, delta=0.3, lam=0.5, window=24)
    latent_scale: float = 1.0
    shock_persistence: float = 0.6
    noise_scale: float = 0.1
    trend_slope: float = 0.002
    seasonal_amp: float = 1.0
    period: int = 24


def _random_influence(rng: np.random.Generator, D: int) -> np.ndarray:
    if D == 1:
        return np.zeros((1, 1))
    w = rng.uniform(0.0, 1.0, size=(D, D)) ** 2
    np.fill_diagonal(w, 0.0)
    return w / w.sum(axis=1, keepdims=True)


def planted_latent(cfg: PlantedConfig, D: int, T: int, rng: np.random.Generator):
    fj = cfg.fj
    w_social = _random_influence(rng, D)
    burn = 200
    z = np.zeros(D)
    s = np.zeros(D)
    out = np.empty((D, T))
    for k in range(T + burn):
        shock = rng.standard_normal(D)
        s = cfg.shock_persistence * s + fj.lam * shock
        z = fj.beta * (w_social @ z) + fj.delta * z + fj.bias_coef * s
        if k >= burn:
            out[:, k - burn] = z
    out /= out.std(axis=1, keepdims=True)
    return cfg.latent_scale * out, w_social


def generate_planted_series(cfg: PlantedConfig, D: int, T: int, seed: int):
    """Return ``(series, latent)``; deterministic for a given seed.

    ``latent`` is the ground-truth FJ-driven component [D, T] added to the
    series before the white observation noise.
    """
    rng = np.random.default_rng(seed)
    latent, _ = planted_latent(cfg, D, T, rng)
    t = np.arange(T)
    offsets = rng.uniform(0.0, 2.0 * np.pi, size=D)
    slopes = cfg.trend_slope * rng.uniform(0.5, 1.5, size=D)
    trend = slopes[:, None] * t
    seasonal = cfg.seasonal_amp * np.sin(2.0 * np.pi * t[None, :] / cfg.period + offsets[:, None])
    noise = cfg.noise_scale * rng.standard_normal((D, T))
    values = trend + seasonal + latent + noise
    names = tuple(f"x{d}" for d in range(D))
    return MultivariateSeries(values, names), latent
