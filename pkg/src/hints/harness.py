"""Experiment harness: single runs, paired comparisons, ablations, gamma sweeps.

A run is fully described by a :class:`RunConfig`; its config hash keys the
record store. Records are appended as JSON lines with a fixed field order:

    dataset, horizon, variant, seed, config_hash, mse, mae, raw_mse, raw_mae,
    extras, config

``mse``/``mae`` are on the z-normalized scale (train statistics); ``raw_*``
are in the data's own units.
"""

from __future__ import annotations

import csv
import json
import logging
import threading
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .decomposition import decompose_array
from .errors import EmptyTestSet, UnknownVariable, UsageError
from .extractor import ExtractorModel, Stage1Result, train_stage1
from .fj import PlantedConfig, build_influence_matrix, generate_planted_series
from .forecaster import (
    ForecastModel,
    Stage2Result,
    WindowSet,
    attention_map,
    evaluate,
    factor_windows,
    train_stage2,
)
from .timeseries import MultivariateSeries, Normalizer, fit_normalizer, load_csv, split_window_starts, window_arrays

logger = logging.getLogger(__name__)

ABLATIONS = ("hints", "no_social", "no_memory_bias", "no_fj_loss")
RECORD_FIELDS = ("dataset", "horizon", "variant", "seed", "config_hash", "mse", "mae", "raw_mse", "raw_mae", "extras", "config")


# --- data ---------------------------------------------------------------------------


def parse_planted_source(spec: str) -> dict:
    """``planted:D=5,T=2000,seed=3`` -> keyword arguments for the generator."""
    opts = {"D": 5, "T": 2000, "seed": 0}
    body = spec.split(":", 1)[1]
    for part in filter(None, (p.strip() for p in body.split(","))):
        key, _, value = part.partition("=")
        if key not in opts:
            raise UsageError(f"unknown planted option {key!r} (use D, T, seed)", "--data")
        try:
            opts[key] = int(value)
        except ValueError:
            raise UsageError(f"planted option {key} needs an integer, got {value!r}", "--data") from None
    return opts


def load_series(cfg: RunConfig) -> MultivariateSeries:
    if not cfg.data:
        raise UsageError("no dataset given", "--data")
    if cfg.data.startswith("planted:"):
        opts = parse_planted_source(cfg.data)
        return generate_planted_series(PlantedConfig(), opts["D"], opts["T"], opts["seed"])[0]
    return load_csv(cfg.data, cfg.column_list(), cfg.timestamp_col or None, cfg.delimiter)


def dataset_id(cfg: RunConfig) -> str:
    if cfg.data.startswith("planted:"):
        o = parse_planted_source(cfg.data)
        return f"planted-D{o['D']}-T{o['T']}-s{o['seed']}"
    return Path(cfg.data).stem or "data"


@dataclass(frozen=True)
class Prepared:
    """Normalized series plus the split's window sets and training residuals."""

    values: np.ndarray
    normalizer: Normalizer
    train: WindowSet
    val: WindowSet
    test: WindowSet
    train_residuals: np.ndarray


def prepare(series: MultivariateSeries, cfg: RunConfig) -> Prepared:
    split = cfg.split()
    tr, _, _ = split.ranges(series.T)
    norm = fit_normalizer(series, tr)
    values = norm.transform(series.values)
    starts = split_window_starts(series.T, cfg.lookback, cfg.horizon, split)
    sets = []
    for s in starts:
        X, Y = window_arrays(values, s, cfg.lookback, cfg.horizon)
        sets.append(WindowSet(X, Y, s))
    R = decompose_array(values[:, tr.start : tr.stop], cfg.period, cfg.decomp_mode).residual
    return Prepared(values, norm, sets[0], sets[1], sets[2], R)


# --- variants -----------------------------------------------------------------------


def variant_config(cfg: RunConfig) -> RunConfig:
    """Apply an ablation's coefficient change, keeping the coefficients convex.

    ``no_social`` drops beta and rescales delta and the bias coefficient by
    ``1 / (1 - beta)``; ``no_memory_bias`` moves all mass onto beta.
    """
    if cfg.variant == "no_social":
        if cfg.beta >= 1.0:
            raise UsageError("no_social needs beta < 1: nothing remains after removing the social term", "--beta")
        return cfg.replace(beta=0.0, delta=cfg.delta / (1.0 - cfg.beta))
    if cfg.variant == "no_memory_bias":
        return cfg.replace(beta=1.0, delta=0.0)
    return cfg


_STAGE1_CACHE: dict = {}


def fit_stage1(prep: Prepared, cfg: RunConfig) -> Stage1Result:
    """Stage 1 on the training residuals, memoized per process.

    Stage 1 does not depend on Stage-2 settings, so a gamma sweep or a paired
    comparison reuses one extractor per seed.
    """
    cfg = variant_config(cfg)
    key = (prep.train_residuals.tobytes(), cfg.stage1_config(), cfg.signed_influence)
    if key not in _STAGE1_CACHE:
        w = build_influence_matrix(prep.train_residuals, signed=cfg.signed_influence)
        if len(_STAGE1_CACHE) >= 16:
            _STAGE1_CACHE.pop(next(iter(_STAGE1_CACHE)))
        _STAGE1_CACHE[key] = train_stage1(prep.train_residuals, cfg.stage1_config(), influence=w)
    return _STAGE1_CACHE[key]


@dataclass
class RunOutput:
    record: "ExperimentRecord"
    model: ForecastModel
    extractor: ExtractorModel | None
    stage1: Stage1Result | None
    stage2: Stage2Result
    prepared: Prepared


def train_variant(prep: Prepared, cfg: RunConfig):
    """Stage 1 (when the variant needs it) and Stage 2; returns (stage1, extractor, stage2)."""
    s2 = cfg.stage2_config()
    if cfg.variant == "baseline":
        return None, None, train_stage2(prep.train, prep.val, s2)
    if cfg.variant == "no_fj_loss":
        return None, None, train_stage2(prep.train, prep.val, s2, raw_residual_factor=True)
    st1 = fit_stage1(prep, cfg)
    st2 = train_stage2(prep.train, prep.val, s2, extractor=st1.model)
    return st1, st2.extractor, st2


def eval_factors(prep: Prepared, cfg: RunConfig, extractor: ExtractorModel | None):
    if cfg.variant == "baseline":
        return None
    return factor_windows(prep.test.inputs, extractor, cfg.period, cfg.decomp_mode)


# --- records ------------------------------------------------------------------------


@dataclass
class ExperimentRecord:
    dataset: str
    horizon: int
    variant: str
    seed: int
    config_hash: str
    mse: float
    mae: float
    raw_mse: float | None = None
    raw_mae: float | None = None
    extras: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    wall_time: float | None = None

    def to_json(self, with_timing: bool = False) -> str:
        d = {k: getattr(self, k) for k in RECORD_FIELDS}
        if with_timing:
            d["wall_time"] = self.wall_time
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "ExperimentRecord":
        d = json.loads(line)
        return cls(**{k: d.get(k) for k in RECORD_FIELDS}, wall_time=d.get("wall_time"))

    def run_config(self) -> RunConfig:
        return RunConfig(**self.config)


def run_experiment(series: MultivariateSeries, cfg: RunConfig, dataset: str | None = None) -> RunOutput:
    """Normalize, decompose, Stage 1, Stage 2, test metrics."""
    t0 = time.perf_counter()
    prep = prepare(series, cfg)
    if len(prep.test) == 0:
        raise EmptyTestSet()
    st1, extractor, st2 = train_variant(prep, cfg)
    m = evaluate(st2.model, prep.test, eval_factors(prep, cfg, extractor), prep.normalizer)
    extras = {"best_epoch": st2.best_epoch, "best_val_mse": st2.best_val, "epochs_run": len(st2.train_curve)}
    if st1 is not None:
        extras.update(stage1_initial_loss=st1.initial_loss, stage1_final_loss=st1.final_loss)
    rec = ExperimentRecord(
        dataset=dataset or dataset_id(cfg),
        horizon=cfg.horizon,
        variant=cfg.variant,
        seed=cfg.seed,
        config_hash=cfg.config_hash(),
        mse=m["mse"],
        mae=m["mae"],
        raw_mse=m.get("raw_mse"),
        raw_mae=m.get("raw_mae"),
        extras=extras,
        config=cfg.as_dict(hashed_only=True),
        wall_time=time.perf_counter() - t0,
    )
    logger.info("%s h=%d %s seed=%d mse=%.6f mae=%.6f", rec.dataset, rec.horizon, rec.variant, rec.seed, rec.mse, rec.mae)
    return RunOutput(rec, st2.model, extractor, st1, st2, prep)


class RecordStore:
    """Append-only JSON-lines file; one writer at a time under a lock."""

    def __init__(self, path, record_timing: bool = False):
        self.path = Path(path)
        self.record_timing = record_timing
        self._lock = threading.Lock()

    def records(self) -> list[ExperimentRecord]:
        if not self.path.exists():
            return []
        with self.path.open() as fh:
            return [ExperimentRecord.from_json(line) for line in fh if line.strip()]

    def find(self, config_hash: str) -> ExperimentRecord | None:
        for r in self.records():
            if r.config_hash == config_hash:
                return r
        return None

    def append(self, rec: ExperimentRecord) -> None:
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a") as fh:
                fh.write(rec.to_json(self.record_timing) + "\n")


def _run_task(args):
    series, cfg, dataset = args
    return run_experiment(series, cfg, dataset).record


def run_many(series, configs: list[RunConfig], store: RecordStore | None = None, jobs: int = 1,
             force: bool = False, dataset: str | None = None) -> list[ExperimentRecord]:
    """Run each config once, reusing stored records with the same hash unless ``force``.

    Results are persisted as each run finishes, so a failure keeps earlier
    records. Output order follows ``configs``.
    """
    out: list[ExperimentRecord | None] = [None] * len(configs)
    todo = []
    seen = {}
    for i, cfg in enumerate(configs):
        h = cfg.config_hash()
        prior = store.find(h) if (store is not None and not force) else None
        if prior is not None:
            logger.info("skipping %s: record with config hash %s exists", cfg.variant, h)
            out[i] = prior
        elif h in seen:
            todo.append((i, seen[h]))
        else:
            seen[h] = i
            todo.append((i, None))

    def finish(i, rec):
        out[i] = rec
        if store is not None:
            store.append(rec)

    fresh = [i for i, dup in todo if dup is None]
    if jobs > 1 and len(fresh) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(i, pool.submit(_run_task, (series, configs[i], dataset))) for i in fresh]
            for i, fut in futures:
                finish(i, fut.result())
    else:
        for i in fresh:
            finish(i, run_experiment(series, configs[i], dataset).record)
    for i, dup in todo:
        if dup is not None:
            out[i] = out[dup]
    return out  # type: ignore[return-value]


def rerun_from_hash(store: RecordStore, config_hash: str, series: MultivariateSeries | None = None):
    """Re-run a stored record from its config; returns ``(stored, fresh)``."""
    stored = store.find(config_hash)
    if stored is None:
        raise UsageError(f"no record with config hash {config_hash} in {store.path}", "--hash")
    cfg = stored.run_config()
    if cfg.config_hash() != config_hash:
        raise UsageError(f"stored config does not hash to {config_hash}")
    series = series if series is not None else load_series(cfg)
    return stored, run_experiment(series, cfg, stored.dataset).record


# --- comparison ---------------------------------------------------------------------


def improvement_avg(baseline: list[float], hints: list[float]) -> float:
    """Percent improvement of horizon-averaged metrics: ``100 * (mean(b) - mean(h)) / mean(b)``."""
    b, h = float(np.mean(baseline)), float(np.mean(hints))
    return 100.0 * (b - h) / b


def improvement(baseline: float, hints: float) -> float:
    return 100.0 * (baseline - hints) / baseline


@dataclass
class ComparisonTable:
    horizons: list[int]
    baseline: dict  # metric -> per-horizon seed means
    hints: dict
    records: list[ExperimentRecord]

    def imp_avg(self, metric: str) -> float:
        return improvement_avg(self.baseline[metric], self.hints[metric])

    def render(self) -> str:
        lines = [f"{'h':>6} {'metric':>6} {'baseline':>10} {'hints':>10} {'imp %':>8}"]
        for metric in ("mse", "mae"):
            for k, h in enumerate(self.horizons):
                b, v = self.baseline[metric][k], self.hints[metric][k]
                lines.append(f"{h:>6} {metric:>6} {b:>10.4f} {v:>10.4f} {improvement(b, v):>8.2f}")
            lines.append(f"{'avg':>6} {metric:>6} {np.mean(self.baseline[metric]):>10.4f} "
                         f"{np.mean(self.hints[metric]):>10.4f} {self.imp_avg(metric):>8.2f}")
        return "\n".join(lines)


def _seed_mean(records, metric):
    return float(np.mean([getattr(r, metric) for r in records]))


def run_comparison(series, cfg: RunConfig, horizons, seeds, store=None, jobs=1, force=False, dataset=None) -> ComparisonTable:
    configs = []
    for h in horizons:
        for s in seeds:
            configs.append(cfg.replace(horizon=h, seed=s, variant="baseline"))
            configs.append(cfg.replace(horizon=h, seed=s, variant="hints"))
    recs = run_many(series, configs, store, jobs, force, dataset)
    base = {"mse": [], "mae": []}
    hint = {"mse": [], "mae": []}
    for h in horizons:
        for metric in ("mse", "mae"):
            base[metric].append(_seed_mean([r for r in recs if r.horizon == h and r.variant == "baseline"], metric))
            hint[metric].append(_seed_mean([r for r in recs if r.horizon == h and r.variant == "hints"], metric))
    return ComparisonTable(list(horizons), base, hint, recs)


# --- ablation -----------------------------------------------------------------------


@dataclass
class AblationTable:
    variants: tuple[str, ...]
    mse: dict
    mae: dict
    per_seed_mse: dict
    records: list[ExperimentRecord]

    @property
    def full_is_best(self) -> bool:
        return all(self.mse["hints"] <= self.mse[v] for v in self.variants if v != "hints")

    def render(self) -> str:
        lines = [f"{'variant':>16} {'mse':>10} {'mae':>10}"]
        for v in self.variants:
            lines.append(f"{v:>16} {self.mse[v]:>10.6f} {self.mae[v]:>10.6f}")
        lines.append(f"ordering check (full <= every ablation on MSE): {'holds' if self.full_is_best else 'violated'}")
        return "\n".join(lines)


def run_ablation(series, cfg: RunConfig, seeds, store=None, jobs=1, force=False, dataset=None) -> AblationTable:
    configs = [cfg.replace(variant=v, seed=s) for v in ABLATIONS for s in seeds]
    recs = run_many(series, configs, store, jobs, force, dataset)
    mse, mae, per = {}, {}, {}
    for v in ABLATIONS:
        rs = [r for r in recs if r.variant == v]
        per[v] = [r.mse for r in rs]
        mse[v], mae[v] = _seed_mean(rs, "mse"), _seed_mean(rs, "mae")
    return AblationTable(ABLATIONS, mse, mae, per, recs)


# --- gamma sweep --------------------------------------------------------------------


@dataclass
class SweepResult:
    grid: list[float]
    per_seed: dict  # gamma -> list of (mse, mae) in seed order
    records: list[ExperimentRecord]

    def curve(self) -> list[dict]:
        rows = []
        for g in self.grid:
            a = np.asarray(self.per_seed[g])
            rows.append({"gamma": g, "mse_mean": a[:, 0].mean(), "mse_std": a[:, 0].std(),
                         "mae_mean": a[:, 1].mean(), "mae_std": a[:, 1].std(), "n_seeds": len(a)})
        return rows

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["gamma", "mse_mean", "mse_std", "mae_mean", "mae_std", "n_seeds"])
            for r in self.curve():
                w.writerow([repr(r["gamma"]), repr(float(r["mse_mean"])), repr(float(r["mse_std"])),
                            repr(float(r["mae_mean"])), repr(float(r["mae_std"])), r["n_seeds"]])
        return path


def parse_grid(text: str) -> list[float]:
    try:
        grid = [float(g) for g in text.split(",") if g.strip()]
    except ValueError:
        raise UsageError(f"cannot parse gamma grid {text!r}", "--gamma") from None
    if not grid or any(not 0.0 <= g <= 1.0 for g in grid):
        raise UsageError("gamma grid values must lie in [0, 1]", "--gamma")
    return grid


def run_gamma_sweep(series, cfg: RunConfig, grid, seeds, store=None, jobs=1, force=False, dataset=None) -> SweepResult:
    # seed-major so each seed's Stage 1 is trained once
    configs = [cfg.replace(variant="hints", gamma=float(g), seed=s) for s in seeds for g in grid]
    recs = run_many(series, configs, store, jobs, force, dataset)
    per = {float(g): [] for g in grid}
    for c, r in zip(configs, recs):
        per[c.gamma].append((r.mse, r.mae))
    return SweepResult([float(g) for g in grid], per, recs)


def plot_data_name(dataset: str, experiment: str, horizon: int) -> str:
    return f"{dataset}_{experiment}_{horizon}.csv"


# --- human factor trace -------------------------------------------------------------


def export_human_factor_trace(series: MultivariateSeries, cfg: RunConfig, model: ForecastModel,
                              extractor: ExtractorModel | None, variable: str, start: int, stop: int, path=None):
    """Per-step ``(t, value, hhat, attention, window)`` over ``[start, stop)``.

    The range is cut into consecutive lookback-length chunks; each chunk is
    decomposed, passed through the extractor and the attention block exactly
    as a Stage-2 input window would be. The length must be a multiple of the
    lookback so every chunk is a full window.
    """
    if variable not in series.names:
        raise UnknownVariable(variable, series.names)
    if not model.use_attention:
        raise UsageError("the forecaster has no attention block (baseline variant)")
    L = model.L
    if not 0 <= start < stop <= series.T:
        raise UsageError(f"trace range [{start}, {stop}) outside [0, {series.T})", "--start/--stop")
    if (stop - start) % L:
        raise UsageError(f"trace length {stop - start} must be a multiple of the lookback {L}", "--start/--stop")
    d = series.names.index(variable)
    tr, _, _ = cfg.split().ranges(series.T)
    values = fit_normalizer(series, tr).transform(series.values)
    starts = np.arange(start, stop, L)
    X = np.stack([values[:, s : s + L] for s in starts])
    H = factor_windows(X, extractor, cfg.period, cfg.decomp_mode)
    A = attention_map(H, model.attention)
    rows = []
    for k, s in enumerate(starts):
        for j in range(L):
            rows.append((int(s + j), float(series.values[d, s + j]), float(H[k, d, j]), float(A[k, d, j]), k))
    if path is not None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "value", "hhat", "attention", "window"])
            for t, v, hh, a, k in rows:
                w.writerow([t, repr(v), repr(hh), repr(a), k])
    return rows

