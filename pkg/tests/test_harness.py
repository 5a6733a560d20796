from __future__ import annotations

import csv

import numpy as np
import pytest

from hints.config import RunConfig
from hints.errors import UnknownVariable, UsageError
from hints.extractor import extract
from hints.fj import fj_terms
from hints.forecaster import attention_map
from hints.decomposition import decompose_array
from hints.harness import (
    RecordStore,
    export_human_factor_trace,
    fit_stage1,
    improvement,
    improvement_avg,
    load_series,
    parse_grid,
    plot_data_name,
    prepare,
    rerun_from_hash,
    run_experiment,
    run_gamma_sweep,
    run_many,
    variant_config,
)


def small(**kw) -> RunConfig:
    base = dict(data="planted:D=3,T=600,seed=4", period=12, lookback=48, horizon=12, ma_kernel=5,
                stage1_epochs=20, stage2_epochs=2, bias_window=12)
    base.update(kw)
    return RunConfig(**base).validate()


@pytest.fixture(scope="module")
def series():
    return load_series(small())


def test_improvement_arithmetic():
    dl_mse, hi_mse = [0.081, 0.157, 0.305, 0.643], [0.077, 0.150, 0.258, 0.550]
    dl_mae, hi_mae = [0.203, 0.293, 0.414, 0.601], [0.198, 0.284, 0.380, 0.579]
    assert abs(improvement_avg(dl_mse, hi_mse) - 12.7) <= 0.1
    assert abs(improvement_avg(dl_mae, hi_mae) - 4.63) <= 0.1
    assert improvement(2.0, 1.5) == 25.0


def test_variant_coefficients():
    cfg = small(beta=0.4, delta=0.3)
    ns = variant_config(cfg.replace(variant="no_social"))
    assert ns.beta == 0.0 and abs(ns.delta - 0.5) < 1e-15
    assert abs(ns.fj_config().bias_coef - 0.5) < 1e-15
    nm = variant_config(cfg.replace(variant="no_memory_bias"))
    assert (nm.beta, nm.delta) == (1.0, 0.0)
    assert variant_config(cfg) is cfg


def test_no_social_has_zero_social_term(series):
    cfg = small(variant="no_social")
    prep = prepare(series, cfg)
    st1 = fit_stage1(prep, cfg)
    R = prep.train_residuals
    terms = fj_terms(R, extract(st1.model, R), st1.influence, variant_config(cfg).fj_config())
    assert np.all(terms.social == 0)


def test_gamma_zero_record_matches_baseline(series):
    a = run_experiment(series, small(variant="baseline")).record
    b = run_experiment(series, small(gamma=0.0)).record
    assert a.mse == b.mse and a.mae == b.mae


def test_duplicate_configs_are_skipped(tmp_path, series, caplog):
    store = RecordStore(tmp_path / "records.jsonl")
    cfg = small(variant="baseline")
    first = run_many(series, [cfg], store)
    with caplog.at_level("INFO"):
        again = run_many(series, [cfg], store)
    assert "skipping" in caplog.text
    assert len(store.records()) == 1 and again[0].to_json() == first[0].to_json()
    run_many(series, [cfg], store, force=True)
    assert len(store.records()) == 2


def test_rerun_reproduces(tmp_path, series):
    store = RecordStore(tmp_path / "records.jsonl")
    (rec,) = run_many(series, [small(seed=1)], store)
    stored, fresh = rerun_from_hash(store, rec.config_hash, series)
    assert abs(stored.mse - fresh.mse) <= 1e-12 and abs(stored.mae - fresh.mae) <= 1e-12
    with pytest.raises(UsageError):
        rerun_from_hash(store, "0" * 16, series)


def test_records_exclude_output_location(series):
    a = run_experiment(series, small(variant="baseline", out_dir="x")).record
    b = run_experiment(series, small(variant="baseline", out_dir="y")).record
    assert a.to_json() == b.to_json()


def test_sweep_shape_and_csv(tmp_path, series):
    grid = parse_grid("0.1,0.3,0.5,0.9,1.0")
    res = run_gamma_sweep(series, small(), grid, seeds=[0])
    assert [r["gamma"] for r in res.curve()] == grid
    name = plot_data_name("planted", "sweep", 12)
    assert name == "planted_sweep_12.csv"
    with res.write_csv(tmp_path / name).open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["gamma", "mse_mean", "mse_std", "mae_mean", "mae_std", "n_seeds"]
    assert len(rows) == 6
    with pytest.raises(UsageError):
        parse_grid("0.1,1.5")


def test_trace_consistency(tmp_path, series):
    cfg = small()
    out = run_experiment(series, cfg)
    start, stop = 96, 96 + 2 * cfg.lookback
    rows = export_human_factor_trace(series, cfg, out.model, out.extractor, "x1", start, stop, tmp_path / "t.csv")
    assert len(rows) == stop - start
    att = np.array([r[3] for r in rows]).reshape(2, cfg.lookback)
    np.testing.assert_allclose(att.sum(axis=1), 1.0, atol=1e-12)
    # recompute the factor of the first chunk from scratch
    vals = out.prepared.normalizer.transform(series.values)[:, start : start + cfg.lookback]
    R = decompose_array(vals, cfg.period, cfg.decomp_mode).residual
    H = extract(out.extractor, R)
    hh = np.array([r[2] for r in rows[: cfg.lookback]])
    assert np.abs(hh - H[1]).max() <= 1e-12
    A = attention_map(H[None], out.model.attention)[0, 1]
    assert np.abs(att[0] - A).max() <= 1e-12
    with pytest.raises(UnknownVariable):
        export_human_factor_trace(series, cfg, out.model, out.extractor, "nope", start, stop)
    with pytest.raises(UsageError):
        export_human_factor_trace(series, cfg, out.model, out.extractor, "x1", start, stop - 1)
