"""``hints`` command line.

Every subcommand accepts the run-configuration flags (``--gamma``,
``--lookback``, ...) plus ``--config FILE`` and ``--print-config``. Flags
override the file, the file overrides defaults. Artifacts go to
``--out-dir`` (env ``HINTS_OUT_DIR``).

Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import harness, selftest
from .config import RunConfig, coerce, resolve
from .decomposition import decompose, dump_debug_csv
from .errors import DataError, HintsError, NumericalError, UsageError
from .extractor import freeze_and_save, load_frozen
from .fj import PlantedConfig, generate_planted_series
from .forecaster import dump_predictions, load_bundle, save_bundle
from .timeseries import save_csv, split_window_starts

logger = logging.getLogger("hints")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser, skip=()) -> None:
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", help="key = value config file")
    g.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    for f in fields(RunConfig):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        g.add_argument(flag, dest="cfg_" + f.name, default=None, metavar=type(f.default).__name__.upper(),
                       help=f"{f.metadata['help']} (default: {f.default!r})")


def _subcommands():
    return {
        "ingest": ("load and validate a CSV; print a summary", _cmd_ingest),
        "decompose": ("write per-variable trend/seasonal/residual CSVs", _cmd_decompose),
        "stage1": ("train the Human Factor extractor; write loss curve, checkpoint, influence matrix", _cmd_stage1),
        "stage2": ("train the forecaster on top of a frozen extractor", _cmd_stage2),
        "evaluate": ("test metrics and predictions for a trained forecaster", _cmd_evaluate),
        "compare": ("paired baseline vs HINTS runs over horizons and seeds", _cmd_compare),
        "ablate": ("component ablation table", _cmd_ablate),
        "sweep": ("modulation-strength sweep", _cmd_sweep),
        "trace": ("export Human Factor and attention for one variable", _cmd_trace),
        "synth": ("write a planted-dynamics CSV", _cmd_synth),
        "rerun": ("re-run a stored record from its config hash and compare metrics", _cmd_rerun),
        "selftest": ("run the embedded oracle checks", _cmd_selftest),
    }


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hints", description="Human Factor extraction and attention-modulated DLinear forecasting.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (help_text, fn) in _subcommands().items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=fn)
        p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
        # for sweep, --gamma takes the grid instead of a single value
        _add_config_flags(p, skip=("gamma",) if name == "sweep" else ())
        if name in ("compare", "ablate", "sweep"):
            p.add_argument("--seeds", default="0", help="comma-separated seeds (default: 0)")
            p.add_argument("--force", action="store_true", help="re-run even when a record with the same hash exists")
            p.add_argument("--record-timing", action="store_true", help="store wall time in records")
        if name == "compare":
            p.add_argument("--horizons", default="96,192", help="comma-separated horizons (default: 96,192)")
        if name == "sweep":
            p.add_argument("--gamma", dest="gamma_grid", default="0.1,0.3,0.5,0.9,1.0",
                           help="comma-separated gamma grid (default: 0.1,0.3,0.5,0.9,1.0)")
        if name in ("stage2", "evaluate", "trace"):
            p.add_argument("--extractor", help="extractor checkpoint (default: <out-dir>/extractor.ckpt)")
        if name in ("evaluate", "trace"):
            p.add_argument("--model", help="forecaster checkpoint (default: <out-dir>/forecaster.ckpt)")
        if name == "trace":
            p.add_argument("--variable", required=True)
            p.add_argument("--start", type=int, required=True)
            p.add_argument("--stop", type=int, required=True)
        if name == "synth":
            p.add_argument("--out", required=True, help="output CSV path")
            p.add_argument("--n-vars", type=int, default=5)
            p.add_argument("--length", type=int, default=2000)
        if name == "rerun":
            p.add_argument("--hash", required=True, dest="config_hash")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {}
    for f in fields(RunConfig):
        raw = getattr(args, "cfg_" + f.name, None)
        if raw is not None:
            overrides[f.name] = coerce(f.name, raw)
    cfg, _ = resolve(args.config, overrides)
    return cfg


def _ints(text: str, flag: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}", flag) from None


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- subcommands --------------------------------------------------------------------


def _cmd_ingest(args, cfg):
    series = harness.load_series(cfg)
    tr, va, te = cfg.split().ranges(series.T)
    starts = split_window_starts(series.T, cfg.lookback, cfg.horizon, cfg.split())
    summary = {
        "dataset": harness.dataset_id(cfg),
        "variables": list(series.names),
        "T": series.T,
        "splits": {"train": [tr.start, tr.stop], "val": [va.start, va.stop], "test": [te.start, te.stop]},
        "windows": {"train": len(starts[0]), "val": len(starts[1]), "test": len(starts[2])},
    }
    _write_json(_out(cfg) / "ingest.json", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))


def _cmd_decompose(args, cfg):
    series = harness.load_series(cfg)
    dec = decompose(series, cfg.period, cfg.decomp_mode)
    for p in dump_debug_csv(series, dec, _out(cfg)):
        print(p)


def _cmd_stage1(args, cfg):
    series = harness.load_series(cfg)
    prep = harness.prepare(series, cfg)
    res = harness.fit_stage1(prep, cfg)
    out = _out(cfg)
    with (out / "stage1_loss.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for k, loss in enumerate(res.losses):
            w.writerow([k, repr(loss)])
    digest = freeze_and_save(res.model, out / "extractor.ckpt")
    res.influence.to_csv(out / "influence.csv", series.names)
    if res.influence.zero_rows:
        logger.warning("influence rows with no correlation mass: %s", res.influence.zero_rows)
    print(f"stage 1: loss {res.initial_loss:.6g} -> {res.final_loss:.6g}; extractor digest {digest[:16]}")


def _extractor_path(args, cfg, trained=False) -> Path:
    """Explicit --extractor, else the Stage-1 checkpoint (or, after joint training, the updated copy)."""
    if args.extractor:
        return Path(args.extractor)
    name = "extractor_joint.ckpt" if (trained and cfg.joint) else "extractor.ckpt"
    return Path(cfg.out_dir) / name


def _cmd_stage2(args, cfg):
    from .forecaster import train_stage2

    series = harness.load_series(cfg)
    prep = harness.prepare(series, cfg)
    s2 = cfg.stage2_config()
    extractor = None
    if cfg.variant == "baseline":
        res = train_stage2(prep.train, prep.val, s2)
    elif cfg.variant == "no_fj_loss":
        res = train_stage2(prep.train, prep.val, s2, raw_residual_factor=True)
    else:
        extractor = load_frozen(_extractor_path(args, cfg), series.D)
        res = train_stage2(prep.train, prep.val, s2, extractor=extractor)
    out = _out(cfg)
    if cfg.joint and res.extractor is not None:
        extractor = res.extractor
        freeze_and_save(extractor, out / "extractor_joint.ckpt")
    save_bundle(out / "forecaster.ckpt", res.model, extractor.digest() if extractor else None)
    with (out / "stage2_curve.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_mse", "val_mse"])
        for k, tr in enumerate(res.train_curve):
            w.writerow([k, repr(tr), repr(res.val_curve[k]) if k < len(res.val_curve) else ""])
    print(f"stage 2: best epoch {res.best_epoch}, val mse {res.best_val:.6g}")


def _load_trained(args, cfg, n_vars):
    model, ext_digest = load_bundle(Path(args.model) if args.model else Path(cfg.out_dir) / "forecaster.ckpt")
    extractor = None
    if ext_digest is not None:
        extractor = load_frozen(_extractor_path(args, cfg, trained=True), n_vars)
        if extractor.digest() != ext_digest:
            raise DataError("extractor checkpoint does not match the one the forecaster was trained with")
    return model, extractor


def _cmd_evaluate(args, cfg):
    series = harness.load_series(cfg)
    prep = harness.prepare(series, cfg)
    model, extractor = _load_trained(args, cfg, series.D)
    if model.use_attention and extractor is None and cfg.variant != "no_fj_loss":
        raise UsageError("forecaster has attention but no extractor was recorded; use --variant no_fj_loss", "--variant")
    from .forecaster import evaluate, factor_windows

    H = factor_windows(prep.test.inputs, extractor, cfg.period, cfg.decomp_mode) if model.use_attention else None
    m = evaluate(model, prep.test, H, prep.normalizer)
    out = _out(cfg)
    _write_json(out / "metrics.json", m)
    dump_predictions(out / "predictions.csv", model, prep.test, H, list(series.names))
    print(f"test mse {m['mse']:.6f} mae {m['mae']:.6f}")


def _store(args, cfg) -> harness.RecordStore:
    return harness.RecordStore(_out(cfg) / "records.jsonl", record_timing=args.record_timing)


def _cmd_compare(args, cfg):
    series = harness.load_series(cfg)
    ds = harness.dataset_id(cfg)
    table = harness.run_comparison(series, cfg, _ints(args.horizons, "--horizons"), _ints(args.seeds, "--seeds"),
                                   _store(args, cfg), cfg.jobs, args.force, ds)
    text = table.render()
    (_out(cfg) / f"{ds}_compare.txt").write_text(text + "\n")
    print(text)


def _cmd_ablate(args, cfg):
    series = harness.load_series(cfg)
    ds = harness.dataset_id(cfg)
    table = harness.run_ablation(series, cfg, _ints(args.seeds, "--seeds"), _store(args, cfg), cfg.jobs, args.force, ds)
    path = _out(cfg) / harness.plot_data_name(ds, "ablation", cfg.horizon)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "mse", "mae"])
        for v in table.variants:
            w.writerow([v, repr(table.mse[v]), repr(table.mae[v])])
    print(table.render())


def _cmd_sweep(args, cfg):
    series = harness.load_series(cfg)
    ds = harness.dataset_id(cfg)
    res = harness.run_gamma_sweep(series, cfg, harness.parse_grid(args.gamma_grid), _ints(args.seeds, "--seeds"),
                                  _store(args, cfg), cfg.jobs, args.force, ds)
    path = res.write_csv(_out(cfg) / harness.plot_data_name(ds, "sweep", cfg.horizon))
    for r in res.curve():
        print(f"gamma {r['gamma']:<5} mse {r['mse_mean']:.6f} ± {r['mse_std']:.6f}  mae {r['mae_mean']:.6f}")
    print(path)


def _cmd_trace(args, cfg):
    series = harness.load_series(cfg)
    model, extractor = _load_trained(args, cfg, series.D)
    ds = harness.dataset_id(cfg)
    path = _out(cfg) / harness.plot_data_name(ds, "trace", model.h)
    rows = harness.export_human_factor_trace(series, cfg, model, extractor, args.variable, args.start, args.stop, path)
    print(f"{len(rows)} rows -> {path}")


def _cmd_synth(args, cfg):
    series, _ = generate_planted_series(PlantedConfig(), args.n_vars, args.length, cfg.seed)
    save_csv(series, args.out)
    print(args.out)


def _cmd_rerun(args, cfg):
    store = harness.RecordStore(Path(cfg.out_dir) / "records.jsonl")
    stored, fresh = harness.rerun_from_hash(store, args.config_hash)
    d_mse, d_mae = abs(stored.mse - fresh.mse), abs(stored.mae - fresh.mae)
    print(f"stored mse {stored.mse!r} mae {stored.mae!r}\nrerun  mse {fresh.mse!r} mae {fresh.mae!r}")
    if max(d_mse, d_mae) > 1e-12:
        raise NumericalError(f"re-run differs from the stored record (|dmse|={d_mse:.3e}, |dmae|={d_mae:.3e})")


def _cmd_selftest(args, cfg):
    return selftest.run()


# --- entry point --------------------------------------------------------------------


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(cfg.to_text())
            return EXIT_OK
        return args.func(args, cfg) or EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except HintsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
