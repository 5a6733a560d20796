"""Embedded oracle and invariant checks, run by ``hints selftest``.

Each check compares a library routine with an independent, deliberately
naive reimplementation. The suite takes a few seconds.
"""

from __future__ import annotations

import tempfile
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import grad as G
from .config import RunConfig, read_config_file
from .decomposition import decompose_array
from .errors import CorruptCheckpoint
from .extractor import ExtractorModel, fj_loss_and_grad
from .fj import FjConfig, OpinionState, build_influence_matrix, expected_trajectory, fj_fixed_point, simulate_fj
from .forecaster import (
    ForecastModel,
    Stage2Config,
    WindowSet,
    factor_windows,
    init_model,
    loss_and_grad,
    model_forward,
    train_stage2,
)
from .harness import improvement_avg


def _naive_expected(R, H, w, cfg):
    D, T = R.shape
    out = np.zeros((D, T - 1))
    for t in range(1, T):
        for i in range(D):
            social = 0.0
            for j in range(D):
                social += w[i, j] * (cfg.lam * R[j, t - 1] + (1 - cfg.lam) * H[j, t - 1])
            memory = cfg.lam * R[i, t - 1] + (1 - cfg.lam) * H[i, t - 1]
            lo = max(0, t - cfg.window)
            bias = sum(R[i, k] for k in range(lo, t)) / (t - lo)
            out[i, t - 1] = cfg.beta * social + cfg.delta * memory + (1 - cfg.beta - cfg.delta) * bias
    return out


def check_fj_oracle():
    rng = np.random.default_rng(0)
    R, H = rng.standard_normal((2, 3, 10))
    w = build_influence_matrix(R)
    cfg = FjConfig(0.4, 0.3, 0.6, 4)
    err = np.abs(expected_trajectory(R, H, w, cfg) - _naive_expected(R, H, w.w, cfg)).max()
    return err < 1e-12, f"max |diff| {err:.2e}"


def check_fixed_point():
    w = np.array([[0.0, 1.0], [1.0, 0.0]])
    state = OpinionState(z=np.array([1.0, -1.0]), s=np.array([0.5, 2.0]), lam=np.array([0.6, 0.3]), w=w)
    z = simulate_fj(state, 200)[:, -1]
    ref = np.linalg.solve(np.eye(2) - np.diag(state.lam) @ w, (1 - state.lam) * state.s)
    err = max(np.abs(z - ref).max(), np.abs(fj_fixed_point(state) - ref).max())
    return err < 1e-8, f"max |diff| {err:.2e}"


def check_decomposition():
    rng = np.random.default_rng(1)
    worst = 0.0
    for mode in ("classical", "stl"):
        x = rng.standard_normal((3, 60)).cumsum(axis=1)
        worst = max(worst, np.abs(decompose_array(x, 7, mode).reconstruct() - x).max())
    t = np.arange(120)
    sine = np.sin(2 * np.pi * t / 12)
    res = np.abs(decompose_array(sine, 12).residual).max()
    return worst < 1e-9 and res < 1e-6, f"reconstruction {worst:.1e}, sine residual {res:.1e}"


def _check(fun, theta):
    return G.grad_check(fun, theta).max_rel_error


def check_gradients():
    rng = np.random.default_rng(2)
    worst = 0.0
    X = rng.standard_normal((2, 2, 16))
    Y = rng.standard_normal((2, 2, 4))
    H = rng.standard_normal((2, 2, 16))
    model = init_model(Stage2Config(lookback=16, horizon=4, ma_kernel=5, gamma=0.7, attn_scale=16.0), 2)

    def f(theta):
        return loss_and_grad(model.with_flat(theta), X, Y, H)

    worst = max(worst, _check(f, model.flat))
    R = rng.standard_normal((3, 30))
    w = build_influence_matrix(R)
    ext = ExtractorModel.initialize(3, True, rng)

    def g(theta):
        # the coupled gradient is the total derivative; the detached one is not, by design
        return fj_loss_and_grad(ext.with_flat(theta), R, w, FjConfig(0.3, 0.5, 0.4, 5), detached=False)

    worst = max(worst, _check(g, ext.flat))
    return worst < 1e-3, f"max rel err {worst:.1e}"


def check_gamma_zero():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((40, 2, 24))
    Y = rng.standard_normal((40, 2, 6))
    train = WindowSet(X[:32], Y[:32], np.arange(32))
    val = WindowSet(X[32:], Y[32:], np.arange(32, 40))
    base = Stage2Config(lookback=24, horizon=6, epochs=3, period=6, gamma=0.0)
    ident = ExtractorModel.identity()
    bare = train_stage2(train, val, Stage2Config(**{**base.__dict__, "use_attention": False}))
    hints = train_stage2(train, val, base, extractor=ident)
    yb = model_forward(bare.model, val.inputs)
    yh = model_forward(hints.model, val.inputs, factor_windows(val.inputs, ident, 6))
    return np.array_equal(yb, yh), "bitwise" if np.array_equal(yb, yh) else "forecasts differ"


def check_checkpoint():
    model = ForecastModel(2, 8, 2, m=3)
    model = model.with_flat(np.arange(model.size, dtype=float))
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "m.ckpt"
        G.save_tensors(p, model.tensors(), {"x": 1})
        back, meta = G.load_tensors(p)
        ok = all(np.array_equal(back[k], v) for k, v in model.tensors().items()) and meta == {"x": 1}
        p.write_bytes(p.read_bytes()[:-3])
        try:
            G.load_tensors(p)
            ok = False
        except CorruptCheckpoint:
            pass
    return ok, "round trip and truncation"


def check_improvement_arithmetic():
    # Exchange / DLinear rows at h = 96, 192, 336, 720
    dl_mse, hi_mse = [0.081, 0.157, 0.305, 0.643], [0.077, 0.150, 0.258, 0.550]
    dl_mae, hi_mae = [0.203, 0.293, 0.414, 0.601], [0.198, 0.284, 0.380, 0.579]
    a, b = improvement_avg(dl_mse, hi_mse), improvement_avg(dl_mae, hi_mae)
    return abs(a - 12.7) <= 0.1 and abs(b - 4.63) <= 0.1, f"mse {a:.2f}%, mae {b:.2f}%"


def check_config_roundtrip():
    cfg = RunConfig(gamma=0.3, beta=0.2)
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "run.cfg"
        p.write_text(cfg.to_text())
        back = RunConfig(**read_config_file(p))
    return back.config_hash() == cfg.config_hash(), cfg.config_hash()


CHECKS: list[tuple[str, Callable]] = [
    ("fj expected factor vs triple loop", check_fj_oracle),
    ("fj simulator fixed point", check_fixed_point),
    ("decomposition identity and sine", check_decomposition),
    ("gradient check", check_gradients),
    ("gamma = 0 identity", check_gamma_zero),
    ("checkpoint format", check_checkpoint),
    ("improvement arithmetic", check_improvement_arithmetic),
    ("config round trip", check_config_roundtrip),
]


def run(stream=print) -> int:
    failures = 0
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failure, reported like one
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        failures += not ok
        stream(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail}; {time.perf_counter() - t0:.2f}s)")
    stream(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return 1 if failures else 0
