from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hints.decomposition import StlParams, decompose, decompose_array, dump_debug_csv, window_residuals
from hints.errors import PeriodTooLarge, UsageError
from hints.timeseries import MultivariateSeries


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), P=st.integers(2, 14), extra=st.integers(0, 60), mode=st.sampled_from(["classical", "stl"]))
def test_reconstruction_identity(seed, P, extra, mode):
    x = np.random.default_rng(seed).standard_normal((2, 2 * P + extra)) * 3.0
    dec = decompose_array(x, P, mode)
    assert np.abs(dec.reconstruct() - x).max() < 1e-9


@pytest.mark.parametrize("P", [4, 5, 12, 24])
def test_pure_sine_leaves_no_residual(P):
    t = np.arange(10 * P)
    dec = decompose_array(np.sin(2 * np.pi * t / P) + 0.3 * np.cos(4 * np.pi * t / P), P)
    assert np.abs(dec.residual).max() < 1e-6


@pytest.mark.parametrize("P", [5, 7, 24])
def test_linear_ramp_goes_to_trend(P):
    T = 8 * P
    t = np.arange(T, dtype=float)
    dec = decompose_array(0.37 * t - 2.0, P)
    inner = slice(P, T - P)
    assert np.abs(dec.seasonal[inner]).max() < 1e-6
    assert np.abs(dec.residual[inner]).max() < 1e-6


def test_noise_recovered_from_ramp_plus_sine():
    rng = np.random.default_rng(3)
    P, T = 24, 960
    t = np.arange(T)
    noise = 0.5 * rng.standard_normal(T)
    x = 0.01 * t + 2.0 * np.sin(2 * np.pi * t / P) + noise
    res = decompose_array(x, P).residual
    r = np.corrcoef(res[P:-P], noise[P:-P])[0, 1]
    # the trend filter keeps sum(w^2) of the noise variance, the seasonal means about P/T
    w = np.full(P + 1, 1.0 / P)
    w[[0, -1]] = 0.5 / P
    expected = np.sqrt(1.0 - np.sum(w**2) - P / T)
    assert r > 0.95
    assert abs(r - expected) < 0.01
    r_stl = np.corrcoef(decompose_array(x, P, "stl").residual[P:-P], noise[P:-P])[0, 1]
    assert r_stl > 0.8


def test_classical_seasonal_zero_mean_over_each_period():
    rng = np.random.default_rng(4)
    for P in (3, 6, 7):
        x = rng.standard_normal((3, 11 * P + 2)).cumsum(axis=1)
        s = decompose_array(x, P).seasonal
        window_sums = np.lib.stride_tricks.sliding_window_view(s, P, axis=1).sum(axis=-1)
        assert np.abs(window_sums).max() < 1e-9


def test_classical_residual_mean_small():
    rng = np.random.default_rng(5)
    P, T = 24, 960
    t = np.arange(T)
    x = 0.02 * t + np.sin(2 * np.pi * t / P) + rng.standard_normal(T)
    res = decompose_array(x, P).residual
    assert abs(res.mean()) < 0.05 * res.std()


def test_deterministic():
    x = np.random.default_rng(6).standard_normal((2, 100))
    for mode in ("classical", "stl"):
        a, b = decompose_array(x, 10, mode), decompose_array(x, 10, mode)
        assert np.array_equal(a.trend, b.trend) and np.array_equal(a.seasonal, b.seasonal)


@pytest.mark.parametrize("P", [4, 5, 7, 12])
def test_stl_matches_statsmodels(P):
    sm = pytest.importorskip("statsmodels.tsa.seasonal")
    rng = np.random.default_rng(P)
    t = np.arange(15 * P)
    x = 0.05 * t + np.sin(2 * np.pi * t / P) + 0.3 * rng.standard_normal(t.size)
    # statsmodels requires low_pass > period, so odd periods get the next odd span above P
    params = StlParams(lowpass_span=P + 1 if P % 2 == 0 else P + 2)
    ns, nt, nl = params.resolve(P)
    ref = sm.STL(x, period=P, seasonal=ns, trend=nt, low_pass=nl, seasonal_deg=1, trend_deg=1,
                 low_pass_deg=1, robust=False, seasonal_jump=1, trend_jump=1, low_pass_jump=1).fit(inner_iter=2, outer_iter=0)
    dec = decompose_array(x, P, "stl", params)
    assert np.abs(dec.trend - ref.trend).max() < 1e-10
    assert np.abs(dec.seasonal - ref.seasonal).max() < 1e-10


def test_errors():
    with pytest.raises(PeriodTooLarge):
        decompose_array(np.arange(9.0), 5)
    with pytest.raises(UsageError):
        decompose_array(np.arange(20.0), 5, mode="x11")


def test_window_residuals_matches_per_window_calls():
    rng = np.random.default_rng(7)
    W = rng.standard_normal((4, 3, 30))
    R = window_residuals(W, 5)
    for n in range(4):
        np.testing.assert_array_equal(R[n], decompose_array(W[n], 5).residual)


def test_debug_dump(tmp_path):
    s = MultivariateSeries(np.random.default_rng(8).standard_normal((2, 20)), ("a", "b"))
    paths = dump_debug_csv(s, decompose(s, 4), tmp_path)
    assert [p.name for p in paths] == ["decomposition_a.csv", "decomposition_b.csv"]
    lines = paths[0].read_text().splitlines()
    assert lines[0] == "t,value,trend,seasonal,residual" and len(lines) == 21
