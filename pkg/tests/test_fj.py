from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hints.decomposition import decompose_array
from hints.errors import DataError, DegenerateVariable, ShapeMismatch, UsageError
from hints.fj import (
    FjConfig,
    InfluenceMatrix,
    OpinionState,
    PlantedConfig,
    build_influence_matrix,
    expected_human_factor,
    expected_trajectory,
    fj_fixed_point,
    fj_terms,
    generate_planted_series,
    rolling_bias,
    rolling_bias_all,
    simulate_degroot,
    simulate_fj,
)


def pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / (sxx * syy) ** 0.5


def naive_expected(R, H, w, cfg):
    D, T = len(R), len(R[0])
    out = [[0.0] * (T - 1) for _ in range(D)]
    for t in range(1, T):
        for i in range(D):
            social = sum(w[i][j] * (cfg.lam * R[j][t - 1] + (1 - cfg.lam) * H[j][t - 1]) for j in range(D))
            memory = cfg.lam * R[i][t - 1] + (1 - cfg.lam) * H[i][t - 1]
            lo = max(0, t - cfg.window)
            bias = sum(R[i][lo:t]) / (t - lo)
            out[i][t - 1] = cfg.beta * social + cfg.delta * memory + (1 - cfg.beta - cfg.delta) * bias
    return np.array(out)


def test_perfectly_correlated_pair():
    x = np.arange(10.0)
    w = build_influence_matrix(np.stack([x, 3 * x + 1]))
    np.testing.assert_allclose(w.w, [[0, 1], [1, 0]], atol=1e-15)


def test_influence_matches_naive_pearson():
    rng = np.random.default_rng(0)
    R = rng.standard_normal((4, 50))
    w = build_influence_matrix(R)
    for i in range(4):
        raw = [abs(pearson(R[i], R[j])) if i != j else 0.0 for j in range(4)]
        s = sum(raw)
        for j in range(4):
            assert abs(w.w[i, j] - raw[j] / s) < 1e-12


@settings(max_examples=40)
@given(seed=st.integers(0, 10_000), D=st.integers(2, 6))
def test_influence_invariants(seed, D):
    R = np.random.default_rng(seed).standard_normal((D, 30))
    w = build_influence_matrix(R).w
    assert np.all(np.diag(w) == 0) and np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_signed_influence_keeps_sign():
    x = np.random.default_rng(1).standard_normal(40)
    w = build_influence_matrix(np.stack([x, -x]), signed=True)
    np.testing.assert_allclose(w.w, [[0, -1], [-1, 0]], atol=1e-15)


def test_single_variable_row_is_flagged():
    w = build_influence_matrix(np.random.default_rng(2).standard_normal((1, 20)))
    assert w.zero_rows == (0,) and w.w[0, 0] == 0.0


def test_degenerate_variable():
    R = np.random.default_rng(3).standard_normal((3, 20))
    R[1] = 4.0
    with pytest.raises(DegenerateVariable):
        build_influence_matrix(R)


def test_influence_permutation_conjugation():
    rng = np.random.default_rng(4)
    R = rng.standard_normal((5, 40))
    perm = rng.permutation(5)
    w = build_influence_matrix(R).w
    wp = build_influence_matrix(R[perm]).w
    np.testing.assert_allclose(wp, w[np.ix_(perm, perm)], atol=1e-14)


def test_rolling_bias_hand_case():
    R = np.array([[1.0, 2.0, 3.0, 4.0]])
    assert rolling_bias(R, 3, 3)[0] == 2.0
    assert rolling_bias(R, 3, 1)[0] == 1.0
    assert rolling_bias(R, 2, 3)[0] == 2.5


@settings(max_examples=40)
@given(T=st.integers(2, 60), W=st.integers(1, 30), seed=st.integers(0, 1000))
def test_rolling_bias_all_matches_loop(T, W, seed):
    R = np.random.default_rng(seed).standard_normal((2, T))
    fast = rolling_bias_all(R, W)
    for t in range(1, T):
        lo = max(0, t - W)
        for d in range(2):
            assert abs(fast[d, t - 1] - sum(R[d, lo:t]) / (t - lo)) < 1e-12


def test_expected_factor_matches_triple_loop():
    rng = np.random.default_rng(5)
    R, H = rng.standard_normal((2, 3, 12))
    w = build_influence_matrix(R)
    cfg = FjConfig(0.35, 0.25, 0.7, 3)
    fast = expected_trajectory(R, H, w, cfg)
    ref = naive_expected(R.tolist(), H.tolist(), w.w.tolist(), cfg)
    assert np.abs(fast - ref).max() < 1e-12
    for t in (1, 5, 11):
        np.testing.assert_allclose(expected_human_factor(R, H, w, cfg, t), fast[:, t - 1], atol=1e-14)


def test_terms_partition_and_corner_configs():
    rng = np.random.default_rng(6)
    R, H = rng.standard_normal((2, 3, 20))
    w = build_influence_matrix(R)
    terms = fj_terms(R, H, w, FjConfig(0.0, 0.4, 0.5, 4))
    assert np.all(terms.social == 0)
    only_bias = fj_terms(R, H, w, FjConfig(0.0, 0.0, 0.5, 4))
    np.testing.assert_array_equal(only_bias.total, rolling_bias_all(R, 4))
    only_social = fj_terms(R, H, w, FjConfig(1.0, 0.0, 0.5, 4))
    assert np.all(only_social.bias == 0) and np.all(only_social.memory == 0)


def test_expected_factor_is_linear():
    rng = np.random.default_rng(7)
    R1, R2, H1, H2 = rng.standard_normal((4, 3, 15))
    w = build_influence_matrix(R1)
    cfg = FjConfig()
    a, b = 1.7, -0.4
    lhs = expected_trajectory(a * R1 + b * R2, a * H1 + b * H2, w, cfg)
    rhs = a * expected_trajectory(R1, H1, w, cfg) + b * expected_trajectory(R2, H2, w, cfg)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_expected_factor_shape_errors():
    R = np.zeros((2, 5))
    w = InfluenceMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    with pytest.raises(ShapeMismatch):
        expected_trajectory(R, np.zeros((2, 4)), w, FjConfig())
    with pytest.raises(DataError):
        expected_human_factor(R, R, w, FjConfig(), 0)


def test_fj_config_validation():
    with pytest.raises(UsageError):
        FjConfig(beta=0.7, delta=0.5)
    with pytest.raises(UsageError):
        FjConfig(lam=1.5)
    with pytest.raises(UsageError):
        FjConfig(window=0)
    assert FjConfig(beta=0.6, delta=0.4).bias_coef == 0.0


def test_fj_simulator_converges_to_fixed_point():
    w = np.array([[0.0, 1.0], [1.0, 0.0]])
    lam = np.array([0.5, 0.25])
    s = np.array([1.0, 3.0])
    state = OpinionState(np.zeros(2), s, lam, w)
    # Cramer's rule on (I - Lam W) z = (I - Lam) s
    a, b, c, d = 1.0, -lam[0], -lam[1], 1.0
    r0, r1 = (1 - lam[0]) * s[0], (1 - lam[1]) * s[1]
    det = a * d - b * c
    ref = np.array([(r0 * d - b * r1) / det, (a * r1 - c * r0) / det])
    np.testing.assert_allclose(simulate_fj(state, 200)[:, -1], ref, atol=1e-12)
    np.testing.assert_allclose(fj_fixed_point(state), ref, atol=1e-14)


def test_degroot_matches_matrix_power():
    rng = np.random.default_rng(8)
    w = rng.uniform(size=(4, 4))
    w /= w.sum(axis=1, keepdims=True)
    z0 = rng.standard_normal(4)
    traj = simulate_degroot(z0, w, 6)
    np.testing.assert_allclose(traj[:, -1], np.linalg.matrix_power(w, 6) @ z0, atol=1e-13)
    with pytest.raises(DataError):
        simulate_degroot(z0, w * 2, 3)


def test_opinion_state_validation():
    with pytest.raises(DataError):
        OpinionState(np.zeros(2), np.zeros(2), np.array([0.5, 1.5]), np.eye(2)[::-1])
    with pytest.raises(ShapeMismatch):
        OpinionState(np.zeros(2), np.zeros(3), np.zeros(2), np.eye(2)[::-1])


def test_planted_series_is_deterministic_and_persistent():
    a, la = generate_planted_series(PlantedConfig(), 5, 800, 11)
    b, lb = generate_planted_series(PlantedConfig(), 5, 800, 11)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(la, lb)
    c, _ = generate_planted_series(PlantedConfig(), 5, 800, 12)
    assert not np.array_equal(a.values, c.values)
    for d in range(5):
        assert np.corrcoef(la[d, :-1], la[d, 1:])[0, 1] > 0.5


def test_planted_residual_is_latent_residual_without_noise():
    # trend and period-P sine leave no interior residual, and the decomposition is linear
    cfg = PlantedConfig(noise_scale=0.0)
    series, latent = generate_planted_series(cfg, 3, 600, 0)
    P = cfg.period
    res = decompose_array(series.values, P).residual
    ref = decompose_array(latent, P).residual
    assert np.abs(res[:, P:-P] - ref[:, P:-P]).max() < 1e-9


def test_fj_with_full_susceptibility_is_degroot():
    rng = np.random.default_rng(9)
    w = rng.uniform(size=(3, 3))
    w /= w.sum(axis=1, keepdims=True)
    z0 = rng.standard_normal(3)
    fj = simulate_fj(OpinionState(z0, rng.standard_normal(3), np.ones(3), w), 10)
    assert np.abs(fj - simulate_degroot(z0, w, 10)).max() < 1e-12


def test_consensus_and_constant_bias():
    w = np.full((3, 3), 1 / 3)
    np.testing.assert_allclose(simulate_degroot(np.full(3, 2.5), w, 5), 2.5)
    np.testing.assert_allclose(rolling_bias_all(np.full((2, 9), -1.5), 4), -1.5)
