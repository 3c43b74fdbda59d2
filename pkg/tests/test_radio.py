import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from mihnemo.radio import (
    RadioModel,
    RssSample,
    SmoothingConfig,
    estimate_speed,
    path_loss_rss,
    shadowed_rss,
    smooth,
    smooth_stream,
    windowed_speed,
)

TX14 = RadioModel(beta=3.0, d0=1.0, p_rx_d0=14.0, p_th=-75.0)


def test_reference_distance_returns_reference_power():
    assert path_loss_rss(TX14, 1.0) == 14.0


def test_ten_metres_hand_value():
    assert path_loss_rss(TX14, 10.0) == pytest.approx(-16.0, abs=1e-12)


def test_threshold_distance_matches_numeric_root():
    root = brentq(lambda d: path_loss_rss(TX14, d) + 75.0, 2.0, 5000.0, xtol=1e-12)
    assert TX14.threshold_distance == pytest.approx(root, rel=1e-9)
    # 921 m sits within 0.1 dB of the threshold
    assert path_loss_rss(TX14, 921.0) == pytest.approx(-75.0, abs=0.1)


def test_below_reference_distance_is_clamped():
    assert path_loss_rss(TX14, 0.3) == 14.0


@pytest.mark.parametrize("d", [0.0, -1.0])
def test_rejects_non_positive_distance(d):
    with pytest.raises(ValueError):
        path_loss_rss(TX14, d)
    with pytest.raises(ValueError):
        shadowed_rss(TX14, d, 0)


@pytest.mark.parametrize(
    "kwargs",
    [dict(beta=0), dict(d0=0), dict(sigma=-1), dict(p_rx_d0=-80.0)],
)
def test_model_invariants(kwargs):
    with pytest.raises(ValueError):
        RadioModel(**kwargs)


def test_from_coverage_places_threshold_at_radius():
    m = RadioModel.from_coverage(100.0, beta=3.0, p_th=-75.0)
    assert m.p_rx_d0 == pytest.approx(-15.0)
    assert m.threshold_distance == pytest.approx(100.0, rel=1e-12)


@given(st.floats(1.0, 1e4), st.floats(1e-3, 100.0))
def test_path_loss_strictly_decreasing(d, step):
    assert path_loss_rss(TX14, d + step) < path_loss_rss(TX14, d)


@given(st.floats(1.0, 1e4), st.integers(0, 2**40))
def test_zero_sigma_shadowing_is_path_loss(d, idx):
    assert shadowed_rss(TX14, d, idx) == path_loss_rss(TX14, d)


def test_shadowing_is_reproducible():
    m = RadioModel(sigma=4.0, noise_seed=7)
    assert shadowed_rss(m, 50.0, 123, link_id=2) == shadowed_rss(m, 50.0, 123, link_id=2)
    assert shadowed_rss(m, 50.0, 123, link_id=2) != shadowed_rss(m, 50.0, 124, link_id=2)
    assert shadowed_rss(m, 50.0, 123, link_id=2) != shadowed_rss(m, 50.0, 123, link_id=3)


def test_shadowing_moments():
    m = RadioModel(sigma=4.0, noise_seed=11)
    base = path_loss_rss(m, 60.0)
    x = np.array([shadowed_rss(m, 60.0, i) for i in range(100_000)])
    assert abs(x.mean() - base) < 0.1
    assert x.std(ddof=1) == pytest.approx(4.0, rel=0.02)


def test_smooth_hand_value():
    assert smooth(SmoothingConfig(0.1), -60.0, -70.0) == pytest.approx(-61.0, abs=1e-12)


def test_smooth_delta_one_is_identity():
    assert smooth(SmoothingConfig(1.0), -20.0, -70.0) == -70.0


def test_smooth_constant_input_converges():
    out = smooth_stream(SmoothingConfig(0.1), np.full(400, -60.0), initial=-40.0)
    assert out[-1] == pytest.approx(-60.0, abs=1e-12)


@given(st.floats(0, 1), st.floats(-120, 0), st.floats(-120, 0))
def test_smooth_is_convex_combination(delta, prev, raw):
    out = smooth(SmoothingConfig(delta), prev, raw)
    assert min(prev, raw) - 1e-9 <= out <= max(prev, raw) + 1e-9


@pytest.mark.parametrize("delta", [-0.1, 1.5])
def test_smoothing_config_rejects_out_of_range(delta):
    with pytest.raises(ValueError):
        SmoothingConfig(delta)


def test_smoothed_variance_not_larger_than_raw():
    rng = np.random.default_rng(3)
    raw = -60.0 + 4.0 * rng.standard_normal(20_000)
    for delta in (0.5, 0.1, 0.01):
        s = smooth_stream(SmoothingConfig(delta), raw)[2000:]
        assert s.var() < raw.var()


def _sample(model, t, d):
    p = path_loss_rss(model, d)
    return RssSample(t, p, p)


def test_speed_stationary():
    s1, s2 = _sample(TX14, 0.0, 40.0), _sample(TX14, 1.0, 40.0)
    assert estimate_speed(TX14, s1, s2) == 0.0


def test_speed_exact_without_shadowing():
    v = estimate_speed(TX14, _sample(TX14, 0.0, 50.0), _sample(TX14, 1.0, 75.0))
    assert v == pytest.approx(25.0, rel=1e-9)


@given(st.floats(1.0, 500.0), st.floats(1.0, 500.0), st.floats(0.01, 10.0))
def test_speed_antisymmetric(d1, d2, dt):
    a, b = _sample(TX14, 0.0, d1), _sample(TX14, dt, d2)
    a2, b2 = RssSample(0.0, b.raw_dbm, b.smoothed_dbm), RssSample(dt, a.raw_dbm, a.smoothed_dbm)
    assert estimate_speed(TX14, a2, b2) == pytest.approx(-estimate_speed(TX14, a, b), rel=1e-9, abs=1e-9)


def test_speed_rejects_bad_input():
    with pytest.raises(ValueError):
        estimate_speed(TX14, _sample(TX14, 1.0, 5.0), _sample(TX14, 1.0, 6.0))
    with pytest.raises(ValueError):
        estimate_speed(TX14, RssSample(0.0, 20.0, 20.0), _sample(TX14, 1.0, 6.0))


def shadowed_track(model, v, d_start, duration, poll, delta, link_id=0):
    smoothing = SmoothingConfig(delta)
    samples, prev = [], None
    for k in range(int(round(duration / poll)) + 1):
        t = k * poll
        raw = shadowed_rss(model, d_start + v * t, k, link_id)
        prev = raw if prev is None else smooth(smoothing, prev, raw)
        samples.append(RssSample(t, raw, prev))
    return samples


def test_windowed_speed_recovers_speed_under_shadowing():
    estimates = []
    for seed in range(40):
        m = RadioModel(beta=3.0, d0=1.0, p_rx_d0=-15.0, p_th=-75.0, sigma=4.0, noise_seed=seed)
        track = shadowed_track(m, 25.0, 20.0, 15.0, 0.1, 0.1)
        estimates.append(windowed_speed(m, track, spacing=1.0, window=10.0))
    estimates = np.array(estimates)
    assert abs(estimates.mean() - 25.0) <= 0.2 * 25.0
    assert np.mean(np.abs(estimates - 25.0) <= 0.2 * 25.0) >= 0.9


def test_windowed_speed_needs_a_pair():
    m = RadioModel(p_rx_d0=-15.0)
    assert windowed_speed(m, [_sample(m, 0.0, 5.0)]) is None
    track = [_sample(m, 0.1 * k, 5.0 + 2.5 * k) for k in range(5)]
    assert windowed_speed(m, track) is None
    track = [_sample(m, 0.1 * k, 5.0 + 2.5 * k) for k in range(30)]
    assert windowed_speed(m, track) == pytest.approx(25.0, rel=1e-9)
