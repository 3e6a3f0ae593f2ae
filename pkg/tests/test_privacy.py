import math

import numpy as np
import pytest

from taskmorph.errors import CalibrationError, ConfigurationError, NumericError
from taskmorph.privacy import (
    DEFAULT_ORDERS,
    DPConfig,
    PrivacyLedger,
    calibrate_sigma,
    clip_per_sample,
    compute_epsilon,
    compute_rdp,
    noisy_aggregate,
    rdp_step,
)

# ---------------------------------------------------------------------------
# Independent oracle: Renyi divergence of the subsampled Gaussian mechanism
# by direct numerical integration of E_{x~N(0,s^2)}[((1-q) + q e^{(2x-1)/(2s^2)})^a]
# on a dense max-shifted grid. Shares only the order grid and the standard
# conversion formula with the production path; the divergence itself comes
# from quadrature, not the series.
# ---------------------------------------------------------------------------


def oracle_epsilon(q, sigma, steps, delta, orders=DEFAULT_ORDERS):
    s2 = sigma * sigma
    amax = max(orders)
    dx = 0.002
    x = np.arange(-60.0 * sigma - 5.0, amax + 60.0 * sigma + 5.0, dx)
    log_pdf = -x * x / (2.0 * s2) - 0.5 * math.log(2.0 * math.pi * s2)
    log_ratio = np.logaddexp(math.log1p(-q), math.log(q) + (2.0 * x - 1.0) / (2.0 * s2))
    best = math.inf
    for a in orders:
        lf = log_pdf + a * log_ratio
        shift = lf.max()
        log_moment = shift + math.log(np.exp(lf - shift).sum() * dx)
        eps_a = steps * log_moment / (a - 1.0) + math.log(1.0 / delta) / (a - 1.0)
        best = min(best, eps_a)
    return max(best, 0.0)


# ---------------------------------------------------------------------------
# Clipping
# ---------------------------------------------------------------------------


def test_below_threshold_is_bit_identical():
    rng = np.random.default_rng(0)
    g = (rng.standard_normal(64) * 0.05).astype(np.float32)
    assert np.linalg.norm(g.astype(np.float64)) < 1.2
    out = clip_per_sample(g, 1.2)
    assert out.tobytes() == g.tobytes()


def test_axis_vector_scaled_exactly():
    g = np.zeros(8, dtype=np.float32)
    g[0] = 2.4
    out = clip_per_sample(g, 1.2)
    assert out[0] == pytest.approx(1.2, abs=1e-6)
    assert np.all(out[1:] == 0)


def test_norm_and_direction_preserved():
    rng = np.random.default_rng(7)
    g = rng.standard_normal(1000).astype(np.float32)
    g *= 7.3 / np.linalg.norm(g)
    out = clip_per_sample(g, 1.2)
    n = np.linalg.norm(out.astype(np.float64))
    assert abs(n - 1.2) < 1e-6
    cos = float(np.dot(out, g) / (np.linalg.norm(out) * np.linalg.norm(g)))
    assert abs(cos - 1.0) < 1e-6


def test_clipped_norm_never_exceeds_bound():
    rng = np.random.default_rng(21)
    for _ in range(50):
        scale = 10.0 ** rng.uniform(-3, 3)
        g = (rng.standard_normal((32, 128)) * scale).astype(np.float32)
        out = clip_per_sample(g, 1.2)
        norms = np.linalg.norm(out.astype(np.float64), axis=1)
        assert np.all(norms <= 1.2)


def test_nonfinite_gradient_names_sample():
    g = np.zeros((4, 8), dtype=np.float32)
    g[2, 3] = np.nan
    with pytest.raises(NumericError, match="sample 2"):
        clip_per_sample(g, 1.0)


def test_clip_rejects_bad_threshold():
    with pytest.raises(ConfigurationError):
        clip_per_sample(np.ones(4, dtype=np.float32), 0.0)


# ---------------------------------------------------------------------------
# Noisy aggregation
# ---------------------------------------------------------------------------


def test_zero_sigma_is_exact_mean():
    rng = np.random.default_rng(3)
    g = rng.standard_normal((5, 16)).astype(np.float32)
    out = noisy_aggregate(g, 0.0, 1.2, np.random.default_rng(0))
    np.testing.assert_allclose(out, g.mean(axis=0), rtol=1e-6)


def test_zero_sigma_with_infinite_clip_stays_finite():
    g = np.random.default_rng(4).standard_normal((4, 8)).astype(np.float32)
    out = noisy_aggregate(g, 0.0, math.inf, np.random.default_rng(0))
    np.testing.assert_allclose(out, g.mean(axis=0), rtol=1e-6)


def test_opposite_pair_cancels():
    g = np.random.default_rng(5).standard_normal((1, 32)).astype(np.float32)
    pair = np.concatenate([g, -g], axis=0)
    out = noisy_aggregate(pair, 0.0, 1.0, np.random.default_rng(0))
    np.testing.assert_allclose(out, 0.0, atol=1e-7)


def test_single_sample_noise_std():
    # zero gradient, sigma=1, C=1.2: output is pure noise with std 1.2
    rng = np.random.default_rng(1234)
    draws = noisy_aggregate(np.zeros((1, 100_000), dtype=np.float32), 1.0, 1.2, rng)
    std = draws.astype(np.float64).std()
    assert abs(std - 1.2) / 1.2 < 0.02
    assert abs(draws.mean()) < 3 * 1.2 / math.sqrt(draws.size)


def test_noise_is_seed_deterministic():
    g = np.ones((3, 8), dtype=np.float32)
    a = noisy_aggregate(g, 1.0, 1.2, np.random.default_rng(99))
    b = noisy_aggregate(g, 1.0, 1.2, np.random.default_rng(99))
    assert a.tobytes() == b.tobytes()


def test_noise_averages_down_with_batch():
    # per-sample draws then mean: std of the aggregate shrinks as 1/sqrt(n)
    rng = np.random.default_rng(8)
    n = 16
    out = noisy_aggregate(np.zeros((n, 200_000), dtype=np.float32), 1.0, 1.0, rng)
    assert abs(out.std() - 1.0 / math.sqrt(n)) / (1.0 / math.sqrt(n)) < 0.02


# ---------------------------------------------------------------------------
# Accountant
# ---------------------------------------------------------------------------


def test_epsilon_zero_steps():
    assert compute_epsilon(0.01, 1.0, 0, 1e-5) == 0.0


def test_epsilon_zero_sigma_is_infinite_signal():
    eps = compute_epsilon(0.01, 0.0, 10, 1e-5)
    assert math.isinf(eps)


def test_epsilon_against_quadrature_oracle_spotcheck():
    eps = compute_epsilon(0.01, 1.0, 1000, 1e-5)
    ref = oracle_epsilon(0.01, 1.0, 1000, 1e-5)
    assert abs(eps - ref) / ref < 1e-3


def test_epsilon_against_quadrature_oracle_grid():
    for q in (0.005, 0.02, 0.1):
        for sigma in (0.8, 1.2, 2.5):
            eps = compute_epsilon(q, sigma, 400, 1e-5)
            ref = oracle_epsilon(q, sigma, 400, 1e-5)
            assert abs(eps - ref) / ref < 1e-3, (q, sigma, eps, ref)


def test_full_batch_rate_reduces_to_gaussian_mechanism():
    # q = 1 has the closed form alpha / (2 sigma^2) per order
    for alpha in (2.0, 8.0, 32.0):
        assert rdp_step(1.0, 2.0, alpha) == pytest.approx(alpha / 8.0)


def test_monotonicity_in_all_four_knobs():
    base = dict(q=0.02, sigma=1.2, steps=400, delta=1e-5)
    e = compute_epsilon(base["q"], base["sigma"], base["steps"], base["delta"])
    assert compute_epsilon(base["q"], base["sigma"], 2 * base["steps"], base["delta"]) > e
    assert compute_epsilon(2 * base["q"], base["sigma"], base["steps"], base["delta"]) > e
    assert compute_epsilon(base["q"], 2 * base["sigma"], base["steps"], base["delta"]) < e
    assert compute_epsilon(base["q"], base["sigma"], base["steps"], 10 * base["delta"]) < e


def test_rdp_accumulation_is_linear_in_steps():
    one = compute_rdp(0.01, 1.0, 1)
    many = compute_rdp(0.01, 1.0, 7)
    np.testing.assert_allclose(many, 7 * one, rtol=1e-12)


def test_integer_and_fractional_orders_consistent():
    # the fractional-order series evaluated at an integer must agree with
    # the exact binomial sum
    for alpha in (2, 3, 8):
        exact = rdp_step(0.02, 1.1, float(alpha))
        near = rdp_step(0.02, 1.1, alpha + 1e-9)
        assert abs(exact - near) / exact < 1e-5


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


def test_calibration_round_trip():
    sigma = calibrate_sigma(0.01, 2000, 4.0, 1e-5)
    eps = compute_epsilon(0.01, sigma, 2000, 1e-5)
    assert eps <= 4.0
    assert eps >= 4.0 - 0.05


def test_doubling_steps_raises_sigma():
    a = calibrate_sigma(0.01, 1000, 4.0, 1e-5)
    b = calibrate_sigma(0.01, 2000, 4.0, 1e-5)
    assert b > a


def test_halving_epsilon_raises_sigma():
    a = calibrate_sigma(0.01, 1000, 4.0, 1e-5)
    b = calibrate_sigma(0.01, 1000, 2.0, 1e-5)
    assert b > a


def test_unattainable_target_reports_range():
    with pytest.raises(CalibrationError, match="achievable range"):
        calibrate_sigma(1.0, 10_000_000, 0.001, 1e-5, hi=1e3)


# ---------------------------------------------------------------------------
# Config and ledger
# ---------------------------------------------------------------------------


def _config(**kw):
    defaults = dict(
        clip_threshold=1.2,
        noise_multiplier=1.0,
        sample_rate=0.01,
        target_epsilon=4.0,
        target_delta=1e-5,
    )
    defaults.update(kw)
    return DPConfig(**defaults)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        _config(clip_threshold=0.0)
    with pytest.raises(ConfigurationError):
        _config(noise_multiplier=-0.5)
    with pytest.raises(ConfigurationError):
        _config(sample_rate=1.5)
    with pytest.raises(ConfigurationError):
        _config(target_delta=1.0)


def test_ledger_accumulates_and_converts():
    ledger = PrivacyLedger(_config())
    assert ledger.epsilon() == 0.0
    ledger.record_step(100)
    e100 = ledger.epsilon()
    assert e100 > 0
    assert e100 == pytest.approx(compute_epsilon(0.01, 1.0, 100, 1e-5))
    ledger.record_step(100)
    assert ledger.epsilon() > e100
    rdp = ledger.accumulated_rdp()
    assert np.all(rdp >= 0)
    np.testing.assert_allclose(rdp, 200 * compute_rdp(0.01, 1.0, 1), rtol=1e-12)


def test_ledger_budget_precheck():
    # conversion overhead alone costs about 1.3 at these settings, so a
    # budget of 2 admits the first step but not unlimited ones
    ledger = PrivacyLedger(_config(target_epsilon=2.0))
    assert not ledger.would_exceed(extra_steps=1)
    # find the step count at which the budget would break
    steps = 1
    while not ledger.would_exceed(extra_steps=steps):
        steps *= 2
        assert steps < 10**9
    ledger.record_step(steps)
    assert ledger.epsilon() > 2.0


def test_ledger_state_round_trip():
    ledger = PrivacyLedger(_config())
    ledger.record_step(37)
    clone = PrivacyLedger.from_state(ledger.state())
    assert clone.steps == 37
    assert clone.epsilon() == pytest.approx(ledger.epsilon())
