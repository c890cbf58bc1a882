"""
Tests for the CPMG signal model.
"""

import math

import numpy as np
import pytest
from scipy.signal import find_peaks as scipy_find_peaks

from src.models import AcquisitionConfig, DecoherenceParams, SpinParams, Trace, TraceKind, larmor_from_field
from src.spinmodel import (
    SpinModelError,
    add_gaussian_noise,
    apply_decoherence,
    contour_a_for,
    cpmg_signal,
    fit_decoherence,
    recover_decoherence,
    single_spin_coherence,
    target_period,
    truncated_noise_std,
)

FIELD_GAUSS = 403.553


@pytest.fixture
def cfg32():
    """N = 32 acquisition at the reference field, 0-20 µs at 4 ns."""
    return AcquisitionConfig(n_pulses=32, field_gauss=FIELD_GAUSS, tau_end_s=20e-6)


def random_spins(rng, count, b_max=80e3):
    return [
        SpinParams(a_hz=rng.uniform(-50e3, 50e3), b_hz=rng.uniform(0.0, b_max))
        for _ in range(count)
    ]


class TestSingleSpinCoherence:
    def test_tau_zero_is_one(self, cfg32):
        spin = SpinParams(a_hz=36.22e3, b_hz=27.4e3)
        assert single_spin_coherence(spin, cfg32, 0.0) == pytest.approx(1.0, abs=1e-15)

    def test_zero_b_is_invisible(self, cfg32):
        rng = np.random.default_rng(1)
        tau = rng.uniform(0, 50e-6, size=10_000)
        for a_hz in rng.uniform(-50e3, 50e3, size=5):
            m = single_spin_coherence(SpinParams(a_hz=a_hz, b_hz=0.0), cfg32, tau)
            np.testing.assert_allclose(m, 1.0, atol=1e-12)

    def test_degenerate_omega_tilde_is_one(self, cfg32):
        spin = SpinParams(a_hz=-cfg32.larmor_hz, b_hz=0.0)
        m = single_spin_coherence(spin, cfg32, np.linspace(0, 10e-6, 11))
        np.testing.assert_array_equal(m, 1.0)

    def test_negative_tau_raises(self, cfg32):
        with pytest.raises(SpinModelError, match="non-negative"):
            single_spin_coherence(SpinParams(a_hz=0.0, b_hz=1e3), cfg32, -1e-9)

    def test_bounds_on_random_spins(self, cfg32):
        rng = np.random.default_rng(2)
        tau = rng.uniform(0, 50e-6, size=100)
        for spin in random_spins(rng, 100):
            m = single_spin_coherence(spin, cfg32, tau)
            assert np.all(m >= -1.0) and np.all(m <= 1.0)

    def test_deep_dip_near_predicted_period(self, cfg32):
        spin = SpinParams(a_hz=36.22e3, b_hz=27.4e3)
        tp = target_period(spin, cfg32.larmor_hz)
        dips = (2 * np.arange(1, 21) - 1) * tp / 2
        # dip depth follows the global period; take the dip where it peaks
        centre = dips[np.argmax(np.abs(np.sin(2 * np.pi * cfg32.larmor_hz * dips)))]
        tau = np.linspace(centre - tp / 2, centre + tp / 2, 20_001)
        m = single_spin_coherence(spin, cfg32, tau)
        assert m.min() < 0.0


class TestCpmgSignal:
    def test_empty_spin_list_is_constant_one(self, cfg32):
        trace = cpmg_signal([], cfg32)
        assert trace.kind == TraceKind.PURE
        np.testing.assert_array_equal(trace.values, 1.0)

    def test_single_spin_reduction(self, cfg32):
        spin = SpinParams(a_hz=-12e3, b_hz=30e3)
        trace = cpmg_signal([spin], cfg32)
        expected = 0.5 * (1.0 + single_spin_coherence(spin, cfg32, cfg32.tau_grid()))
        np.testing.assert_allclose(trace.values, expected, atol=1e-15)

    def test_product_law(self, cfg32):
        rng = np.random.default_rng(3)
        cfg = AcquisitionConfig(n_pulses=32, field_gauss=FIELD_GAUSS, tau_end_s=396e-9, tau_step_s=4e-9)
        for _ in range(100):
            s1 = random_spins(rng, int(rng.integers(1, 6)))
            s2 = random_spins(rng, int(rng.integers(1, 6)))
            combined = 2.0 * cpmg_signal(s1 + s2, cfg).values - 1.0
            separate = (2.0 * cpmg_signal(s1, cfg).values - 1.0) * (2.0 * cpmg_signal(s2, cfg).values - 1.0)
            assert np.max(np.abs(combined - separate)) <= 1e-12

    def test_values_within_unit_interval(self, cfg32):
        rng = np.random.default_rng(4)
        for _ in range(20):
            trace = cpmg_signal(random_spins(rng, 30), cfg32)
            assert trace.values.min() >= 0.0 and trace.values.max() <= 1.0

    def test_b_sign_invariance(self, cfg32):
        positive = cpmg_signal([SpinParams.from_signed(20e3, 15e3)], cfg32)
        negative = cpmg_signal([SpinParams.from_signed(20e3, -15e3)], cfg32)
        np.testing.assert_array_equal(positive.values, negative.values)

    def test_dip_spacing_matches_target_period(self, cfg32):
        spin = SpinParams(a_hz=36.22e3, b_hz=27.4e3)
        tp = target_period(spin, cfg32.larmor_hz)
        trace = cpmg_signal([spin], cfg32)
        dips, _ = scipy_find_peaks(-trace.values, height=-0.75, distance=int(0.5 * tp / cfg32.tau_step_s))
        assert len(dips) >= 5
        spacing = np.median(np.diff(trace.tau[dips]))
        assert spacing == pytest.approx(tp, rel=0.02)

    def test_traces_are_immutable(self, cfg32):
        trace = cpmg_signal([], cfg32)
        with pytest.raises(ValueError):
            trace.values[0] = 0.0


class TestTargetPeriod:
    def test_zero_coupling_is_half_larmor_period(self):
        larmor = larmor_from_field(FIELD_GAUSS)
        assert target_period(SpinParams(a_hz=0.0, b_hz=0.0), larmor) == pytest.approx(0.5 / larmor)

    def test_reference_field_value(self):
        tp = target_period(SpinParams(a_hz=0.0, b_hz=0.0), larmor_from_field(FIELD_GAUSS))
        assert tp == pytest.approx(1.157e-6, rel=1e-3)

    def test_negative_a_lengthens_period(self):
        larmor = larmor_from_field(FIELD_GAUSS)
        c1 = SpinParams(a_hz=-213.19e3, b_hz=4.2e3)
        assert target_period(c1, larmor) > target_period(SpinParams(a_hz=0.0, b_hz=0.0), larmor)

    def test_contour_inversion(self):
        larmor = larmor_from_field(FIELD_GAUSS)
        spin = SpinParams(a_hz=7.8e3, b_hz=20e3)
        tp = target_period(spin, larmor)
        assert contour_a_for(tp, 20e3, larmor) == pytest.approx(7.8e3, abs=1e-6)
        a_at_70k = contour_a_for(tp, 70e3, larmor)
        assert target_period(SpinParams(a_hz=a_at_70k, b_hz=70e3), larmor) == pytest.approx(tp, rel=1e-12)

    def test_unreachable_contour_raises(self):
        larmor = larmor_from_field(FIELD_GAUSS)
        with pytest.raises(SpinModelError, match="unreachable"):
            contour_a_for(1.0 / (larmor + 1e3), 5e3, larmor)


class TestDecoherence:
    def test_tau_zero_unchanged_and_constant_trace_envelope(self, cfg32):
        dp = DecoherenceParams(t_s=20e-6, n_exp=2.0)
        out = apply_decoherence(cpmg_signal([], cfg32), dp)
        assert out.kind == TraceKind.DECOHERED
        assert out.values[0] == 1.0
        expected = 0.5 * np.exp(-(cfg32.tau_grid() / 20e-6) ** 2) + 0.5
        np.testing.assert_allclose(out.values, expected, atol=1e-15)

    def test_apply_requires_pure_trace(self, cfg32):
        dp = DecoherenceParams(t_s=20e-6, n_exp=2.0)
        noisy = add_gaussian_noise(cpmg_signal([], cfg32), 0.05, seed=0)
        with pytest.raises(SpinModelError, match="pure"):
            apply_decoherence(noisy, dp)

    def test_round_trip(self, cfg32):
        rng = np.random.default_rng(5)
        dp = DecoherenceParams(t_s=12e-6, n_exp=1.5)
        for _ in range(10):
            pure = cpmg_signal(random_spins(rng, 8), cfg32)
            recovered = recover_decoherence(apply_decoherence(pure, dp), dp)
            trusted = ~recovered.low_confidence
            assert trusted.any()
            assert np.max(np.abs(recovered.values[trusted] - pure.values[trusted])) <= 1e-9

    def test_recover_fixed_point_and_flags(self, cfg32):
        dp = DecoherenceParams(t_s=5e-6, n_exp=2.0)
        half = Trace(config=cfg32, values=np.full(cfg32.n_points, 0.5), kind=TraceKind.DENOISED)
        out = recover_decoherence(half, dp)
        assert out.kind == TraceKind.RECOVERED
        np.testing.assert_allclose(out.values, 0.5)
        envelope = np.exp(-(cfg32.tau_grid() / 5e-6) ** 2)
        np.testing.assert_array_equal(out.low_confidence, envelope < 0.05)

    def test_recover_rejects_pure_trace(self, cfg32):
        with pytest.raises(SpinModelError, match="Cannot recover"):
            recover_decoherence(cpmg_signal([], cfg32), DecoherenceParams(t_s=1e-5, n_exp=1.0))

    def test_recover_accepts_raw_noisy_trace(self, cfg32):
        dp = DecoherenceParams(t_s=12e-6, n_exp=1.5)
        pure = cpmg_signal(random_spins(np.random.default_rng(9), 4), cfg32)
        raw = add_gaussian_noise(apply_decoherence(pure, dp), 0.0)
        assert raw.kind == TraceKind.NOISY
        recovered = recover_decoherence(raw, dp)
        trusted = ~recovered.low_confidence
        assert recovered.kind == TraceKind.RECOVERED
        assert np.max(np.abs(recovered.values[trusted] - pure.values[trusted])) <= 1e-9
        with pytest.raises(SpinModelError, match="recovered"):
            recover_decoherence(recovered, dp)


class TestFitDecoherence:
    def test_recovers_envelope_without_spins(self):
        cfg = AcquisitionConfig(n_pulses=32, field_gauss=FIELD_GAUSS, tau_end_s=2e-3, tau_step_s=100e-9)
        trace = apply_decoherence(cpmg_signal([], cfg), DecoherenceParams(t_s=1e-3, n_exp=2.0))
        fitted = fit_decoherence(trace)
        assert fitted.t_s == pytest.approx(1e-3, rel=0.05)
        assert fitted.n_exp == pytest.approx(2.0, rel=0.05)

    def test_constant_trace_returns_sentinel(self, cfg32):
        fitted = fit_decoherence(cpmg_signal([], cfg32))
        assert fitted.is_sentinel
        assert math.isinf(fitted.t_s) and fitted.n_exp == 1.0

    def test_envelope_fit_ignores_dips(self):
        cfg = AcquisitionConfig(n_pulses=32, field_gauss=FIELD_GAUSS, tau_end_s=400e-6, tau_step_s=8e-9)
        spins = [
            SpinParams(a_hz=-20e3, b_hz=15e3),
            SpinParams(a_hz=5e3, b_hz=8e3),
            SpinParams(a_hz=12e3, b_hz=20e3),
            SpinParams(a_hz=30e3, b_hz=10e3),
            SpinParams(a_hz=-40e3, b_hz=18e3),
        ]
        trace = apply_decoherence(cpmg_signal(spins, cfg), DecoherenceParams(t_s=200e-6, n_exp=2.0))
        fitted = fit_decoherence(trace)
        assert fitted.t_s == pytest.approx(200e-6, rel=0.10)


class TestNoise:
    def test_zero_sigma_is_identity(self, cfg32):
        pure = cpmg_signal([SpinParams(a_hz=10e3, b_hz=30e3)], cfg32)
        noisy = add_gaussian_noise(pure, 0.0, seed=1)
        assert noisy.kind == TraceKind.NOISY
        np.testing.assert_array_equal(noisy.values, pure.values)

    def test_same_seed_is_deterministic(self, cfg32):
        pure = cpmg_signal([SpinParams(a_hz=10e3, b_hz=30e3)], cfg32)
        a = add_gaussian_noise(pure, 0.05, seed=42)
        b = add_gaussian_noise(pure, 0.05, seed=42)
        np.testing.assert_array_equal(a.values, b.values)

    def test_noise_is_truncated_and_clamped(self, cfg32):
        pure = cpmg_signal([SpinParams(a_hz=10e3, b_hz=30e3)], cfg32)
        noisy = add_gaussian_noise(pure, 0.05, clip=0.05, seed=7)
        assert np.max(np.abs(noisy.values - pure.values)) <= 0.05 + 1e-12
        assert noisy.values.min() >= 0.0 and noisy.values.max() <= 1.0

    def test_empirical_std_matches_truncated_normal(self):
        step = 4e-9
        cfg = AcquisitionConfig(n_pulses=32, field_gauss=FIELD_GAUSS, tau_end_s=(10**6 - 1) * step, tau_step_s=step)
        assert cfg.n_points == 10**6
        flat = Trace(config=cfg, values=np.full(cfg.n_points, 0.5), kind=TraceKind.PURE)
        added = add_gaussian_noise(flat, 0.05, clip=0.05, seed=11).values - 0.5
        assert added.std() == pytest.approx(truncated_noise_std(0.05, 0.05), rel=0.03)

    def test_negative_sigma_raises(self, cfg32):
        with pytest.raises(SpinModelError, match="non-negative"):
            add_gaussian_noise(cpmg_signal([], cfg32), -0.1, seed=0)
