"""
Tests for per-spin fine-tuning.
"""

import logging
from pathlib import Path

import numpy as np
import pytest

from src.config import FineTuneSettings
from src.datasets import load_dft_table
from src.fine_tuning import bath_mask, dip_window_mask, fine_tune, fine_tune_uncertainty, fit_loss, total_loss
from src.models import AcquisitionConfig, SpinParams
from src.spinmodel import cpmg_signal, signal_at

DFT_TABLE_PATH = Path(__file__).resolve().parent.parent / "data" / "dft_hyperfine_table.tsv"


@pytest.fixture
def cfg32():
    return AcquisitionConfig(n_pulses=32, field_gauss=403.553, tau_end_s=12e-6)


@pytest.fixture
def planted():
    return [SpinParams(a_hz=20_000.0, b_hz=30_000.0), SpinParams(a_hz=-35_000.0, b_hz=25_000.0)]


@pytest.fixture
def quick_settings():
    return FineTuneSettings(n_particles=3, delta_b_hz=2_000.0, max_passes=2, max_iter=20, uncertainty_repeats=0)


def windows_for(spins, cfg, half=10):
    return [dip_window_mask(s, cfg, half) for s in spins]


class TestWindows:
    def test_mask_covers_deepest_dip(self, planted, cfg32):
        spin = planted[0]
        g = signal_at([spin], cfg32.larmor_hz, cfg32.n_pulses, cfg32.tau_grid())
        mask = dip_window_mask(spin, cfg32, half=10)
        assert mask[int(np.argmin(g))]
        assert 0 < mask.sum() < mask.size

    def test_zero_b_has_no_dips(self, cfg32):
        assert not dip_window_mask(SpinParams(a_hz=10_000.0, b_hz=0.0), cfg32).any()

    def test_depth_threshold_skips_all(self, planted, cfg32):
        assert not dip_window_mask(planted[0], cfg32, min_depth=1.5).any()


class TestBathMask:
    def test_explicit_ranges(self, cfg32):
        settings = FineTuneSettings(bath_mask_ranges_s=[(1e-6, 2e-6)])
        tau = cfg32.tau_grid()
        np.testing.assert_array_equal(bath_mask(cfg32, settings), (tau >= 1e-6) & (tau <= 2e-6))

    def test_weak_reference_without_table_warns(self, cfg32, caplog):
        settings = FineTuneSettings(bath_reference="dft_weak")
        with caplog.at_level(logging.WARNING):
            mask = bath_mask(cfg32, settings, dft_table=None)
        assert not mask.any()
        assert "no DFT table" in caplog.text

    def test_weak_reference_masks_low_signal(self, cfg32):
        table = load_dft_table(DFT_TABLE_PATH)
        settings = FineTuneSettings(bath_reference="dft_weak", bath_threshold=0.9)
        weak = [r.as_spin() for r in table.rows() if r.omega_h_hz < 100e3]
        reference = signal_at(weak, cfg32.larmor_hz, cfg32.n_pulses, cfg32.tau_grid())
        np.testing.assert_array_equal(bath_mask(cfg32, settings, table), reference < 0.9)


class TestLoss:
    def test_zero_on_exact_signal(self, planted, cfg32):
        experiment = cpmg_signal(planted, cfg32)
        assert fit_loss(planted, experiment, windows_for(planted, cfg32)) == 0.0

    def test_missing_spin_increases_loss(self, planted, cfg32):
        experiment = cpmg_signal(planted, cfg32)
        windows = windows_for(planted, cfg32)
        assert fit_loss(planted[:1], experiment, windows) > fit_loss(planted, experiment, windows)

    def test_non_negative_and_bath_excluded(self, planted, cfg32):
        experiment = cpmg_signal(planted[:1], cfg32)
        windows = windows_for(planted, cfg32)
        full = fit_loss(planted, experiment, windows)
        assert full > 0.0
        everything = np.ones(cfg32.n_points, dtype=bool)
        assert fit_loss(planted, experiment, windows, bath=everything) == 0.0


class TestFineTune:
    def test_truth_is_a_fixed_point(self, planted, cfg32, quick_settings):
        experiment = cpmg_signal(planted, cfg32)
        result = fine_tune(planted, experiment, quick_settings)
        for before, after in zip(planted, result.spins):
            assert abs(after.a_hz - before.a_hz) < 1.0
            assert abs(after.b_hz - before.b_hz) < 1.0
        assert result.loss == 0.0
        assert result.passes == 1

    @pytest.mark.parametrize("delta_a, delta_b", [(1_000.0, -3_000.0), (3_000.0, -8_000.0), (1_500.0, 4_000.0)])
    def test_loss_never_grows_across_passes(self, planted, cfg32, delta_a, delta_b):
        settings = FineTuneSettings(n_particles=5, max_passes=6, uncertainty_repeats=0)
        experiment = cpmg_signal(planted, cfg32)
        start = [SpinParams(a_hz=s.a_hz + delta_a, b_hz=s.b_hz + delta_b) for s in planted]
        result = fine_tune(start, experiment, settings)

        losses = result.accepted_losses
        assert losses[0] == total_loss(start, experiment)
        assert all(later < earlier for earlier, later in zip(losses, losses[1:]))
        assert result.loss == losses[-1]
        assert result.loss == total_loss(result.spins, experiment)
        assert all(later <= earlier for earlier, later in zip(result.pass_losses, result.pass_losses[1:]))

    def test_single_spin_a_converges(self, cfg32):
        truth = SpinParams(a_hz=20_000.0, b_hz=30_000.0)
        settings = FineTuneSettings(n_particles=5, max_passes=6, uncertainty_repeats=0)
        experiment = cpmg_signal([truth], cfg32)
        result = fine_tune([SpinParams(a_hz=truth.a_hz + 1_000.0, b_hz=truth.b_hz)], experiment, settings)
        assert abs(result.spins[0].a_hz - truth.a_hz) <= 100.0

    def test_perturbed_spin_recovered_in_a_crowded_trace(self, cfg32):
        scene = [
            SpinParams(a_hz=a, b_hz=b)
            for a, b in [
                (20_000.0, 30_000.0), (-35_000.0, 25_000.0), (42_000.0, 35_000.0), (-12_000.0, 28_000.0),
                (8_000.0, 40_000.0), (-48_000.0, 22_000.0), (31_000.0, 18_000.0), (-24_000.0, 33_000.0),
                (-3_000.0, 26_000.0), (15_000.0, 45_000.0),
            ]
        ]
        settings = FineTuneSettings(n_particles=5, max_passes=6, uncertainty_repeats=0)
        experiment = cpmg_signal(scene, cfg32)
        start = list(scene)
        start[0] = SpinParams(a_hz=scene[0].a_hz + 1_000.0, b_hz=scene[0].b_hz - 3_000.0)
        result = fine_tune(start, experiment, settings)
        assert abs(result.spins[0].a_hz - scene[0].a_hz) <= 100.0
        assert abs(result.spins[0].b_hz - scene[0].b_hz) <= 1_000.0

    def test_unowned_spins_stay_fixed(self, planted, cfg32, quick_settings):
        experiment = cpmg_signal(planted, cfg32)
        start = [SpinParams(a_hz=s.a_hz, b_hz=s.b_hz + 2_000.0) for s in planted]
        result = fine_tune(start, experiment, quick_settings, owned=[0])
        assert result.spins[1] == start[1]

    def test_empty_candidates(self, cfg32, quick_settings):
        result = fine_tune([], cpmg_signal([], cfg32), quick_settings)
        assert result.spins == [] and result.loss == 0.0 and result.passes == 0

    def test_uncertainty_needs_two_repeats(self, planted, cfg32, quick_settings):
        experiment = cpmg_signal(planted, cfg32)
        assert fine_tune_uncertainty(planted, experiment, quick_settings) == [(0.0, 0.0), (0.0, 0.0)]

    @pytest.mark.slow
    def test_perturbed_b_moves_toward_truth(self, planted, cfg32):
        settings = FineTuneSettings(n_particles=9, delta_b_hz=5_000.0, max_passes=5)
        experiment = cpmg_signal(planted, cfg32)
        start = [SpinParams(a_hz=s.a_hz, b_hz=s.b_hz + 3_000.0) for s in planted]
        result = fine_tune(start, experiment, settings, workers=2)
        for truth, fitted in zip(planted, result.spins):
            assert abs(fitted.b_hz - truth.b_hz) < 3_000.0
