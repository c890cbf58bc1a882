"""
Tests for period images and the period dictionary.
"""

import numpy as np
import pytest

from src.imaging import (
    ImagingError,
    build_period_dictionary,
    crop_width_for,
    export_pgm,
    export_pixels_csv,
    flatten_image,
    load_period_dictionary,
    read_pgm,
    required_grid_indices,
    row_argmin_columns,
    save_period_dictionary,
    slice_and_stack,
    slice_geometry,
    stack_from_samples,
    unflatten_image,
)
from src.models import AcquisitionConfig, Interp, PeriodImage, SpinParams, Trace, TraceKind, larmor_from_field
from src.spinmodel import cpmg_signal, target_period

LARMOR = larmor_from_field(403.553)


@pytest.fixture
def cfg32():
    return AcquisitionConfig(n_pulses=32, field_gauss=403.553, tau_end_s=45e-6)


@pytest.fixture
def spin():
    return SpinParams(a_hz=-20e3, b_hz=20e3)


def deep_rows(img, depth=0.1):
    return np.nonzero(1.0 - img.pixels.min(axis=1) >= depth)[0]


class TestPeriodDictionary:
    def test_single_entry(self):
        d = build_period_dictionary(LARMOR, 0.0, 0.0)
        assert len(d) == 1
        assert d.tp_s[0] == pytest.approx(target_period(SpinParams(a_hz=0.0, b_hz=10e3), LARMOR), rel=1e-15)

    def test_default_range_has_2001_entries(self):
        d = build_period_dictionary(LARMOR)
        assert len(d) == 2001
        assert d.a_hz[0] == -50e3 and d.a_hz[-1] == 50e3
        assert d.index_of_a(0.0) == 1000

    def test_periods_strictly_decrease(self):
        d = build_period_dictionary(LARMOR)
        assert np.all(np.diff(d.tp_s) < 0)
        assert np.allclose(np.diff(d.a_hz), 50.0)

    def test_invalid_range_raises(self):
        with pytest.raises(ImagingError, match="must not exceed"):
            build_period_dictionary(LARMOR, 10.0, -10.0)

    def test_file_round_trip(self, tmp_path):
        d = build_period_dictionary(LARMOR, -1000.0, 1000.0)
        loaded = load_period_dictionary(save_period_dictionary(d, tmp_path / "periods.tsv"))
        np.testing.assert_array_equal(loaded.a_hz, d.a_hz)
        np.testing.assert_array_equal(loaded.tp_s, d.tp_s)
        assert loaded.larmor_hz == d.larmor_hz and loaded.b_ref_hz == d.b_ref_hz

    def test_foreign_file_rejected(self, tmp_path):
        path = tmp_path / "other.tsv"
        path.write_text("index\ta_hz\ttp_s\n0\t0\t1e-6\n")
        with pytest.raises(ImagingError, match="not a period dictionary"):
            load_period_dictionary(path)


class TestCropWidth:
    def test_wide_far_from_zero(self):
        assert crop_width_for(-30e3) == 100e-9

    def test_narrow_near_zero(self):
        assert crop_width_for(0.0) == 60e-9

    def test_boundary_goes_wide(self):
        assert crop_width_for(10e3) == 100e-9
        assert crop_width_for(-10e3) == 100e-9


class TestSliceAndStack:
    def test_constant_trace_rows_identical(self, cfg32):
        trace = cpmg_signal([], cfg32)
        img = slice_and_stack(trace, 1.1e-6, 100e-9)
        assert img.shape == (33, 25)
        np.testing.assert_array_equal(img.pixels, 1.0)

    def test_geometry(self, cfg32):
        img = slice_and_stack(cpmg_signal([], cfg32), 1.1e-6, 100e-9)
        assert img.origin_s == pytest.approx(0.55e-6)
        assert img.width_s == pytest.approx(25 * cfg32.tau_step_s)
        assert img.pixel_pitch_s == cfg32.tau_step_s

    def test_vertical_line_at_matching_period(self, cfg32, spin):
        tp = target_period(spin, LARMOR)
        img = slice_and_stack(cpmg_signal([spin], cfg32), tp, 100e-9)
        rows = deep_rows(img)
        assert rows.size >= 10
        columns = row_argmin_columns(img)[rows]
        assert np.std(columns) <= 1.0
        assert abs(np.median(columns) - img.shape[1] / 2) <= 1

    def test_sloped_line_at_offset_period(self, cfg32, spin):
        tp = target_period(spin, LARMOR)
        offset_tp = target_period(SpinParams(a_hz=spin.a_hz + 1000.0, b_hz=spin.b_hz), LARMOR)
        img = slice_and_stack(cpmg_signal([spin], cfg32), offset_tp, 100e-9)
        rows = deep_rows(img)
        columns = row_argmin_columns(img)[rows]
        slope = np.polyfit(rows, columns, 1)[0]
        expected = (tp - offset_tp) / cfg32.tau_step_s
        assert slope > 0
        assert slope == pytest.approx(expected, rel=0.3)
        assert np.all(np.diff(columns) >= -1)

    def test_small_offset_drifts_slightly(self, cfg32, spin):
        offset_tp = target_period(SpinParams(a_hz=spin.a_hz + 200.0, b_hz=spin.b_hz), LARMOR)
        img = slice_and_stack(cpmg_signal([spin], cfg32), offset_tp, 100e-9)
        rows = deep_rows(img)
        slope = np.polyfit(rows, row_argmin_columns(img)[rows], 1)[0]
        assert slope > 0

    def test_insufficient_length_names_durations(self, cfg32):
        short = AcquisitionConfig(n_pulses=32, field_gauss=403.553, tau_end_s=10e-6)
        with pytest.raises(ImagingError, match="requires .* available"):
            slice_and_stack(cpmg_signal([], short), 1.1e-6, 100e-9, n_slices=33)

    def test_default_slices_shrink_to_fit(self):
        short = AcquisitionConfig(n_pulses=32, field_gauss=403.553, tau_end_s=10e-6)
        img = slice_and_stack(cpmg_signal([], short), 1.1e-6, 100e-9)
        assert img.shape[0] == 9

    def test_width_beyond_period_raises(self, cfg32):
        with pytest.raises(ImagingError, match="exceeds the slicing period"):
            slice_and_stack(cpmg_signal([], cfg32), 1e-7, 2e-7)

    def test_pixels_stay_in_bounds(self, cfg32):
        rng = np.random.default_rng(0)
        trace = Trace(config=cfg32, values=rng.uniform(0, 1, cfg32.n_points), kind=TraceKind.NOISY)
        img = slice_and_stack(trace, 1.13e-6, 100e-9)
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0

    @pytest.mark.parametrize("interp", [Interp.LINEAR, Interp.NEAREST])
    def test_sparse_samples_match_full_trace(self, cfg32, spin, interp):
        trace = cpmg_signal([spin, SpinParams(a_hz=12e3, b_hz=40e3)], cfg32)
        tp = target_period(spin, LARMOR) * 1.0003
        full = slice_and_stack(trace, tp, 100e-9, interp=interp)
        geometry = slice_geometry(cfg32, tp, 100e-9)
        idx = required_grid_indices(geometry, cfg32, interp)
        sparse = stack_from_samples(geometry, cfg32, idx, trace.values[idx], interp)
        np.testing.assert_array_equal(full.pixels, sparse.pixels)
        assert idx.size < cfg32.n_points


class TestFlattenAndExport:
    @pytest.fixture
    def small_image(self):
        return PeriodImage(
            pixels=np.array([[0.0, 0.25, 0.5], [0.75, 1.0, 0.1]]),
            tp_s=1e-6, width_s=12e-9, origin_s=0.5e-6, pixel_pitch_s=4e-9,
        )

    def test_row_major_order(self, small_image):
        np.testing.assert_array_equal(flatten_image(small_image), [0.0, 0.25, 0.5, 0.75, 1.0, 0.1])

    def test_unflatten_inverts_flatten(self, small_image):
        vector = flatten_image(small_image)
        np.testing.assert_array_equal(unflatten_image(vector, small_image.shape), small_image.pixels)
        assert vector.sum() == pytest.approx(small_image.pixels.sum())

    def test_unflatten_wrong_size(self):
        with pytest.raises(ImagingError, match="Cannot reshape"):
            unflatten_image(np.zeros(5), (2, 3))

    def test_pgm_round_trip(self, small_image, tmp_path):
        pixels = read_pgm(export_pgm(small_image, tmp_path / "img.pgm"))
        assert pixels.shape == small_image.shape
        assert np.max(np.abs(pixels - small_image.pixels)) <= 1.0 / 255.0

    def test_pixel_csv_is_lossless(self, small_image, tmp_path):
        import pandas as pd

        path = export_pixels_csv(small_image, tmp_path / "img.csv")
        np.testing.assert_array_equal(pd.read_csv(path, header=None).to_numpy(), small_image.pixels)
