"""
Tests for trace and scene files.
"""

import json

import numpy as np
import pandas as pd
import pytest

from src.models import AcquisitionConfig, SpinParams, Trace, TraceKind
from src.spinmodel import add_gaussian_noise, cpmg_signal
from src.trace_io import TraceIOError, load_spins, load_trace, save_scene, save_trace, sidecar_path


@pytest.fixture
def cfg():
    return AcquisitionConfig(n_pulses=32, field_gauss=403.553, tau_end_s=2e-6)


@pytest.fixture
def noisy(cfg):
    pure = cpmg_signal([SpinParams(a_hz=-20_000.0, b_hz=30_000.0)], cfg)
    return add_gaussian_noise(pure, 0.05, seed=3)


class TestTraceFiles:
    def test_round_trip_is_exact(self, noisy, tmp_path):
        path = save_trace(noisy, tmp_path / "t.csv")
        loaded = load_trace(path)
        np.testing.assert_array_equal(loaded.values, noisy.values)
        assert loaded.config == noisy.config
        assert loaded.kind == TraceKind.NOISY

    def test_csv_columns(self, noisy, tmp_path):
        path = save_trace(noisy, tmp_path / "t.csv")
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["tau_s", "p_x"]
        assert len(frame) == noisy.config.n_points
        assert json.loads(sidecar_path(path).read_text())["kind"] == "noisy"

    def test_pulse_count_must_match_sidecar(self, noisy, tmp_path):
        path = save_trace(noisy, tmp_path / "t.csv")
        with pytest.raises(TraceIOError, match="recorded with N=32"):
            load_trace(path, n_pulses=256)

    def test_without_sidecar(self, cfg, tmp_path):
        path = tmp_path / "raw.csv"
        values = np.linspace(1.0, 0.6, cfg.n_points)
        pd.DataFrame({"tau_s": cfg.tau_grid(), "p_x": values}).to_csv(path, index=False, float_format="%.17g")
        trace = load_trace(path, n_pulses=32, field_gauss=403.553)
        assert trace.config.n_points == cfg.n_points
        assert trace.config.tau_step_s == pytest.approx(4e-9)
        assert trace.config.larmor_hz == pytest.approx(cfg.larmor_hz)
        np.testing.assert_allclose(trace.values, values)

    def test_without_sidecar_needs_pulse_count(self, cfg, tmp_path):
        path = tmp_path / "raw.csv"
        pd.DataFrame({"tau_s": cfg.tau_grid(), "p_x": 1.0}).to_csv(path, index=False)
        with pytest.raises(TraceIOError, match="pulse count"):
            load_trace(path, field_gauss=403.553)

    def test_non_uniform_grid(self, tmp_path):
        path = tmp_path / "raw.csv"
        pd.DataFrame({"tau_s": [0.0, 4e-9, 9e-9, 12e-9], "p_x": [1.0, 1.0, 1.0, 1.0]}).to_csv(path, index=False)
        with pytest.raises(TraceIOError, match="uniform grid"):
            load_trace(path, n_pulses=32, field_gauss=403.553)

    def test_missing_column(self, tmp_path):
        path = tmp_path / "raw.csv"
        pd.DataFrame({"tau_s": [0.0, 4e-9], "signal": [1.0, 1.0]}).to_csv(path, index=False)
        with pytest.raises(TraceIOError, match="lacks columns"):
            load_trace(path, n_pulses=32, field_gauss=403.553)

    def test_values_outside_unit_interval_are_clipped(self, tmp_path):
        path = tmp_path / "raw.csv"
        pd.DataFrame({"tau_s": [0.0, 4e-9, 8e-9], "p_x": [1.2, 0.5, -0.1]}).to_csv(path, index=False)
        trace = load_trace(path, n_pulses=32, field_gauss=403.553)
        np.testing.assert_array_equal(trace.values, [1.0, 0.5, 0.0])

    def test_missing_file(self, tmp_path):
        with pytest.raises(TraceIOError, match="not found"):
            load_trace(tmp_path / "absent.csv")


class TestSceneFiles:
    def test_scene_round_trip(self, tmp_path):
        spins = [SpinParams(a_hz=-20_000.0, b_hz=30_000.0), SpinParams(a_hz=15_000.0, b_hz=8_000.0)]
        path = save_scene(spins, tmp_path / "scene.json", extra={"seed": 4})
        assert load_spins(path) == spins
        assert json.loads(path.read_text())["seed"] == 4

    def test_bare_list_and_negative_b(self, tmp_path):
        path = tmp_path / "spins.json"
        path.write_text(json.dumps([{"a_hz": 1000, "b_hz": -9000}]))
        assert load_spins(path) == [SpinParams(a_hz=1000.0, b_hz=9000.0)]

    def test_csv_spins(self, tmp_path):
        path = tmp_path / "spins.csv"
        pd.DataFrame({"a_hz": [1.0, 2.0], "b_hz": [3.0, 4.0]}).to_csv(path, index=False)
        assert [s.b_hz for s in load_spins(path)] == [3.0, 4.0]

    def test_malformed_spins(self, tmp_path):
        path = tmp_path / "spins.json"
        path.write_text(json.dumps({"spins": [{"a": 1}]}))
        with pytest.raises(TraceIOError, match="Malformed"):
            load_spins(path)

    def test_empty_scene(self, tmp_path):
        path = save_scene([], tmp_path / "scene.json")
        assert load_spins(path) == []


def test_trace_kind_survives(cfg, tmp_path):
    pure = cpmg_signal([], cfg)
    path = save_trace(pure, tmp_path / "pure.csv")
    loaded = load_trace(path)
    assert loaded.kind == TraceKind.PURE
    assert isinstance(loaded, Trace)
    assert np.all(loaded.values == 1.0)
