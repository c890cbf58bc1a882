"""
Tests for model jobs and the on-disk model bank.
"""

import logging
from pathlib import Path

import numpy as np
import pytest

from src.architectures import hpc_classifier
from src.config import RunConfig, apply_overrides
from src.model_bank import (
    MissingModelError,
    ModelBank,
    denoiser_job,
    dip_count_job,
    hpc_job,
    job_metadata,
    regression_job,
)
from src.model_io import ReuseKeyMismatchError, TrainedModel, load_model, save_model
from src.models import Regime, ReuseKey

HIGH = Regime.N32_HIGH_B


@pytest.fixture
def config(tmp_path):
    return apply_overrides(RunConfig(), {
        "models_dir": str(tmp_path / "models"),
        "datasets.dft_table": str(tmp_path / "absent.tsv"),
        "datasets.samples_per_class": 4,
        "networks.hpc_hidden": [8],
        "training.hpc.epochs": 1,
        "training.hpc.batch_size": 4,
    })


class TestModelJob:
    def test_names(self, config):
        assert hpc_job(config, HIGH, [1200, 1201, 1202, 1203, 1204]).name == "hpc_1200_1204"
        assert hpc_job(config, HIGH, dft_group="D21").name == "hpc_D21"
        assert regression_job(config, HIGH, 1207).name == "regression_1207"
        assert dip_count_job(config, HIGH, (1205, 1214)).name == "dip_count_1205_1214"
        assert denoiser_job(256).name == "denoiser_N256"

    def test_paths(self, config, tmp_path):
        job = hpc_job(config, Regime.N256, [30, 31, 32])
        assert job.path(tmp_path) == tmp_path / "n256" / "hpc_0030_0032.spnn"
        assert denoiser_job(32).path(tmp_path) == tmp_path / "denoiser_N32.spnn"

    def test_pulse_count_from_regime(self, config):
        assert hpc_job(config, Regime.N256, [0, 1, 2]).n_pulses == 256
        assert regression_job(config, Regime.N32_LOW_B, 5).n_pulses == 32

    def test_seeds_are_distinct_and_stable(self, config):
        a = hpc_job(config, HIGH, [1200, 1201, 1202, 1203, 1204])
        b = hpc_job(config, HIGH, [1205, 1206, 1207, 1208, 1209])
        assert a.seed(0) == a.seed(0)
        assert a.seed(0) != b.seed(0)
        assert a.seed(0) != a.seed(1)
        assert regression_job(config, HIGH, 1200).seed(0) != a.seed(0)

    def test_denoiser_key_ignores_field(self, config):
        acq = config.acquisition_for(HIGH)
        assert denoiser_job(32).reuse_key(acq).field_gauss is None
        key = regression_job(config, HIGH, 1).reuse_key(acq)
        assert key.field_gauss == pytest.approx(403.553)
        assert key.total_length_s == pytest.approx(acq.total_length_s)

    def test_metadata(self, config):
        meta = job_metadata(hpc_job(config, HIGH, [1200, 1201, 1202, 1203, 1204]), config)
        assert meta["role"] == "hpc"
        assert meta["classes"] == 3
        assert meta["n_slices"] == 33
        assert meta["width_s"] > 0
        assert job_metadata(denoiser_job(32), config)["window"] == 3000


def _stored_model(job, key: ReuseKey, path: Path) -> TrainedModel:
    model = TrainedModel(network=hpc_classifier(12, 3, hidden=(4,), seed=1).eval(), reuse_key=key,
                         metadata={"role": job.role})
    save_model(model, path)
    return model


class TestModelBank:
    def test_missing_hpc_models_listed(self, config):
        bank = ModelBank(config, train_missing=False)
        acq = config.acquisition_for(HIGH)
        with pytest.raises(MissingModelError, match="Missing n32_high_b HPC models for indices 1200-1209") as excinfo:
            bank.hpc_models(HIGH, acq, (1200, 1209))
        assert len(excinfo.value.paths) == 2
        assert excinfo.value.indices[0] == 1200

    def test_missing_single_model(self, config):
        bank = ModelBank(config, train_missing=False)
        with pytest.raises(MissingModelError, match="regression_1207"):
            bank.regression(HIGH, 1207, config.acquisition_for(HIGH))

    def test_stored_model_loaded_and_cached(self, config):
        job = regression_job(config, HIGH, 1207)
        acq = config.acquisition_for(HIGH)
        bank = ModelBank(config, train_missing=False)
        _stored_model(job, job.reuse_key(acq), bank.path_for(job))
        first = bank.regression(HIGH, 1207, acq)
        assert bank.regression(HIGH, 1207, acq) is first

    def test_reuse_key_mismatch(self, config):
        job = regression_job(config, HIGH, 1207)
        acq = config.acquisition_for(HIGH)
        bank = ModelBank(config, train_missing=False)
        stale = job.reuse_key(acq).model_copy(update={"tau_step_s": 8e-9})
        _stored_model(job, stale, bank.path_for(job))
        with pytest.raises(ReuseKeyMismatchError, match="tau_step_s"):
            bank.regression(HIGH, 1207, acq)

    def test_missing_model_trained_and_saved(self, config, caplog):
        bank = ModelBank(config, train_missing=True)
        acq = config.acquisition_for(HIGH)
        with caplog.at_level(logging.WARNING):
            models = bank.hpc_models(HIGH, acq, (1200, 1204))
        assert "1 of 1 n32_high_b HPC models are missing" in caplog.text
        assert "12 samples each" in caplog.text
        assert len(models) == 1
        path = bank.path_for(hpc_job(config, HIGH, [1200, 1201, 1202, 1203, 1204]))
        assert path.exists()
        stored = load_model(path)
        assert stored.metadata["indices"] == [1200, 1201, 1202, 1203, 1204]
        x = np.random.default_rng(0).random((2, stored.network.input_dim))
        np.testing.assert_array_equal(stored.network.predict(x), models[0].network.predict(x))
