"""
Tests for dataset shards, manifests and dataset generation.
"""

import json

import numpy as np
import pytest

from src.dataset_store import (
    MANIFEST_NAME,
    generate_denoiser_dataset,
    generate_hpc_dataset,
    load_dataset,
    load_manifest,
    read_shard,
    stack_samples,
    train_validation_split,
    write_dataset,
)
from src.datasets import DatasetError
from src.models import AcquisitionConfig, DenoiserDatasetSpec, HpcDatasetSpec, LabeledSample, Regime, SampleMeta


@pytest.fixture
def cfg32():
    return AcquisitionConfig(n_pulses=32, field_gauss=403.553, tau_end_s=45e-6)


@pytest.fixture
def hpc_spec(cfg32):
    return HpcDatasetSpec(
        regime=Regime.N32_HIGH_B,
        target_period_indices=[1200, 1201, 1202, 1203, 1204],
        samples_per_class=3,
        b_range_hz=(6_000.0, 80_000.0),
        target_b_range_hz=(12_000.0, 80_000.0),
        resolution_hz=200.0,
        acquisition=cfg32,
    )


def make_samples(n, dim=6):
    rng = np.random.default_rng(0)
    return [
        LabeledSample(
            input=rng.uniform(size=dim).astype(np.float32),
            label=np.eye(3, dtype=np.float32)[i % 3],
            meta=SampleMeta(spins=[], seed=1000 + i),
        )
        for i in range(n)
    ]


class TestShards:
    def test_write_and_load(self, tmp_path, hpc_spec):
        samples = make_samples(7)
        manifest = write_dataset(tmp_path / "ds", samples, "hpc", hpc_spec, base_seed=5, shard_size=3)
        assert manifest.shards == ["shard-00000.bin", "shard-00001.bin", "shard-00002.bin"]
        assert manifest.class_counts == {"0": 3, "1": 2, "2": 2}

        dataset = load_dataset(tmp_path / "ds")
        assert len(dataset) == 7
        x, y = stack_samples(samples)
        np.testing.assert_array_equal(dataset.inputs, x)
        np.testing.assert_array_equal(dataset.labels, y)
        assert dataset.seeds.tolist() == list(range(1000, 1007))

    def test_manifest_echoes_spec(self, tmp_path, hpc_spec):
        write_dataset(tmp_path, make_samples(2), "hpc", hpc_spec, base_seed=5)
        data = json.loads((tmp_path / MANIFEST_NAME).read_text())
        assert data["spec"]["regime"] == "n32_high_b"
        assert data["input_dim"] == 6 and data["label_dim"] == 3

    def test_truncated_shard(self, tmp_path, hpc_spec):
        write_dataset(tmp_path, make_samples(2), "hpc", hpc_spec, base_seed=5)
        shard = tmp_path / "shard-00000.bin"
        shard.write_bytes(shard.read_bytes()[:-5])
        with pytest.raises(DatasetError, match="Truncated shard"):
            read_shard(shard)

    def test_missing_shard(self, tmp_path, hpc_spec):
        write_dataset(tmp_path, make_samples(2), "hpc", hpc_spec, base_seed=5)
        (tmp_path / "shard-00000.bin").unlink()
        with pytest.raises(DatasetError, match="missing"):
            load_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="manifest not found"):
            load_manifest(tmp_path)

    def test_empty_dataset_refused(self, tmp_path, hpc_spec):
        with pytest.raises(DatasetError, match="empty"):
            write_dataset(tmp_path, [], "hpc", hpc_spec, base_seed=5)


class TestSplit:
    def test_ninety_ten(self):
        train, val = train_validation_split(1000, 0.1, seed=3)
        assert len(train) == 900 and len(val) == 100
        assert set(train).isdisjoint(val)
        assert set(train) | set(val) == set(range(1000))

    def test_deterministic(self):
        a = train_validation_split(50, 0.1, seed=3)
        b = train_validation_split(50, 0.1, seed=3)
        np.testing.assert_array_equal(a[1], b[1])

    def test_small_sets_keep_both_sides(self):
        train, val = train_validation_split(3, 0.1, seed=0)
        assert len(train) == 2 and len(val) == 1
        train, val = train_validation_split(1, 0.1, seed=0)
        assert len(train) == 1 and len(val) == 0


class TestGeneration:
    def test_hpc_classes_balanced(self, hpc_spec):
        samples = generate_hpc_dataset(hpc_spec, base_seed=1)
        labels = np.argmax(np.stack([s.label for s in samples]), axis=1)
        assert np.bincount(labels).tolist() == [3, 3, 3]

    def test_hpc_reproducible(self, hpc_spec):
        first = generate_hpc_dataset(hpc_spec, base_seed=2)
        again = generate_hpc_dataset(hpc_spec, base_seed=2)
        for a, b in zip(first, again):
            np.testing.assert_array_equal(a.input, b.input)

    def test_denoiser_count(self, cfg32):
        spec = DenoiserDatasetSpec(acquisition=cfg32, samples=4, window=1000)
        samples = generate_denoiser_dataset(spec, base_seed=1)
        assert len(samples) == 4
        assert all(s.input.shape == (1000,) for s in samples)

    def test_worker_pool_matches_serial(self, cfg32):
        spec = DenoiserDatasetSpec(acquisition=cfg32, samples=4, window=1000)
        serial = generate_denoiser_dataset(spec, base_seed=9, workers=1)
        pooled = generate_denoiser_dataset(spec, base_seed=9, workers=2)
        for a, b in zip(serial, pooled):
            np.testing.assert_array_equal(a.input, b.input)
