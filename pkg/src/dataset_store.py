"""
Dataset shards on disk and parallel dataset generation.

A dataset directory holds a manifest.json and one or more shard files of
little-endian records: u32 input length, float32 input, u32 label length,
float32 label, u64 seed.
"""

import json
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from .datasets import (
    DatasetError,
    make_denoiser_pair,
    make_dip_count_sample,
    make_hpc_sample,
    make_regression_sample,
    sample_seed,
)
from .models import DenoiserDatasetSpec, DftTable, HpcDatasetSpec, LabeledSample

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class DatasetManifest(BaseModel):
    """Description of a dataset directory."""
    schema_version: int = SCHEMA_VERSION
    kind: str
    spec: dict
    base_seed: int
    n_samples: int
    input_dim: int
    label_dim: int
    class_counts: Dict[str, int] = Field(default_factory=dict)
    shards: List[str] = Field(default_factory=list)
    extra: dict = Field(default_factory=dict)


class Dataset(BaseModel):
    """In-memory dataset loaded from shards."""
    model_config = {"arbitrary_types_allowed": True}

    inputs: np.ndarray
    labels: np.ndarray
    seeds: np.ndarray
    manifest: DatasetManifest

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(
            inputs=self.inputs[indices], labels=self.labels[indices], seeds=self.seeds[indices], manifest=self.manifest
        )


def write_shard(path: Path, samples: Iterable[LabeledSample]) -> int:
    """Append-free shard writer; returns the number of records."""
    count = 0
    with open(path, "wb") as f:
        for sample in samples:
            x = np.ascontiguousarray(sample.input, dtype="<f4")
            y = np.ascontiguousarray(sample.label, dtype="<f4")
            f.write(_U32.pack(x.size))
            f.write(x.tobytes())
            f.write(_U32.pack(y.size))
            f.write(y.tobytes())
            f.write(_U64.pack(sample.meta.seed))
            count += 1
    return count


def read_shard(path: Path) -> Tuple[List[np.ndarray], List[np.ndarray], List[int]]:
    """
    Read every record of a shard.

    Raises:
        DatasetError: If the shard is truncated
    """
    raw = Path(path).read_bytes()
    inputs, labels, seeds = [], [], []
    pos = 0
    try:
        while pos < len(raw):
            (n_in,) = _U32.unpack_from(raw, pos)
            pos += 4
            x = np.frombuffer(raw, dtype="<f4", count=n_in, offset=pos)
            pos += 4 * n_in
            (n_label,) = _U32.unpack_from(raw, pos)
            pos += 4
            y = np.frombuffer(raw, dtype="<f4", count=n_label, offset=pos)
            pos += 4 * n_label
            (seed,) = _U64.unpack_from(raw, pos)
            pos += 8
            inputs.append(x)
            labels.append(y)
            seeds.append(seed)
    except (struct.error, ValueError) as e:
        raise DatasetError(f"Truncated shard {path} at byte {pos}: {e}")
    return inputs, labels, seeds


def write_dataset(
    directory: Path,
    samples: Sequence[LabeledSample],
    kind: str,
    spec: BaseModel,
    base_seed: int,
    shard_size: int = 1000,
    extra: Optional[dict] = None,
) -> DatasetManifest:
    """
    Write samples as shards plus a manifest.

    Args:
        directory: Output directory (created)
        samples: Samples in dataset order
        kind: hpc, denoiser, regression or dip_count
        spec: Generating spec, echoed into the manifest
        base_seed: Seed the per-sample seeds derive from
        shard_size: Records per shard file
        extra: Additional manifest fields

    Returns:
        The written DatasetManifest
    """
    if not samples:
        raise DatasetError("Refusing to write an empty dataset")

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shards = []
    for start in range(0, len(samples), shard_size):
        name = f"shard-{start // shard_size:05d}.bin"
        write_shard(directory / name, samples[start:start + shard_size])
        shards.append(name)

    counts: Dict[str, int] = {}
    for sample in samples:
        key = str(int(np.argmax(sample.label))) if kind in ("hpc", "dip_count") else "all"
        counts[key] = counts.get(key, 0) + 1

    manifest = DatasetManifest(
        kind=kind,
        spec=spec.model_dump(mode="json"),
        base_seed=base_seed,
        n_samples=len(samples),
        input_dim=int(samples[0].input.size),
        label_dim=int(samples[0].label.size),
        class_counts=dict(sorted(counts.items())),
        shards=shards,
        extra=extra or {},
    )
    with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as f:
        json.dump(manifest.model_dump(mode="json"), f, indent=2)
    logger.info(f"Wrote {len(samples)} {kind} samples in {len(shards)} shards to {directory}")
    return manifest


def load_manifest(directory: Path) -> DatasetManifest:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"Dataset manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        manifest = DatasetManifest(**json.load(f))
    if manifest.schema_version != SCHEMA_VERSION:
        raise DatasetError(f"Unsupported dataset schema {manifest.schema_version} in {path}")
    return manifest


def load_dataset(directory: Path) -> Dataset:
    """
    Load every shard listed in a dataset manifest.

    Raises:
        DatasetError: If the manifest or a shard is missing or inconsistent
    """
    directory = Path(directory)
    manifest = load_manifest(directory)
    inputs, labels, seeds = [], [], []
    for name in manifest.shards:
        shard = directory / name
        if not shard.exists():
            raise DatasetError(f"Shard listed in manifest is missing: {shard}")
        x, y, s = read_shard(shard)
        inputs.extend(x)
        labels.extend(y)
        seeds.extend(s)

    if len(inputs) != manifest.n_samples:
        raise DatasetError(f"{directory} holds {len(inputs)} samples, manifest declares {manifest.n_samples}")
    if any(x.size != manifest.input_dim for x in inputs) or any(y.size != manifest.label_dim for y in labels):
        raise DatasetError(f"Record dimensions in {directory} disagree with the manifest")

    return Dataset(
        inputs=np.stack(inputs).astype(np.float32),
        labels=np.stack(labels).astype(np.float32),
        seeds=np.array(seeds, dtype=np.uint64),
        manifest=manifest,
    )


def train_validation_split(n_samples: int, validation_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic shuffled split; the last validation_fraction of the permutation validates."""
    order = np.random.default_rng(seed).permutation(n_samples)
    n_val = int(round(n_samples * validation_fraction))
    if n_samples > 1:
        n_val = min(max(n_val, 1), n_samples - 1)
    else:
        n_val = 0
    return np.sort(order[: n_samples - n_val]), np.sort(order[n_samples - n_val:])


def _call(maker: Callable[..., LabeledSample], kwargs: dict) -> LabeledSample:
    return maker(**kwargs)


def generate_samples(
    maker: Callable[..., LabeledSample],
    jobs: Sequence[dict],
    workers: int = 1,
    desc: str = "samples",
    progress: bool = False,
) -> List[LabeledSample]:
    """Run a sample maker over keyword-argument jobs, in worker processes when workers > 1."""
    if workers <= 1 or len(jobs) < 2:
        return [maker(**job) for job in tqdm(jobs, desc=desc, disable=not progress)]

    chunk = max(1, len(jobs) // (workers * 8))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = pool.map(partial(_call, maker), jobs, chunksize=chunk)
        return list(tqdm(results, total=len(jobs), desc=desc, disable=not progress))


def _shuffled(samples: List[LabeledSample], seed: int) -> List[LabeledSample]:
    order = np.random.default_rng(seed).permutation(len(samples))
    return [samples[i] for i in order]


def generate_hpc_dataset(
    spec: HpcDatasetSpec,
    base_seed: int,
    workers: int = 1,
    dft_table: Optional[DftTable] = None,
    progress: bool = False,
) -> List[LabeledSample]:
    """samples_per_class samples of every class, cycling through the target periods, shuffled by seed."""
    targets = spec.target_period_indices or [None]
    jobs = [
        dict(
            spec=spec, class_id=class_id, target_tp_index=targets[i % len(targets)],
            seed=sample_seed(base_seed, class_id, i), dft_table=dft_table,
        )
        for class_id in range(1, spec.classes + 1)
        for i in range(spec.samples_per_class)
    ]
    return _shuffled(generate_samples(make_hpc_sample, jobs, workers, "HPC samples", progress), base_seed)


def generate_denoiser_dataset(
    spec: DenoiserDatasetSpec,
    base_seed: int,
    workers: int = 1,
    dft_table: Optional[DftTable] = None,
    progress: bool = False,
) -> List[LabeledSample]:
    jobs = [dict(spec=spec, seed=sample_seed(base_seed, i), dft_table=dft_table) for i in range(spec.samples)]
    return generate_samples(make_denoiser_pair, jobs, workers, "denoiser pairs", progress)


def generate_regression_dataset(
    spec: HpcDatasetSpec,
    tp_index: int,
    b_range_hz: Tuple[float, float],
    n_samples: int,
    base_seed: int,
    workers: int = 1,
    dft_table: Optional[DftTable] = None,
    width_s: Optional[float] = None,
    progress: bool = False,
) -> List[LabeledSample]:
    jobs = [
        dict(spec=spec, tp_index=tp_index, b_range_hz=b_range_hz, seed=sample_seed(base_seed, tp_index, i),
             dft_table=dft_table, width_s=width_s)
        for i in range(n_samples)
    ]
    return generate_samples(make_regression_sample, jobs, workers, f"regression TP{tp_index}", progress)


def generate_dip_count_dataset(
    spec: HpcDatasetSpec,
    tp_index_range: Tuple[int, int],
    samples_per_class: int,
    base_seed: int,
    n_classes: int = 5,
    indices_per_spin: int = 4,
    workers: int = 1,
    dft_table: Optional[DftTable] = None,
    width_s: Optional[float] = None,
    progress: bool = False,
) -> List[LabeledSample]:
    lo, hi = tp_index_range
    jobs = [
        dict(spec=spec, tp_index_range=tp_index_range, n_spins_class=c,
             seed=sample_seed(base_seed, lo, hi, c, i), n_classes=n_classes,
             indices_per_spin=indices_per_spin, dft_table=dft_table, width_s=width_s)
        for c in range(n_classes)
        for i in range(samples_per_class)
    ]
    samples = generate_samples(make_dip_count_sample, jobs, workers, f"dip count TP{lo}-{hi}", progress)
    return _shuffled(samples, base_seed)


def stack_samples(samples: Sequence[LabeledSample]) -> Tuple[np.ndarray, np.ndarray]:
    """Input and label matrices of in-memory samples."""
    return (
        np.stack([s.input for s in samples]).astype(np.float32),
        np.stack([s.label for s in samples]).astype(np.float32),
    )
