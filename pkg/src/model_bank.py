"""
On-disk bank of trained models.

Every model the pipeline needs is described by a ModelJob (role, pulse count,
regime, dictionary indices). The bank loads the job's file when present,
trains and saves it when `detection.train_missing` is set, and raises
MissingModelError otherwise. The same job description drives `gen-data` and
`train` so that files produced by hand and on demand are interchangeable.
"""

import logging
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .architectures import denoiser, dip_count_classifier, hpc_classifier, regression_model
from .config import RunConfig
from .dataset_store import (
    Dataset,
    generate_denoiser_dataset,
    generate_dip_count_dataset,
    generate_hpc_dataset,
    generate_regression_dataset,
    stack_samples,
    train_validation_split,
)
from .denoising import check_reuse
from .datasets import dictionary_for, load_dft_table, model_image_width, sample_seed
from .model_io import TrainedModel, load_model, save_model
from .models import AcquisitionConfig, DftTable, LabeledSample, PeriodDictionary, Regime, ReuseKey, TrainConfig
from .network import Network
from .stage_tracker import get_stage_tracker
from .training import TrainingHistory, train

logger = logging.getLogger(__name__)

ROLES = ("hpc", "regression", "dip_count", "denoiser")
_ROLE_SEED = {role: i + 1 for i, role in enumerate(ROLES)}


class MissingModelError(Exception):
    """Custom exception for models that are neither on disk nor allowed to be trained."""

    def __init__(self, message: str, paths: Sequence[Path] = (), indices: Sequence[int] = ()):
        super().__init__(message)
        self.paths = list(paths)
        self.indices = list(indices)


@dataclass(frozen=True)
class ModelJob:
    """One model of the bank."""
    role: str
    n_pulses: int
    regime: Optional[Regime] = None
    indices: Tuple[int, ...] = ()
    dft_group: Optional[str] = None

    @property
    def name(self) -> str:
        if self.role == "denoiser":
            return f"denoiser_N{self.n_pulses}"
        if self.dft_group:
            return f"{self.role}_{self.dft_group}"
        if self.role == "regression":
            return f"regression_{self.indices[0]:04d}"
        return f"{self.role}_{self.indices[0]:04d}_{self.indices[-1]:04d}"

    def path(self, models_dir: Path) -> Path:
        folder = Path(models_dir) if self.regime is None else Path(models_dir) / self.regime.value
        return folder / f"{self.name}.spnn"

    def reuse_key(self, cfg: AcquisitionConfig) -> ReuseKey:
        if self.role == "denoiser":
            return ReuseKey(role=self.role, n_pulses=cfg.n_pulses, tau_step_s=cfg.tau_step_s)
        return ReuseKey(
            role=self.role,
            n_pulses=cfg.n_pulses,
            tau_step_s=cfg.tau_step_s,
            field_gauss=cfg.field_gauss,
            total_length_s=cfg.total_length_s,
        )

    def seed(self, base_seed: int) -> int:
        group = zlib.crc32(self.dft_group.encode("utf-8")) if self.dft_group else 0
        return sample_seed(base_seed, _ROLE_SEED[self.role], self.n_pulses, group, *self.indices)


def hpc_job(config: RunConfig, regime: Regime, indices: Sequence[int] = (), dft_group: Optional[str] = None) -> ModelJob:
    return ModelJob("hpc", config.regimes[regime].n_pulses, regime, tuple(indices), dft_group)


def regression_job(config: RunConfig, regime: Regime, tp_index: int) -> ModelJob:
    return ModelJob("regression", config.regimes[regime].n_pulses, regime, (tp_index,))


def dip_count_job(config: RunConfig, regime: Regime, index_range: Tuple[int, int]) -> ModelJob:
    return ModelJob("dip_count", config.regimes[regime].n_pulses, regime, (index_range[0], index_range[1]))


def denoiser_job(n_pulses: int) -> ModelJob:
    return ModelJob("denoiser", n_pulses)


def regime_dictionary(config: RunConfig, regime: Regime) -> PeriodDictionary:
    return dictionary_for(config.hpc_spec(regime, config.model_groups(regime, (0, 0))[0]))


def _owning_group(config: RunConfig, regime: Regime, tp_index: int) -> List[int]:
    return config.model_groups(regime, (tp_index, tp_index))[0]


def job_metadata(job: ModelJob, config: RunConfig) -> Dict:
    """What inference needs to rebuild the model's inputs."""
    meta: Dict = {"role": job.role, "n_pulses": job.n_pulses}
    if job.role == "denoiser":
        meta["window"] = config.datasets.denoiser_window
        return meta

    profile = config.regimes[job.regime]
    meta.update({
        "regime": job.regime.value,
        "n_slices": config.imaging.n_slices,
        "interp": config.imaging.interp.value,
    })
    if job.role == "hpc":
        spec = config.hpc_spec(job.regime, list(job.indices), job.dft_group)
        meta.update({"indices": list(job.indices), "dft_group": job.dft_group,
                     "classes": spec.classes, "width_s": model_image_width(spec)})
    elif job.role == "regression":
        dictionary = regime_dictionary(config, job.regime)
        meta.update({"tp_index": job.indices[0], "b_range_hz": list(profile.regression_b_range_hz),
                     "width_s": config.image_width_for(float(dictionary.a_hz[job.indices[0]]))})
    else:
        lo, hi = job.indices
        dictionary = regime_dictionary(config, job.regime)
        mid = 0.5 * (float(dictionary.a_hz[lo]) + float(dictionary.a_hz[hi]))
        meta.update({"index_lo": lo, "index_hi": hi, "n_classes": config.datasets.dip_count_classes,
                     "indices_per_spin": config.detection.indices_per_spin,
                     "width_s": config.image_width_for(mid)})
    return meta


def generate_job_samples(
    job: ModelJob,
    config: RunConfig,
    dft_table: Optional[DftTable] = None,
    workers: int = 1,
    progress: bool = False,
) -> Tuple[List[LabeledSample], object]:
    """
    Training samples of a job and the dataset settings that generated them.

    Returns:
        (samples, dataset_spec); the dataset spec is echoed into dataset manifests
    """
    base_seed = job.seed(config.seed)
    if job.role == "denoiser":
        spec = config.denoiser_spec(job.n_pulses)
        return generate_denoiser_dataset(spec, base_seed, workers, dft_table, progress), spec

    if job.role == "hpc":
        spec = config.hpc_spec(job.regime, list(job.indices), job.dft_group)
        return generate_hpc_dataset(spec, base_seed, workers, dft_table, progress), spec

    meta = job_metadata(job, config)
    if job.role == "regression":
        spec = config.hpc_spec(job.regime, _owning_group(config, job.regime, job.indices[0]))
        samples = generate_regression_dataset(
            spec, job.indices[0], tuple(meta["b_range_hz"]), config.datasets.regression_samples,
            base_seed, workers, dft_table, meta["width_s"], progress,
        )
        return samples, spec

    lo, hi = job.indices
    spec = config.hpc_spec(job.regime, _owning_group(config, job.regime, lo))
    samples = generate_dip_count_dataset(
        spec, (lo, hi), config.datasets.dip_count_samples_per_class, base_seed,
        meta["n_classes"], meta["indices_per_spin"], workers, dft_table, meta["width_s"], progress,
    )
    return samples, spec


def build_network(job: ModelJob, config: RunConfig, input_dim: int, output_dim: int, seed: int = 0) -> Network:
    nets = config.networks
    if job.role == "denoiser":
        return denoiser(input_dim, nets.denoiser_channels, nets.leaky_slope, seed)
    if job.role == "hpc":
        return hpc_classifier(input_dim, output_dim, nets.hpc_hidden, nets.leaky_slope, seed)
    if job.role == "regression":
        return regression_model(input_dim, nets.regression_hidden, nets.leaky_slope, seed)
    return dip_count_classifier(input_dim, output_dim, nets.dip_count_hidden, nets.leaky_slope, seed)


def train_config_for(job: ModelJob, config: RunConfig) -> TrainConfig:
    return getattr(config.training, job.role).model_copy(update={"seed": job.seed(config.seed) % (2 ** 32)})


def fit_model(
    job: ModelJob,
    config: RunConfig,
    inputs: np.ndarray,
    labels: np.ndarray,
    acquisition: AcquisitionConfig,
    progress: bool = False,
) -> Tuple[TrainedModel, TrainingHistory]:
    """
    Train a fresh network for a job on the given samples.

    A deterministic validation_fraction of the samples is held out and scored
    after every epoch.
    """
    train_cfg = train_config_for(job, config)
    if job.role == "denoiser":
        inputs = inputs.reshape(len(inputs), 1, -1)
        labels = labels.reshape(len(labels), 1, -1)
    network = build_network(job, config, inputs.shape[-1], labels.shape[-1], train_cfg.seed)

    train_idx, val_idx = train_validation_split(len(inputs), config.datasets.validation_fraction, train_cfg.seed)
    x_val = inputs[val_idx] if val_idx.size else None
    y_val = labels[val_idx] if val_idx.size else None
    history = train(network, inputs[train_idx], labels[train_idx], train_cfg, x_val, y_val, progress)

    metadata = job_metadata(job, config)
    metadata["final_train_loss"] = history.final_train_loss
    model = TrainedModel(network=network.eval(), reuse_key=job.reuse_key(acquisition), metadata=metadata)
    return model, history


def train_from_dataset(dataset: Dataset, config: RunConfig, progress: bool = False) -> Tuple[ModelJob, TrainedModel, TrainingHistory]:
    """Train the model described by a dataset manifest written by `gen-data`."""
    extra = dataset.manifest.extra
    regime = Regime(extra["regime"]) if extra.get("regime") else None
    job = ModelJob(
        role=extra["role"], n_pulses=int(extra["n_pulses"]), regime=regime,
        indices=tuple(int(i) for i in extra.get("indices", [])), dft_group=extra.get("dft_group"),
    )
    acquisition = config.acquisition.for_pulses(job.n_pulses)
    model, history = fit_model(job, config, dataset.inputs, dataset.labels, acquisition, progress)
    return job, model, history


def job_manifest_extra(job: ModelJob) -> Dict:
    return {
        "role": job.role,
        "n_pulses": job.n_pulses,
        "regime": job.regime.value if job.regime else None,
        "indices": list(job.indices),
        "dft_group": job.dft_group,
    }


class ModelBank:
    """Loads models from the models directory, training missing ones on request."""

    def __init__(
        self,
        config: RunConfig,
        dft_table: Optional[DftTable] = None,
        workers: int = 1,
        progress: bool = False,
        train_missing: Optional[bool] = None,
    ):
        self.config = config
        self.models_dir = Path(config.models_dir)
        self.dft_table = dft_table if dft_table is not None else self._load_dft_table()
        self.workers = workers
        self.progress = progress
        self.train_missing = config.detection.train_missing if train_missing is None else train_missing
        self._cache: Dict[Path, TrainedModel] = {}

    def _load_dft_table(self) -> Optional[DftTable]:
        path = Path(self.config.datasets.dft_table)
        if not path.exists():
            logger.warning(f"DFT table {path} not found; training scenes will have no DFT-listed spins")
            return None
        return load_dft_table(path)

    def path_for(self, job: ModelJob) -> Path:
        return job.path(self.models_dir)

    def train_job(self, job: ModelJob) -> TrainedModel:
        """Generate samples, train and save the model of a job."""
        acquisition = self.config.acquisition.for_pulses(job.n_pulses)
        tracker = get_stage_tracker()
        logger.info(f"Training {job.name} ({job.regime.value if job.regime else 'all regimes'})")
        with tracker.track(f"gen_{job.role}"):
            samples, _ = generate_job_samples(job, self.config, self.dft_table, self.workers, self.progress)
        inputs, labels = stack_samples(samples)
        with tracker.track(f"train_{job.role}", items=len(samples)):
            model, _ = fit_model(job, self.config, inputs, labels, acquisition, self.progress)
        save_model(model, self.path_for(job))
        return model

    def get(self, job: ModelJob, acquisition: Optional[AcquisitionConfig] = None) -> TrainedModel:
        """
        Model of a job, checked against the acquisition it will be applied to.

        Raises:
            MissingModelError: If the file is absent and training is disabled
            ReuseKeyMismatchError: If the stored model was trained for another acquisition
        """
        path = self.path_for(job)
        if path in self._cache:
            model = self._cache[path]
        elif path.exists():
            model = load_model(path)
        elif self.train_missing:
            model = self.train_job(job)
        else:
            raise MissingModelError(f"Missing {job.role} model: {path}", paths=[path], indices=list(job.indices))

        if acquisition is not None:
            check_reuse(model, job.reuse_key(acquisition), source=str(path))
        self._cache[path] = model
        return model

    def denoiser(self, acquisition: AcquisitionConfig) -> TrainedModel:
        return self.get(denoiser_job(acquisition.n_pulses), acquisition)

    def hpc_models(
        self,
        regime: Regime,
        acquisition: AcquisitionConfig,
        index_range: Optional[Tuple[int, int]] = None,
    ) -> List[TrainedModel]:
        """
        HPC models covering the index range of a regime.

        Raises:
            MissingModelError: Listing every absent file and the indices left uncovered
        """
        jobs = [hpc_job(self.config, regime, group) for group in self.config.model_groups(regime, index_range)]
        missing = [job for job in jobs if not self.path_for(job).exists() and self.path_for(job) not in self._cache]
        if missing and not self.train_missing:
            paths = [self.path_for(job) for job in missing]
            uncovered = sorted({i for job in missing for i in job.indices})
            listed = ", ".join(str(p) for p in paths)
            raise MissingModelError(
                f"Missing {regime.value} HPC models for indices {uncovered[0]}-{uncovered[-1]}: {listed}",
                paths=paths, indices=uncovered,
            )
        if missing:
            per_model = self.config.datasets.samples_per_class * self.config.datasets.classes
            logger.warning(
                f"{len(missing)} of {len(jobs)} {regime.value} HPC models are missing and will be trained now "
                f"({per_model:,} samples each, {len(missing) * per_model:,} in all); "
                f"`spindetect train --role hpc --regime {regime.value}` builds them ahead of detection"
            )
        return [self.get(job, acquisition) for job in jobs]

    def regression(self, regime: Regime, tp_index: int, acquisition: AcquisitionConfig) -> TrainedModel:
        return self.get(regression_job(self.config, regime, tp_index), acquisition)

    def dip_count(self, regime: Regime, index_range: Tuple[int, int], acquisition: AcquisitionConfig) -> TrainedModel:
        return self.get(dip_count_job(self.config, regime, index_range), acquisition)
