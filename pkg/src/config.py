"""
Run configuration for spindetect.

Every knob of the pipeline lives in one YAML file (templates/run_config.yaml by
default) validated into RunConfig. Command-line flags override file values and
the SPINDETECT_RUN_DIR / SPINDETECT_WORKERS environment variables (optionally
loaded from a .env file) override the run root and the worker count.
"""

import logging
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, model_validator

from .imaging import crop_width_for
from .models import (
    AcquisitionConfig,
    DecoherenceParams,
    DenoiserDatasetSpec,
    HpcDatasetSpec,
    Interp,
    LossKind,
    PeakParams,
    Regime,
    TrainConfig,
)

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = Path("templates/run_config.yaml")
ENV_RUN_DIR = "SPINDETECT_RUN_DIR"
ENV_WORKERS = "SPINDETECT_WORKERS"


class ConfigError(Exception):
    """Custom exception for invalid or unreadable run configuration."""
    pass


class RegimeProfile(BaseModel):
    """Pulse count, coupling bands and thresholds of one HPC regime."""
    regime: Regime
    n_pulses: int = Field(..., gt=0)
    b_range_hz: Tuple[float, float]
    target_b_range_hz: Tuple[float, float]
    regression_b_range_hz: Tuple[float, float]
    resolution_hz: float = Field(..., gt=0.0)
    peak_height: float = Field(..., ge=0.0, le=1.0)
    periods_per_model: int = Field(..., gt=0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "RegimeProfile":
        for name in ("b_range_hz", "target_b_range_hz", "regression_b_range_hz"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo < hi:
                raise ValueError(f"{self.regime.value}: {name} must satisfy 0 <= low < high, got {(lo, hi)}")
        return self


def default_regime_profiles() -> Dict[Regime, RegimeProfile]:
    return {
        Regime.N32_HIGH_B: RegimeProfile(
            regime=Regime.N32_HIGH_B, n_pulses=32,
            b_range_hz=(6e3, 80e3), target_b_range_hz=(12e3, 80e3), regression_b_range_hz=(10e3, 70e3),
            resolution_hz=200.0, peak_height=0.9, periods_per_model=5,
        ),
        Regime.N32_LOW_B: RegimeProfile(
            regime=Regime.N32_LOW_B, n_pulses=32,
            b_range_hz=(6e3, 80e3), target_b_range_hz=(6e3, 12e3), regression_b_range_hz=(6e3, 12e3),
            resolution_hz=500.0, peak_height=0.75, periods_per_model=5,
        ),
        Regime.N256: RegimeProfile(
            regime=Regime.N256, n_pulses=256,
            b_range_hz=(2e3, 20e3), target_b_range_hz=(2e3, 20e3), regression_b_range_hz=(2e3, 20e3),
            resolution_hz=150.0, peak_height=0.9, periods_per_model=3,
        ),
    }


class AcquisitionSettings(BaseModel):
    field_gauss: float = Field(403.553, gt=0.0)
    tau_start_s: float = Field(0.0, ge=0.0)
    tau_end_s: float = Field(45e-6, gt=0.0)
    tau_step_s: float = Field(4e-9, gt=0.0)

    def for_pulses(self, n_pulses: int) -> AcquisitionConfig:
        return AcquisitionConfig(
            n_pulses=n_pulses,
            field_gauss=self.field_gauss,
            tau_start_s=self.tau_start_s,
            tau_end_s=self.tau_end_s,
            tau_step_s=self.tau_step_s,
        )


class DictionarySettings(BaseModel):
    a_min_hz: float = -50_000.0
    a_max_hz: float = 50_000.0
    a_step_hz: float = Field(50.0, gt=0.0)
    b_ref_hz: float = Field(10_000.0, ge=0.0)


class ImagingSettings(BaseModel):
    n_slices: int = Field(33, gt=0)
    wide_width_s: float = Field(100e-9, gt=0.0)
    narrow_width_s: float = Field(60e-9, gt=0.0)
    narrow_below_hz: float = Field(10_000.0, ge=0.0)
    interp: Interp = Interp.LINEAR


class NoiseSettings(BaseModel):
    sigma: float = Field(0.05, ge=0.0)
    clip: float = Field(0.05, gt=0.0)
    envelope_floor: float = Field(0.05, gt=0.0, lt=1.0)
    decoherence_t_range_s: Tuple[float, float] = (60e-6, 200e-6)
    decoherence_n_range: Tuple[float, float] = (1.0, 3.0)
    with_decoherence: bool = True

    def typical_decoherence(self) -> DecoherenceParams:
        lo_t, hi_t = self.decoherence_t_range_s
        lo_n, hi_n = self.decoherence_n_range
        return DecoherenceParams(t_s=0.5 * (lo_t + hi_t), n_exp=0.5 * (lo_n + hi_n))


class DatasetSettings(BaseModel):
    samples_per_class: int = Field(4000, gt=0)
    classes: int = Field(3, ge=2)
    spin_count_range: Tuple[int, int] = (26, 32)
    dft_fraction_range: Tuple[float, float] = (0.0, 0.1)
    dft_table: Path = Path("data/dft_hyperfine_table.tsv")
    denoiser_window: int = Field(3000, ge=1000, le=3000)
    denoiser_samples: int = Field(2000, gt=0)
    regression_samples: int = Field(1500, gt=0)
    dip_count_samples_per_class: int = Field(400, gt=0)
    dip_count_classes: int = Field(5, ge=2)
    hpc_noise_sigma: float = Field(0.02, ge=0.0)
    validation_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    shard_size: int = Field(1000, gt=0)


class NetworkSettings(BaseModel):
    hpc_hidden: List[int] = Field(default_factory=lambda: [1024, 512, 256])
    regression_hidden: List[int] = Field(default_factory=lambda: [512, 256])
    dip_count_hidden: List[int] = Field(default_factory=lambda: [512, 256])
    denoiser_channels: List[int] = Field(default_factory=lambda: [16, 32, 64])
    leaky_slope: float = Field(0.01, ge=0.0)


class TrainingSettings(BaseModel):
    hpc: TrainConfig = Field(default_factory=lambda: TrainConfig(loss=LossKind.BCE))
    dip_count: TrainConfig = Field(default_factory=lambda: TrainConfig(loss=LossKind.BCE, epochs=10))
    regression: TrainConfig = Field(default_factory=lambda: TrainConfig(loss=LossKind.MSE, epochs=10))
    denoiser: TrainConfig = Field(
        default_factory=lambda: TrainConfig(loss=LossKind.MSE, lr_initial=1e-3, epochs=15, batch_size=32)
    )


class DetectionSettings(BaseModel):
    regimes: List[Regime] = Field(default_factory=lambda: [Regime.N32_HIGH_B, Regime.N32_LOW_B, Regime.N256])
    index_range: Optional[Tuple[int, int]] = None
    peak_distance: float = 4
    peak_width: float = 2
    peak_prominence: float = 0.5
    broad_dip_min_run: int = Field(5, ge=2)
    indices_per_spin: int = Field(4, ge=1)
    merge_radius: int = Field(10, ge=0)
    n256_match_radius: int = Field(2, ge=0)
    fit_on: Literal["recovered", "raw"] = "recovered"
    use_denoiser: bool = True
    train_missing: bool = True

    def peak_params(self, height: float) -> PeakParams:
        return PeakParams(
            height=height, distance=self.peak_distance, width=self.peak_width, prominence=self.peak_prominence
        )


class FineTuneSettings(BaseModel):
    n_particles: int = Field(9, gt=0)
    delta_b_hz: float = Field(5_000.0, ge=0.0)
    window_half: int = Field(10, ge=1)
    min_dip_depth: float = Field(0.02, gt=0.0)
    tol_rel: float = Field(1e-4, gt=0.0)
    max_passes: int = Field(10, gt=0)
    max_iter: int = Field(50, gt=0)
    uncertainty_repeats: int = Field(50, ge=0)
    jitter_a_hz: float = Field(200.0, ge=0.0)
    jitter_b_hz: float = Field(1_000.0, ge=0.0)
    bath_reference: Literal["none", "dft_weak"] = "none"
    bath_threshold: float = Field(0.9, gt=0.0, lt=1.0)
    bath_mask_ranges_s: List[Tuple[float, float]] = Field(default_factory=list)


class RunConfig(BaseModel):
    """Effective configuration of one spindetect command."""
    seed: int = 0
    run_root: Path = Path("runs")
    models_dir: Path = Path("models")
    workers: Optional[int] = Field(None, gt=0)
    acquisition: AcquisitionSettings = Field(default_factory=AcquisitionSettings)
    dictionary: DictionarySettings = Field(default_factory=DictionarySettings)
    imaging: ImagingSettings = Field(default_factory=ImagingSettings)
    noise: NoiseSettings = Field(default_factory=NoiseSettings)
    regimes: Dict[Regime, RegimeProfile] = Field(default_factory=default_regime_profiles)
    datasets: DatasetSettings = Field(default_factory=DatasetSettings)
    networks: NetworkSettings = Field(default_factory=NetworkSettings)
    training: TrainingSettings = Field(default_factory=TrainingSettings)
    detection: DetectionSettings = Field(default_factory=DetectionSettings)
    fine_tune: FineTuneSettings = Field(default_factory=FineTuneSettings)

    def acquisition_for(self, regime: Regime) -> AcquisitionConfig:
        return self.acquisition.for_pulses(self.regimes[regime].n_pulses)

    def image_width_for(self, a_hz: float) -> float:
        img = self.imaging
        return crop_width_for(a_hz, img.wide_width_s, img.narrow_width_s, img.narrow_below_hz)

    def hpc_spec(
        self,
        regime: Regime,
        target_period_indices: List[int],
        dft_group: Optional[str] = None,
    ) -> HpcDatasetSpec:
        """
        Dataset spec of the HPC model owning the given target periods.

        HPC inputs are slices of recovered traces, so training scenes carry
        residual noise but no decoherence envelope.
        """
        profile = self.regimes[regime]
        indices = [] if dft_group else list(target_period_indices)
        anchor_a = self.dictionary.a_min_hz + indices[0] * self.dictionary.a_step_hz if indices else 0.0
        return HpcDatasetSpec(
            dft_group=dft_group,
            image_width_s=self.image_width_for(anchor_a) if indices else self.imaging.wide_width_s,
            regime=regime,
            target_period_indices=indices,
            classes=self.datasets.classes,
            samples_per_class=self.datasets.samples_per_class,
            spin_count_range=self.datasets.spin_count_range,
            dft_fraction_range=self.datasets.dft_fraction_range,
            a_range_hz=(self.dictionary.a_min_hz, self.dictionary.a_max_hz),
            b_range_hz=profile.b_range_hz,
            target_b_range_hz=profile.target_b_range_hz,
            resolution_hz=profile.resolution_hz,
            acquisition=self.acquisition_for(regime),
            dictionary_a_range_hz=(self.dictionary.a_min_hz, self.dictionary.a_max_hz),
            dictionary_a_step_hz=self.dictionary.a_step_hz,
            dictionary_b_ref_hz=self.dictionary.b_ref_hz,
            noise_sigma=self.datasets.hpc_noise_sigma,
            noise_clip=self.noise.clip,
            decoherence=None,
            n_slices=self.imaging.n_slices,
            interp=self.imaging.interp,
        )

    def denoiser_spec(self, n_pulses: int) -> DenoiserDatasetSpec:
        noise = self.noise
        return DenoiserDatasetSpec(
            acquisition=self.acquisition.for_pulses(n_pulses),
            window=self.datasets.denoiser_window,
            samples=self.datasets.denoiser_samples,
            spin_count_range=self.datasets.spin_count_range,
            dft_fraction_range=self.datasets.dft_fraction_range,
            a_range_hz=(self.dictionary.a_min_hz, self.dictionary.a_max_hz),
            b_range_hz=(2_000.0, 80_000.0) if n_pulses <= 32 else (2_000.0, 20_000.0),
            noise_sigma=noise.sigma,
            noise_clip=noise.clip,
            decoherence_t_range_s=noise.decoherence_t_range_s if noise.with_decoherence else None,
            decoherence_n_range=noise.decoherence_n_range,
        )

    def model_groups(self, regime: Regime, index_range: Optional[Tuple[int, int]] = None) -> List[List[int]]:
        """Consecutive dictionary indices partitioned into per-model target groups."""
        count = int((self.dictionary.a_max_hz - self.dictionary.a_min_hz) / self.dictionary.a_step_hz + 1e-6) + 1
        lo, hi = index_range if index_range is not None else (0, count - 1)
        if not 0 <= lo <= hi < count:
            raise ConfigError(f"Index range {(lo, hi)} outside the dictionary [0, {count - 1}]")
        size = self.regimes[regime].periods_per_model
        start = (lo // size) * size
        groups = []
        for first in range(start, hi + 1, size):
            group = [i for i in range(first, first + size) if i < count]
            if len(group) < size:
                group = list(range(count - size, count))
            groups.append(group)
        return groups


def load_run_config(config_path: Optional[Path] = None) -> RunConfig:
    """
    Load the run configuration from YAML.

    Args:
        config_path: Path to a YAML file; the packaged default is used when None

    Returns:
        Validated RunConfig with environment overrides applied

    Raises:
        ConfigError: If the file is missing, unparsable or invalid
    """
    path = Path(config_path) if config_path is not None else DEFAULT_CONFIG_PATH

    if not path.exists():
        if config_path is None:
            logger.info(f"No configuration at {path}, using built-in defaults")
            return apply_env_overrides(RunConfig())
        raise ConfigError(f"Configuration file not found: {path}")

    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Failed to parse YAML configuration {path}: {e}")

    try:
        config = RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration in {path}: {e}")

    logger.debug(f"Loaded configuration from {path}")
    return apply_env_overrides(config)


def apply_env_overrides(config: RunConfig) -> RunConfig:
    """Apply SPINDETECT_RUN_DIR and SPINDETECT_WORKERS from the environment (.env included)."""
    load_dotenv()
    updates = {}

    run_dir = os.getenv(ENV_RUN_DIR)
    if run_dir:
        updates["run_root"] = Path(run_dir)

    workers = os.getenv(ENV_WORKERS)
    if workers:
        try:
            count = int(workers)
        except ValueError:
            raise ConfigError(f"{ENV_WORKERS} must be a positive integer, got '{workers}'")
        if count <= 0:
            raise ConfigError(f"{ENV_WORKERS} must be a positive integer, got {count}")
        updates["workers"] = count

    return config.model_copy(update=updates) if updates else config


def apply_overrides(config: RunConfig, overrides: Dict[str, object]) -> RunConfig:
    """
    Apply dotted-key overrides such as {"fine_tune.max_passes": 3}.

    Raises:
        ConfigError: If a key does not exist or the value is invalid
    """
    data = config.model_dump(mode="json")
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"Unknown configuration key: {dotted}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"Unknown configuration key: {dotted}")
        node[parts[-1]] = value

    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration override: {e}")


def dump_run_config(config: RunConfig, path: Path) -> Path:
    """Echo the effective configuration as YAML."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.model_dump(mode="json"), f, sort_keys=False)
    return path


def resolve_workers(config: RunConfig) -> int:
    return config.workers or os.cpu_count() or 1
