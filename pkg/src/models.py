"""
Pydantic data models for the CPMG nuclear-spin detection pipeline.

All hyperfine quantities are stored as frequency/2π in Hz and all times in
seconds; conversion to angular units happens inside the math only.
"""

import math
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator

# 13C gyromagnetic ratio / 2π
GAMMA_13C_HZ_PER_T = 10.7084e6


class TraceKind(str, Enum):
    PURE = "pure"
    DECOHERED = "decohered"
    NOISY = "noisy"
    DENOISED = "denoised"
    RECOVERED = "recovered"


class Regime(str, Enum):
    """HPC evaluation regimes (pulse count and transverse-coupling band)."""
    N32_HIGH_B = "n32_high_b"
    N32_LOW_B = "n32_low_b"
    N256 = "n256"


class Interp(str, Enum):
    NEAREST = "nearest"
    LINEAR = "linear"


def larmor_from_field(field_gauss: float) -> float:
    """13C Larmor frequency (Hz) for a field given in gauss."""
    return float(field_gauss) * 1e-4 * GAMMA_13C_HZ_PER_T


class SpinParams(BaseModel):
    """One nuclear spin's hyperfine pair."""
    model_config = ConfigDict(frozen=True)

    a_hz: float = Field(..., description="Longitudinal hyperfine coupling A/2π (Hz)")
    b_hz: float = Field(..., ge=0.0, description="Transverse hyperfine coupling B/2π (Hz)")

    @classmethod
    def from_signed(cls, a_hz: float, b_hz: float) -> "SpinParams":
        """Build from a possibly negative B; only |B| is observable."""
        return cls(a_hz=float(a_hz), b_hz=abs(float(b_hz)))

    @property
    def omega_h_hz(self) -> float:
        return math.hypot(self.a_hz, self.b_hz)

    def omega_tilde_hz(self, larmor_hz: float) -> float:
        return math.hypot(self.a_hz + larmor_hz, self.b_hz)

    def m_z(self, larmor_hz: float) -> float:
        w = self.omega_tilde_hz(larmor_hz)
        return (self.a_hz + larmor_hz) / w if w > 0 else 1.0

    def m_x(self, larmor_hz: float) -> float:
        w = self.omega_tilde_hz(larmor_hz)
        return self.b_hz / w if w > 0 else 0.0


class AcquisitionConfig(BaseModel):
    """Pulse count, Larmor frequency and the τ grid of one CPMG measurement."""
    model_config = ConfigDict(frozen=True)

    n_pulses: int = Field(..., gt=0, description="Number of CPMG unit repetitions N")
    larmor_hz: float = Field(..., gt=0.0, description="ω_L/2π in Hz")
    tau_start_s: float = Field(0.0, ge=0.0)
    tau_end_s: float = Field(..., gt=0.0)
    tau_step_s: float = Field(4e-9, gt=0.0, description="Time resolution t_r")
    field_gauss: Optional[float] = Field(None, description="External field B_z, if larmor_hz was derived from it")

    @model_validator(mode="before")
    @classmethod
    def _derive_larmor(cls, data):
        if isinstance(data, dict) and data.get("larmor_hz") is None and data.get("field_gauss") is not None:
            data = dict(data)
            data["larmor_hz"] = larmor_from_field(data["field_gauss"])
        return data

    @model_validator(mode="after")
    def _check_grid(self) -> "AcquisitionConfig":
        if self.tau_end_s <= self.tau_start_s:
            raise ValueError(
                f"tau_end_s ({self.tau_end_s}) must be larger than tau_start_s ({self.tau_start_s})"
            )
        return self

    @property
    def n_points(self) -> int:
        return int(math.floor((self.tau_end_s - self.tau_start_s) / self.tau_step_s + 1e-6)) + 1

    @property
    def total_length_s(self) -> float:
        return (self.n_points - 1) * self.tau_step_s

    def tau_grid(self) -> np.ndarray:
        return self.tau_start_s + np.arange(self.n_points, dtype=np.float64) * self.tau_step_s


def _frozen_array(value, dtype=np.float64) -> np.ndarray:
    arr = np.array(value, dtype=dtype)
    arr.setflags(write=False)
    return arr


class Trace(BaseModel):
    """A 1D coherence trace P_x(τ) with provenance."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    config: AcquisitionConfig
    values: np.ndarray
    kind: TraceKind
    low_confidence: Optional[np.ndarray] = Field(
        None, description="Points passed through unscaled during decoherence recovery"
    )

    @field_validator("values", mode="before")
    @classmethod
    def _freeze_values(cls, v):
        return _frozen_array(v)

    @field_validator("low_confidence", mode="before")
    @classmethod
    def _freeze_flags(cls, v):
        return None if v is None else _frozen_array(v, dtype=bool)

    @model_validator(mode="after")
    def _check_shape(self) -> "Trace":
        if self.values.ndim != 1 or self.values.shape[0] != self.config.n_points:
            raise ValueError(
                f"Trace has {self.values.shape} values but the τ grid has {self.config.n_points} points"
            )
        if self.kind == TraceKind.PURE and self.values.size and (
            self.values.min() < 0.0 or self.values.max() > 1.0
        ):
            raise ValueError("Pure traces must lie within [0, 1]")
        if self.low_confidence is not None and self.low_confidence.shape != self.values.shape:
            raise ValueError("low_confidence mask must match the trace length")
        return self

    @property
    def tau(self) -> np.ndarray:
        return self.config.tau_grid()

    def derive(self, values: np.ndarray, kind: TraceKind, low_confidence: Optional[np.ndarray] = None) -> "Trace":
        """New trace on the same grid."""
        return Trace(config=self.config, values=values, kind=kind, low_confidence=low_confidence)


class DecoherenceParams(BaseModel):
    """Electron dephasing envelope exp(-(τ/T)^n); T = +inf means no decay."""
    model_config = ConfigDict(frozen=True)

    t_s: float = Field(..., gt=0.0)
    n_exp: float = Field(..., gt=0.0)

    @property
    def is_sentinel(self) -> bool:
        return math.isinf(self.t_s)


class PeriodDictionary(BaseModel):
    """Target periods on a regular A grid at fixed reference B."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    larmor_hz: float = Field(..., gt=0.0)
    a_step_hz: float = Field(50.0, gt=0.0)
    b_ref_hz: float = Field(10_000.0, ge=0.0)
    a_hz: np.ndarray
    tp_s: np.ndarray

    @field_validator("a_hz", "tp_s", mode="before")
    @classmethod
    def _freeze(cls, v):
        return _frozen_array(v)

    @model_validator(mode="after")
    def _check_grid(self) -> "PeriodDictionary":
        if self.a_hz.shape != self.tp_s.shape or self.a_hz.ndim != 1 or self.a_hz.size == 0:
            raise ValueError("a_hz and tp_s must be non-empty 1D arrays of equal length")
        if self.a_hz.size > 1:
            steps = np.diff(self.a_hz)
            if not np.allclose(steps, self.a_step_hz, rtol=0.0, atol=1e-6):
                raise ValueError("Consecutive A values must differ by exactly a_step_hz")
            if np.any(np.diff(self.tp_s) >= 0):
                raise ValueError("Target periods must strictly decrease with A")
        return self

    def __len__(self) -> int:
        return int(self.a_hz.size)

    @property
    def a_min_hz(self) -> float:
        return float(self.a_hz[0])

    def index_of_a(self, a_hz: float) -> int:
        return int(round((a_hz - self.a_min_hz) / self.a_step_hz))

    def nearest_index(self, tp_s: float) -> int:
        return int(np.argmin(np.abs(self.tp_s - tp_s)))

    def tp_at(self, index: int) -> float:
        if not 0 <= index < len(self):
            raise IndexError(f"Dictionary index {index} outside [0, {len(self) - 1}]")
        return float(self.tp_s[index])

    def entries(self) -> List[Tuple[int, float, float]]:
        return [(i, float(a), float(tp)) for i, (a, tp) in enumerate(zip(self.a_hz, self.tp_s))]


class PeriodImage(BaseModel):
    """Trace sliced at a candidate period and stacked into rows."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    pixels: np.ndarray
    tp_s: float
    width_s: float
    origin_s: float
    pixel_pitch_s: float
    interp: Interp = Interp.LINEAR

    @field_validator("pixels", mode="before")
    @classmethod
    def _freeze_pixels(cls, v):
        return _frozen_array(v)

    @model_validator(mode="after")
    def _check_pixels(self) -> "PeriodImage":
        if self.pixels.ndim != 2:
            raise ValueError(f"PeriodImage pixels must be 2D, got shape {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("PeriodImage pixels must lie within [0, 1]")
        if not math.isclose(self.pixels.shape[1] * self.pixel_pitch_s, self.width_s, rel_tol=1e-9):
            raise ValueError("Image width must equal columns × pixel pitch")
        return self

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape


class DftEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    a_hz: float
    b_hz: float
    omega_h_hz: float
    line_number: int = 0

    def as_spin(self) -> SpinParams:
        return SpinParams.from_signed(self.a_hz, self.b_hz)


class DftGroup(BaseModel):
    group_id: str
    entries: List[DftEntry]


class DftTable(BaseModel):
    """Strong-coupling hyperfine pairs grouped by target period."""
    groups: List[DftGroup]

    def rows(self) -> List[DftEntry]:
        return [entry for group in self.groups for entry in group.entries]

    def group(self, group_id: str) -> DftGroup:
        for group in self.groups:
            if group.group_id == group_id:
                return group
        raise KeyError(f"Unknown DFT group: {group_id}")

    def __len__(self) -> int:
        return sum(len(group.entries) for group in self.groups)


# Target periods carried by one HPC model
REGIME_TARGET_COUNT = {Regime.N32_HIGH_B: 5, Regime.N32_LOW_B: 5, Regime.N256: 3}


class HpcDatasetSpec(BaseModel):
    """Everything needed to generate training samples for one regime model."""
    model_config = ConfigDict(frozen=True)

    regime: Regime
    target_period_indices: List[int]
    classes: int = Field(3, ge=2)
    samples_per_class: int = Field(4000, gt=0)
    spin_count_range: Tuple[int, int] = (26, 32)
    dft_fraction_range: Tuple[float, float] = (0.0, 0.1)
    a_range_hz: Tuple[float, float] = (-50_000.0, 50_000.0)
    b_range_hz: Tuple[float, float]
    target_b_range_hz: Tuple[float, float]
    resolution_hz: float = Field(..., gt=0.0)
    acquisition: AcquisitionConfig
    dictionary_a_range_hz: Tuple[float, float] = (-50_000.0, 50_000.0)
    dictionary_a_step_hz: float = 50.0
    dictionary_b_ref_hz: float = 10_000.0
    noise_sigma: float = Field(0.05, ge=0.0)
    noise_clip: float = Field(0.05, gt=0.0)
    decoherence: Optional[DecoherenceParams] = None
    n_slices: int = Field(33, gt=0)
    image_width_s: Optional[float] = None
    interp: Interp = Interp.LINEAR
    dft_group: Optional[str] = Field(None, description="Strong-coupling DFT group used as target instead of dictionary periods")

    @model_validator(mode="after")
    def _check_regime(self) -> "HpcDatasetSpec":
        expected = 0 if self.dft_group else REGIME_TARGET_COUNT[self.regime]
        if len(self.target_period_indices) != expected:
            raise ValueError(
                f"{self.regime.value} models carry {expected} target periods, "
                f"got {len(self.target_period_indices)}"
            )
        lo, hi = self.spin_count_range
        if not 0 < lo <= hi:
            raise ValueError(f"Invalid spin_count_range {self.spin_count_range}")
        f_lo, f_hi = self.dft_fraction_range
        if not 0.0 <= f_lo <= f_hi <= 1.0:
            raise ValueError(f"Invalid dft_fraction_range {self.dft_fraction_range}")
        return self


class DenoiserDatasetSpec(BaseModel):
    """Scene, window and corruption ranges of denoiser training pairs."""
    model_config = ConfigDict(frozen=True)

    acquisition: AcquisitionConfig
    window: int = Field(3000, ge=1000, le=3000)
    samples: int = Field(2000, gt=0)
    spin_count_range: Tuple[int, int] = (26, 32)
    dft_fraction_range: Tuple[float, float] = (0.0, 0.1)
    a_range_hz: Tuple[float, float] = (-50_000.0, 50_000.0)
    b_range_hz: Tuple[float, float] = (2_000.0, 80_000.0)
    noise_sigma: float = Field(0.05, ge=0.0)
    noise_clip: float = Field(0.05, gt=0.0)
    decoherence_t_range_s: Optional[Tuple[float, float]] = (60e-6, 200e-6)
    decoherence_n_range: Tuple[float, float] = (1.0, 3.0)

    @model_validator(mode="after")
    def _check_window(self) -> "DenoiserDatasetSpec":
        if self.window > self.acquisition.n_points:
            raise ValueError(
                f"Denoiser window of {self.window} points exceeds the {self.acquisition.n_points}-point τ grid"
            )
        return self


class SampleMeta(BaseModel):
    """Provenance of a generated sample; regenerating with the same seed reproduces it."""
    spins: List[SpinParams]
    seed: int
    class_id: Optional[int] = None
    tp_index: Optional[int] = None
    extra: Dict[str, float] = Field(default_factory=dict)


class LabeledSample(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    input: np.ndarray
    label: np.ndarray
    meta: SampleMeta


class LayerKind(str, Enum):
    DENSE = "dense"
    BATCH_NORM = "batch_norm_1d"
    LEAKY_RELU = "leaky_relu"
    SIGMOID = "sigmoid"
    CONV1D = "conv1d"
    TRANSPOSED_CONV1D = "transposed_conv1d"
    MAX_POOL1D = "max_pool1d"


class LayerSpec(BaseModel):
    """Declarative description of one network layer."""
    model_config = ConfigDict(frozen=True)

    kind: LayerKind
    in_features: Optional[int] = None
    out_features: Optional[int] = None
    num_features: Optional[int] = None
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    kernel_size: int = 4
    stride: int = 1
    padding: Tuple[int, int] = (0, 0)
    pool_size: int = 2
    slope: float = 0.01
    eps: float = 1e-5
    momentum: float = 0.1


class LossKind(str, Enum):
    BCE = "binary_cross_entropy"
    MSE = "mean_squared_error"


class OptimizerKind(str, Enum):
    ADABOUND = "adabound"
    ADAM = "adam"


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    loss: LossKind = LossKind.BCE
    lr_initial: float = Field(1.5e-4, ge=0.0)
    lr_decay_per_epoch: float = Field(0.25, ge=0.25, le=0.5)
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(64, gt=0)
    seed: int = 0
    optimizer: OptimizerKind = OptimizerKind.ADABOUND
    final_lr: float = Field(0.1, ge=0.0)
    bound_gamma: float = Field(1e-3, gt=0.0)

    def lr_for_epoch(self, epoch: int) -> float:
        return self.lr_initial * (1.0 - self.lr_decay_per_epoch) ** epoch


class ReuseKey(BaseModel):
    """Acquisition settings a trained model is only valid for."""
    model_config = ConfigDict(frozen=True)

    role: str
    n_pulses: int
    tau_step_s: float
    field_gauss: Optional[float] = None
    total_length_s: Optional[float] = None


class ConfidenceCurve(BaseModel):
    """'Target present' score per dictionary index for one regime."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    regime: Regime
    indices: np.ndarray
    a_hz: np.ndarray
    scores: np.ndarray

    @field_validator("indices", mode="before")
    @classmethod
    def _freeze_indices(cls, v):
        return _frozen_array(v, dtype=np.int64)

    @field_validator("a_hz", "scores", mode="before")
    @classmethod
    def _freeze_values(cls, v):
        return _frozen_array(v)

    @model_validator(mode="after")
    def _check(self) -> "ConfidenceCurve":
        if not (self.indices.shape == self.a_hz.shape == self.scores.shape):
            raise ValueError("indices, a_hz and scores must have equal length")
        if self.scores.size and (self.scores.min() < 0.0 or self.scores.max() > 1.0):
            raise ValueError("Confidence scores must lie within [0, 1]")
        return self

    def score_at(self, index: int) -> float:
        pos = np.searchsorted(self.indices, index)
        if pos >= self.indices.size or self.indices[pos] != index:
            raise KeyError(f"Index {index} not covered by the {self.regime.value} curve")
        return float(self.scores[pos])


class PeakParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    height: float = Field(0.9, ge=0.0)
    distance: float = Field(4, ge=1.0)
    width: float = Field(2, ge=0.0)
    prominence: float = Field(0.5, ge=0.0)


class DetectedSpin(BaseModel):
    """One spin in the detection report."""
    a_hz: float
    b_hz: float = Field(..., ge=0.0)
    sigma_a_hz: float = Field(0.0, ge=0.0)
    sigma_b_hz: float = Field(0.0, ge=0.0)
    confidence_n32: Optional[float] = None
    confidence_n256: Optional[float] = None
    group_tag: str = "normal"
    regime: Regime
    tp_index: int
    flagged: bool = False
    diagnostics: List[str] = Field(default_factory=list)

    @property
    def is_broad_dip(self) -> bool:
        return self.group_tag != "normal"

    def as_spin(self) -> SpinParams:
        return SpinParams(a_hz=self.a_hz, b_hz=self.b_hz)


class DetectionReport(BaseModel):
    """Ordered list of detected spins plus fit summary."""
    schema_version: str = "1"
    spins: List[DetectedSpin] = Field(default_factory=list)
    fit_loss_final: float = 0.0
    iterations: int = 0
    regimes: List[Regime] = Field(default_factory=list)

    @computed_field
    @property
    def summary_total(self) -> int:
        """Spin count with every broad-dip group collapsed to one."""
        normal = sum(1 for spin in self.spins if not spin.is_broad_dip)
        groups = {spin.group_tag for spin in self.spins if spin.is_broad_dip}
        return normal + len(groups)
