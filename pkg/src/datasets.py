"""
Labeled sample generation for the denoiser, the HPC classifiers, the broad-dip
counting classifiers and the regression models, plus the DFT table loader.

Every sample is a pure function of (spec, seed): re-running a maker with the
seed stored in its meta reproduces input and label byte for byte.
"""

import logging
import math
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .imaging import (
    crop_width_for,
    build_period_dictionary,
    required_grid_indices,
    slice_geometry,
    stack_from_samples,
)
from .models import (
    DecoherenceParams,
    DenoiserDatasetSpec,
    DftEntry,
    DftGroup,
    DftTable,
    HpcDatasetSpec,
    LabeledSample,
    PeriodDictionary,
    PeriodImage,
    SampleMeta,
    SpinParams,
)
from .spinmodel import (
    SeedLike,
    contour_a_for,
    decoherence_envelope,
    make_rng,
    signal_at,
    truncated_noise,
)

logger = logging.getLogger(__name__)

DFT_COLUMNS = ["group_id", "a_hz", "b_hz", "omega_h_hz"]
OMEGA_H_TOLERANCE = 0.01


class DatasetError(Exception):
    """Custom exception for dataset generation and DFT table errors."""
    pass


# ---------------------------------------------------------------------------
# DFT table
# ---------------------------------------------------------------------------

def load_dft_table(path: Path) -> DftTable:
    """
    Load the strong-coupling DFT hyperfine table.

    The file is tab separated with header `group_id a_hz b_hz omega_h_hz`,
    preceded by comment lines; a `# rows: N` comment declares the row count.

    Args:
        path: Path of the TSV file

    Returns:
        DftTable with groups in file order

    Raises:
        DatasetError: If the file is missing, empty, malformed (with line number)
            or its row count differs from the declared one
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"DFT table not found: {path}")

    declared = None
    comment_lines = 0
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.startswith("#"):
                break
            comment_lines += 1
            key, _, value = line[1:].strip().partition(":")
            if key.strip() == "rows":
                declared = int(value)

    try:
        frame = pd.read_csv(path, sep="\t", comment="#", dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise DatasetError(f"DFT table {path} is empty")

    if frame.empty:
        raise DatasetError(f"DFT table {path} has no rows")
    if list(frame.columns) != DFT_COLUMNS:
        raise DatasetError(f"DFT table {path} must have columns {DFT_COLUMNS}, got {list(frame.columns)}")

    numeric = frame[DFT_COLUMNS[1:]].apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1) | (frame["group_id"].str.strip() == "")
    if bad.any():
        first = int(np.nonzero(bad.to_numpy())[0][0])
        line_number = comment_lines + 2 + first
        raise DatasetError(f"Malformed DFT row at {path}:{line_number}: {'|'.join(frame.iloc[first])}")

    if declared is not None and declared != len(frame):
        raise DatasetError(f"DFT table {path} declares {declared} rows but contains {len(frame)}")

    omega = np.hypot(numeric["a_hz"].to_numpy(), numeric["b_hz"].to_numpy())
    listed = numeric["omega_h_hz"].to_numpy()
    mismatch = np.abs(omega - listed) > OMEGA_H_TOLERANCE * np.abs(listed)
    if mismatch.any():
        lines = [comment_lines + 2 + int(i) for i in np.nonzero(mismatch)[0]]
        logger.warning(f"ω_h differs from sqrt(A² + B²) by more than 1% on lines {lines} of {path}")

    groups: List[DftGroup] = []
    for i, (group_id, row) in enumerate(zip(frame["group_id"], numeric.itertuples(index=False))):
        entry = DftEntry(
            a_hz=float(row.a_hz), b_hz=float(row.b_hz), omega_h_hz=float(row.omega_h_hz),
            line_number=comment_lines + 2 + i,
        )
        if not groups or groups[-1].group_id != group_id:
            groups.append(DftGroup(group_id=group_id, entries=[]))
        groups[-1].entries.append(entry)

    logger.info(f"Loaded {len(frame)} DFT rows in {len(groups)} groups from {path}")
    return DftTable(groups=groups)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def sample_seed(base_seed: int, *keys: int) -> int:
    """Independent 64-bit seed for one sample of a dataset."""
    state = np.random.SeedSequence([base_seed, *keys]).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


@lru_cache(maxsize=32)
def _cached_dictionary(larmor_hz: float, a_min: float, a_max: float, step: float, b_ref: float) -> PeriodDictionary:
    return build_period_dictionary(larmor_hz, a_min, a_max, step, b_ref)


def dictionary_for(spec: HpcDatasetSpec) -> PeriodDictionary:
    a_min, a_max = spec.dictionary_a_range_hz
    return _cached_dictionary(
        spec.acquisition.larmor_hz, a_min, a_max, spec.dictionary_a_step_hz, spec.dictionary_b_ref_hz
    )


def period_frequency(a_hz, b_hz, larmor_hz: float):
    """1/TP = ω̃/2π + ω_L/2π, monotone increasing in A."""
    return np.hypot(np.asarray(a_hz, dtype=np.float64) + larmor_hz, b_hz) + larmor_hz


def _band(dictionary: PeriodDictionary, a_lo: float, a_hi: float) -> Tuple[float, float]:
    f = period_frequency([a_lo, a_hi], dictionary.b_ref_hz, dictionary.larmor_hz)
    return float(f.min()), float(f.max())


def target_bands(spec: HpcDatasetSpec, dft_table: Optional[DftTable] = None) -> List[Tuple[float, float]]:
    """Period-frequency bands that background spins must avoid."""
    larmor = spec.acquisition.larmor_hz
    if spec.dft_group:
        entries = _dft_group(dft_table, spec.dft_group).entries
        f = period_frequency([e.a_hz for e in entries], [abs(e.b_hz) for e in entries], larmor)
        return [(float(f.min()) - spec.resolution_hz, float(f.max()) + spec.resolution_hz)]
    dictionary = dictionary_for(spec)
    bands = []
    for index in spec.target_period_indices:
        a = dictionary.a_hz[index]
        bands.append(_band(dictionary, a - spec.resolution_hz, a + spec.resolution_hz))
    return bands


def _outside(a_hz: np.ndarray, b_hz: np.ndarray, larmor_hz: float, bands: Sequence[Tuple[float, float]]) -> np.ndarray:
    f = period_frequency(a_hz, b_hz, larmor_hz)
    keep = np.ones(f.shape, dtype=bool)
    for lo, hi in bands:
        keep &= (f < lo) | (f > hi)
    return keep


def _dft_group(dft_table: Optional[DftTable], group_id: str) -> DftGroup:
    if dft_table is None:
        raise DatasetError(f"DFT group {group_id} requested but no DFT table was loaded")
    try:
        return dft_table.group(group_id)
    except KeyError as e:
        raise DatasetError(str(e))


def spin_on_period(tp_s: float, b_hz: float, larmor_hz: float) -> SpinParams:
    """Spin with the given transverse coupling whose target period is tp_s."""
    return SpinParams(a_hz=contour_a_for(tp_s, b_hz, larmor_hz), b_hz=b_hz)


def _ref_period(dictionary: PeriodDictionary, a_hz: float) -> float:
    return 1.0 / float(period_frequency(a_hz, dictionary.b_ref_hz, dictionary.larmor_hz))


# ---------------------------------------------------------------------------
# Spin bath
# ---------------------------------------------------------------------------

def _draw_box(rng: np.random.Generator, count: int, a_range, b_range, larmor_hz: float, bands) -> Tuple[np.ndarray, np.ndarray]:
    a_out = np.empty(0)
    b_out = np.empty(0)
    while a_out.size < count:
        need = count - a_out.size
        a = rng.uniform(a_range[0], a_range[1], size=need)
        b = rng.uniform(b_range[0], b_range[1], size=need)
        keep = _outside(a, b, larmor_hz, bands)
        a_out = np.concatenate([a_out, a[keep]])
        b_out = np.concatenate([b_out, b[keep]])
    return a_out, b_out


def _draw_dft(rng: np.random.Generator, count: int, dft_table: Optional[DftTable], larmor_hz: float, bands) -> List[SpinParams]:
    if count == 0 or dft_table is None or len(dft_table) == 0:
        return []
    rows = dft_table.rows()
    a = np.array([r.a_hz for r in rows])
    b = np.abs(np.array([r.b_hz for r in rows]))
    allowed = np.nonzero(_outside(a, b, larmor_hz, bands))[0]
    if allowed.size == 0:
        return []
    picks = rng.choice(allowed, size=count, replace=True)
    return [SpinParams(a_hz=float(a[i]), b_hz=float(b[i])) for i in picks]


def _bath(
    rng: np.random.Generator,
    spin_count_range: Tuple[int, int],
    dft_fraction_range: Tuple[float, float],
    a_range_hz: Tuple[float, float],
    b_range_hz: Tuple[float, float],
    larmor_hz: float,
    bands: Sequence[Tuple[float, float]],
    dft_table: Optional[DftTable],
) -> List[SpinParams]:
    total = int(rng.integers(spin_count_range[0], spin_count_range[1] + 1))
    fraction = rng.uniform(*dft_fraction_range)
    n_box = total - int(math.floor(total * fraction))
    if dft_table is None or len(dft_table) == 0:
        n_box = total
    a, b = _draw_box(rng, n_box, a_range_hz, b_range_hz, larmor_hz, bands)
    spins = [SpinParams(a_hz=float(x), b_hz=float(y)) for x, y in zip(a, b)]
    return spins + _draw_dft(rng, total - n_box, dft_table, larmor_hz, bands)


def sample_spin_bath(spec: HpcDatasetSpec, seed: SeedLike, dft_table: Optional[DftTable] = None) -> List[SpinParams]:
    """
    Draw background spins for one training scene.

    The total count is uniform over spec.spin_count_range; 90-100% (per
    dft_fraction_range) come uniformly from the regime's (A, B) box, the rest
    from the DFT table. Spins whose period falls in a target band are redrawn.

    Args:
        spec: Dataset spec of the owning model
        seed: Seed or generator
        dft_table: Optional DFT table; without it every spin comes from the box

    Returns:
        List of SpinParams
    """
    rng = make_rng(seed)
    return _bath(
        rng, spec.spin_count_range, spec.dft_fraction_range, spec.a_range_hz, spec.b_range_hz,
        spec.acquisition.larmor_hz, target_bands(spec, dft_table), dft_table,
    )


def random_scene(
    n_spins: int,
    larmor_hz: float,
    seed: SeedLike,
    a_range_hz: Tuple[float, float] = (-50_000.0, 50_000.0),
    b_range_hz: Tuple[float, float] = (6_000.0, 80_000.0),
    min_separation_hz: float = 0.0,
) -> List[SpinParams]:
    """Random spins whose period frequencies are at least min_separation_hz apart."""
    rng = make_rng(seed)
    spins: List[SpinParams] = []
    taken: List[float] = []
    attempts = 0
    while len(spins) < n_spins:
        attempts += 1
        if attempts > 10_000 * max(1, n_spins):
            raise DatasetError(f"Cannot place {n_spins} spins {min_separation_hz} Hz apart in the given ranges")
        a = rng.uniform(*a_range_hz)
        b = rng.uniform(*b_range_hz)
        f = float(period_frequency(a, b, larmor_hz))
        if any(abs(f - g) < min_separation_hz for g in taken):
            continue
        taken.append(f)
        spins.append(SpinParams(a_hz=float(a), b_hz=float(b)))
    return spins


# ---------------------------------------------------------------------------
# Scene rendering
# ---------------------------------------------------------------------------

def render_image(
    spins: Sequence[SpinParams],
    spec: HpcDatasetSpec,
    tp_s: float,
    width_s: float,
    rng: np.random.Generator,
) -> PeriodImage:
    """Simulate only the grid points an image needs, corrupt them per spec and stack."""
    cfg = spec.acquisition
    geometry = slice_geometry(cfg, tp_s, width_s, spec.n_slices)
    idx = required_grid_indices(geometry, cfg, spec.interp)
    tau = cfg.tau_start_s + idx * cfg.tau_step_s
    values = signal_at(spins, cfg.larmor_hz, cfg.n_pulses, tau)
    if spec.decoherence is not None:
        values = 0.5 * (2.0 * values - 1.0) * decoherence_envelope(tau, spec.decoherence) + 0.5
    if spec.noise_sigma > 0:
        values = np.clip(values + truncated_noise(values.size, spec.noise_sigma, spec.noise_clip, rng), 0.0, 1.0)
    return stack_from_samples(geometry, cfg, idx, values, spec.interp)


def model_image_width(spec: HpcDatasetSpec) -> float:
    """Window width shared by every target of one model."""
    if spec.image_width_s is not None:
        return spec.image_width_s
    if spec.dft_group or not spec.target_period_indices:
        return crop_width_for(spec.a_range_hz[1])
    return crop_width_for(float(dictionary_for(spec).a_hz[spec.target_period_indices[0]]))


def dft_group_period(dft_table: DftTable, group_id: str, larmor_hz: float) -> float:
    """Median target period of a DFT group."""
    entries = _dft_group(dft_table, group_id).entries
    f = period_frequency([e.a_hz for e in entries], [abs(e.b_hz) for e in entries], larmor_hz)
    return float(np.median(1.0 / f))


def one_hot(index: int, size: int) -> np.ndarray:
    label = np.zeros(size, dtype=np.float32)
    label[index] = 1.0
    return label


# ---------------------------------------------------------------------------
# Sample makers
# ---------------------------------------------------------------------------

def _dictionary_targets(spec: HpcDatasetSpec, dictionary: PeriodDictionary, tp_index: int, count: int, rng) -> List[SpinParams]:
    larmor = spec.acquisition.larmor_hz
    a_ref = float(dictionary.a_hz[tp_index]) + rng.uniform(-0.5, 0.5) * dictionary.a_step_hz
    sign = 1.0 if rng.random() < 0.5 else -1.0
    targets = []
    for j in range(count):
        a_eff = a_ref + sign * j * spec.resolution_hz
        b = rng.uniform(*spec.target_b_range_hz)
        targets.append(spin_on_period(_ref_period(dictionary, a_eff), b, larmor))
    return targets


def make_hpc_sample(
    spec: HpcDatasetSpec,
    class_id: int,
    target_tp_index: Optional[int],
    seed: int,
    dft_table: Optional[DftTable] = None,
) -> LabeledSample:
    """
    Generate one HPC training sample.

    Class 1 holds background spins only, class c ≥ 2 adds c - 1 target spins in
    the target bin (on the period contour, A within the bin's 50 Hz cell,
    consecutive targets one classification-resolution step apart).

    Args:
        spec: Dataset spec of the owning model
        class_id: Class in [1, spec.classes]
        target_tp_index: Dictionary index of the target period (ignored for DFT groups)
        seed: Sample seed
        dft_table: DFT table for background and strong-coupling targets

    Returns:
        LabeledSample with a flattened image input and a one-hot label

    Raises:
        DatasetError: If the class or target index is invalid
    """
    if not 1 <= class_id <= spec.classes:
        raise DatasetError(f"class_id must lie in [1, {spec.classes}], got {class_id}")

    rng = make_rng(seed)
    larmor = spec.acquisition.larmor_hz
    bands = target_bands(spec, dft_table)
    bath = _bath(
        rng, spec.spin_count_range, spec.dft_fraction_range, spec.a_range_hz, spec.b_range_hz,
        larmor, bands, dft_table,
    )

    if spec.dft_group:
        group = _dft_group(dft_table, spec.dft_group)
        if class_id - 1 > len(group.entries):
            raise DatasetError(f"DFT group {spec.dft_group} has only {len(group.entries)} rows")
        tp_s = dft_group_period(dft_table, spec.dft_group, larmor)
        picks = rng.choice(len(group.entries), size=class_id - 1, replace=False)
        targets = [group.entries[int(i)].as_spin() for i in picks]
        tp_index = None
    else:
        if target_tp_index not in spec.target_period_indices:
            raise DatasetError(f"Index {target_tp_index} is not a target of this model {spec.target_period_indices}")
        dictionary = dictionary_for(spec)
        tp_s = dictionary.tp_at(target_tp_index)
        targets = _dictionary_targets(spec, dictionary, target_tp_index, class_id - 1, rng)
        tp_index = target_tp_index

    spins = bath + targets
    image = render_image(spins, spec, tp_s, model_image_width(spec), rng)
    return LabeledSample(
        input=image.pixels.reshape(-1).astype(np.float32),
        label=one_hot(class_id - 1, spec.classes),
        meta=SampleMeta(spins=spins, seed=seed, class_id=class_id, tp_index=tp_index,
                        extra={"n_bath": float(len(bath))}),
    )


def make_denoiser_pair(spec: DenoiserDatasetSpec, seed: int, dft_table: Optional[DftTable] = None) -> LabeledSample:
    """
    Generate one denoiser training pair.

    The label is a noise-free decohered window of spec.window points, the input
    the same window with truncated Gaussian noise added.
    """
    rng = make_rng(seed)
    cfg = spec.acquisition
    spins = _bath(
        rng, spec.spin_count_range, spec.dft_fraction_range, spec.a_range_hz, spec.b_range_hz,
        cfg.larmor_hz, [], dft_table,
    )
    start = int(rng.integers(0, cfg.n_points - spec.window + 1))
    tau = cfg.tau_start_s + (start + np.arange(spec.window)) * cfg.tau_step_s
    clean = signal_at(spins, cfg.larmor_hz, cfg.n_pulses, tau)

    extra = {"window_start": float(start)}
    if spec.decoherence_t_range_s is not None:
        dp = DecoherenceParams(
            t_s=rng.uniform(*spec.decoherence_t_range_s), n_exp=rng.uniform(*spec.decoherence_n_range)
        )
        clean = 0.5 * (2.0 * clean - 1.0) * decoherence_envelope(tau, dp) + 0.5
        extra.update({"decoherence_t_s": dp.t_s, "decoherence_n": dp.n_exp})

    noisy = clean
    if spec.noise_sigma > 0:
        noisy = np.clip(clean + truncated_noise(clean.size, spec.noise_sigma, spec.noise_clip, rng), 0.0, 1.0)

    return LabeledSample(
        input=noisy.astype(np.float32),
        label=clean.astype(np.float32),
        meta=SampleMeta(spins=spins, seed=seed, extra=extra),
    )


class ContourScale:
    """Normalization of (A, B) on the constant-period contour of one target."""

    def __init__(self, tp_s: float, b_range_hz: Tuple[float, float], larmor_hz: float):
        self.tp_s = tp_s
        self.larmor_hz = larmor_hz
        self.b_lo, self.b_hi = b_range_hz
        ends = [contour_a_for(tp_s, b, larmor_hz) for b in b_range_hz]
        self.a_lo, self.a_hi = min(ends), max(ends)

    def normalize(self, a_hz: float, b_hz: float) -> np.ndarray:
        a_span = max(self.a_hi - self.a_lo, 1e-12)
        return np.array([(a_hz - self.a_lo) / a_span, (b_hz - self.b_lo) / (self.b_hi - self.b_lo)])

    def denormalize(self, values: Sequence[float]) -> Tuple[float, float]:
        a = self.a_lo + float(values[0]) * (self.a_hi - self.a_lo)
        b = self.b_lo + float(values[1]) * (self.b_hi - self.b_lo)
        return a, b

    def project(self, b_hz: float) -> Tuple[float, float]:
        """Closest contour point for a predicted B, clipped to the search range."""
        b = float(np.clip(b_hz, self.b_lo, self.b_hi))
        return contour_a_for(self.tp_s, b, self.larmor_hz), b


def make_regression_sample(
    spec: HpcDatasetSpec,
    tp_index: int,
    b_range_hz: Tuple[float, float],
    seed: int,
    dft_table: Optional[DftTable] = None,
    width_s: Optional[float] = None,
) -> LabeledSample:
    """
    Generate one regression sample: a single target spin on the period contour
    of tp_index with B uniform in b_range_hz, label = normalized (A, B).
    """
    dictionary = dictionary_for(spec)
    if not 0 <= tp_index < len(dictionary):
        raise DatasetError(f"tp_index {tp_index} outside the dictionary [0, {len(dictionary) - 1}]")

    rng = make_rng(seed)
    larmor = spec.acquisition.larmor_hz
    a = float(dictionary.a_hz[tp_index])
    bands = [_band(dictionary, a - spec.resolution_hz, a + spec.resolution_hz)]
    bath = _bath(
        rng, spec.spin_count_range, spec.dft_fraction_range, spec.a_range_hz, spec.b_range_hz,
        larmor, bands, dft_table,
    )
    tp_s = dictionary.tp_at(tp_index)
    target = spin_on_period(tp_s, rng.uniform(*b_range_hz), larmor)
    spins = bath + [target]
    scale = ContourScale(tp_s, b_range_hz, larmor)
    image = render_image(spins, spec, tp_s, width_s or crop_width_for(a), rng)
    return LabeledSample(
        input=image.pixels.reshape(-1).astype(np.float32),
        label=scale.normalize(target.a_hz, target.b_hz).astype(np.float32),
        meta=SampleMeta(spins=spins, seed=seed, tp_index=tp_index,
                        extra={"a_hz": target.a_hz, "b_hz": target.b_hz}),
    )


def dip_count_classes(run_length: int, n_classes: int = 5, indices_per_spin: int = 4) -> List[int]:
    """Spin count of each counting class: [0, m, m + 1, ...] with m = ceil(run / indices_per_spin)."""
    minimum = max(1, math.ceil(run_length / indices_per_spin))
    return [0] + [minimum + c for c in range(n_classes - 1)]


def dip_count_views(tp_index_range: Tuple[int, int], n_views: int = 3) -> List[int]:
    lo, hi = tp_index_range
    return sorted({int(round(x)) for x in np.linspace(lo, hi, n_views)})


def make_dip_count_sample(
    spec: HpcDatasetSpec,
    tp_index_range: Tuple[int, int],
    n_spins_class: int,
    seed: int,
    n_classes: int = 5,
    indices_per_spin: int = 4,
    dft_table: Optional[DftTable] = None,
    width_s: Optional[float] = None,
) -> LabeledSample:
    """
    Generate one broad-dip counting sample.

    Class 0 has no spin in the index range; class c places the c-th count of
    dip_count_classes spins with periods spread evenly across the range. The
    input concatenates the images at the first, middle and last index.
    """
    lo, hi = tp_index_range
    dictionary = dictionary_for(spec)
    if not 0 <= lo <= hi < len(dictionary):
        raise DatasetError(f"Index range {tp_index_range} outside the dictionary [0, {len(dictionary) - 1}]")
    if not 0 <= n_spins_class < n_classes:
        raise DatasetError(f"Counting class must lie in [0, {n_classes - 1}], got {n_spins_class}")

    counts = dip_count_classes(hi - lo + 1, n_classes, indices_per_spin)
    rng = make_rng(seed)
    larmor = spec.acquisition.larmor_hz
    a_lo, a_hi = float(dictionary.a_hz[lo]), float(dictionary.a_hz[hi])
    bands = [_band(dictionary, a_lo - spec.resolution_hz, a_hi + spec.resolution_hz)]
    bath = _bath(
        rng, spec.spin_count_range, spec.dft_fraction_range, spec.a_range_hz, spec.b_range_hz,
        larmor, bands, dft_table,
    )

    n_targets = counts[n_spins_class]
    targets = []
    if n_targets:
        jitter = rng.uniform(-0.5, 0.5, size=n_targets) * dictionary.a_step_hz
        for a_eff in np.linspace(a_lo, a_hi, n_targets) + jitter:
            b = rng.uniform(*spec.target_b_range_hz)
            targets.append(spin_on_period(_ref_period(dictionary, float(a_eff)), b, larmor))

    spins = bath + targets
    width = width_s or crop_width_for(0.5 * (a_lo + a_hi))
    views = [
        render_image(spins, spec, dictionary.tp_at(i), width, rng).pixels.reshape(-1)
        for i in dip_count_views(tp_index_range)
    ]
    return LabeledSample(
        input=np.concatenate(views).astype(np.float32),
        label=one_hot(n_spins_class, n_classes),
        meta=SampleMeta(spins=spins, seed=seed, class_id=n_spins_class,
                        extra={"n_targets": float(n_targets), "index_lo": float(lo), "index_hi": float(hi)}),
    )
