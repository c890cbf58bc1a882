"""
Detection pipeline: confidence sweep over the period dictionary, peak and
broad-dip extraction, (A, B) regression, cross-regime merge and per-spin
fine-tuning into a DetectionReport.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import find_peaks as scipy_find_peaks

from .config import DetectionSettings, RunConfig
from .datasets import ContourScale, dip_count_classes, dip_count_views
from .denoising import preprocess
from .fine_tuning import bath_mask, fine_tune, fine_tune_uncertainty
from .imaging import flatten_image, slice_and_stack
from .model_bank import MissingModelError, ModelBank, regime_dictionary
from .model_io import TrainedModel
from .models import (
    ConfidenceCurve,
    DecoherenceParams,
    DetectedSpin,
    DetectionReport,
    Interp,
    PeakParams,
    PeriodDictionary,
    PeriodImage,
    Regime,
    Trace,
)
from .stage_tracker import get_stage_tracker

logger = logging.getLogger(__name__)

N32_ONLY = "n32_only"


class DetectionError(Exception):
    """Custom exception for detection runs that cannot proceed."""
    pass


@dataclass
class DetectionRun:
    """Report plus the intermediate products worth exporting."""
    report: DetectionReport
    curves: Dict[Regime, ConfidenceCurve] = field(default_factory=dict)
    recovered: Dict[int, Trace] = field(default_factory=dict)
    decoherence: Dict[int, DecoherenceParams] = field(default_factory=dict)


def find_peaks(scores: np.ndarray, params: PeakParams) -> List[int]:
    """
    Positions of confidence peaks.

    A peak is a local maximum (plateaus count once, at their middle) with
    value ≥ height, prominence ≥ prominence, width at half prominence ≥ width
    and at least `distance` positions to any higher kept peak.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 3:
        return []
    peaks, _ = scipy_find_peaks(
        scores,
        height=params.height,
        distance=params.distance,
        width=params.width,
        prominence=params.prominence,
    )
    return sorted(int(p) for p in peaks)


def above_threshold_runs(scores: np.ndarray, threshold: float, min_length: int = 1) -> List[Tuple[int, int]]:
    """Inclusive (start, end) positions of maximal runs with score ≥ threshold."""
    above = np.concatenate([[False], np.asarray(scores) >= threshold, [False]])
    edges = np.flatnonzero(np.diff(above.astype(np.int8)))
    runs = [(int(s), int(e) - 1) for s, e in zip(edges[::2], edges[1::2])]
    return [r for r in runs if r[1] - r[0] + 1 >= min_length]


def model_image(trace: Trace, model: TrainedModel, tp_s: float) -> PeriodImage:
    """Slice a trace the way the model's training images were sliced."""
    meta = model.metadata
    return slice_and_stack(
        trace, tp_s, float(meta["width_s"]), int(meta["n_slices"]), Interp(meta.get("interp", "linear"))
    )


def _score_group(trace: Trace, model: TrainedModel, dictionary: PeriodDictionary, indices: Sequence[int]) -> np.ndarray:
    batch = np.stack([flatten_image(model_image(trace, model, dictionary.tp_at(i))) for i in indices])
    scores = model.network.predict(batch.astype(np.float32)).astype(np.float64)
    return np.clip(scores[:, 1:].max(axis=1), 0.0, 1.0)


def hpc_sweep(
    trace: Trace,
    models: Sequence[TrainedModel],
    dictionary: PeriodDictionary,
    regime: Regime,
    index_range: Optional[Tuple[int, int]] = None,
    workers: int = 1,
) -> ConfidenceCurve:
    """
    'Target present' score of every dictionary index in the range.

    The score at an index is the largest sigmoid output over the classes with
    one or more target spins, from the first model owning the index.

    Raises:
        MissingModelError: If some indices are owned by no model
    """
    lo, hi = index_range if index_range is not None else (0, len(dictionary) - 1)
    owner: Dict[int, int] = {}
    for m, model in enumerate(models):
        for i in model.metadata.get("indices", []):
            if lo <= i <= hi:
                owner.setdefault(int(i), m)

    uncovered = [i for i in range(lo, hi + 1) if i not in owner]
    if uncovered:
        raise MissingModelError(
            f"No {regime.value} HPC model covers indices {uncovered[:10]}{' ...' if len(uncovered) > 10 else ''}",
            indices=uncovered,
        )

    groups: Dict[int, List[int]] = {}
    for i in range(lo, hi + 1):
        groups.setdefault(owner[i], []).append(i)

    def run(item):
        m, indices = item
        return indices, _score_group(trace, models[m], dictionary, indices)

    items = sorted(groups.items())
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(item) for item in items]

    scores = np.zeros(hi - lo + 1)
    for indices, values in results:
        scores[np.asarray(indices) - lo] = values

    idx = np.arange(lo, hi + 1)
    logger.debug(f"{regime.value} sweep over indices {lo}-{hi}: max score {scores.max():.3f}")
    return ConfidenceCurve(regime=regime, indices=idx, a_hz=dictionary.a_hz[idx], scores=scores)


def regress_ab(image: PeriodImage, model: TrainedModel, larmor_hz: float) -> Tuple[float, float]:
    """
    (A, B) of the spin behind an image's dips, projected onto its period contour.

    The model predicts normalized (A, B); B is denormalized, clipped to the
    model's search range and A recomputed on the contour of image.tp_s.
    """
    pred = model.network.predict(flatten_image(image)[None, :].astype(np.float32))[0]
    scale = ContourScale(image.tp_s, tuple(model.metadata["b_range_hz"]), larmor_hz)
    _, b_hz = scale.denormalize(pred)
    return scale.project(b_hz)


def count_broad_dip(
    trace: Trace,
    index_range: Tuple[int, int],
    model: TrainedModel,
    dictionary: PeriodDictionary,
) -> int:
    """
    Number of spins behind a run of above-threshold indices.

    The counting model sees images at the first, middle and last index and
    picks a class of dip_count_classes(run length).
    """
    lo, hi = index_range
    views = [flatten_image(model_image(trace, model, dictionary.tp_at(i))) for i in dip_count_views(index_range)]
    scores = model.network.predict(np.concatenate(views)[None, :].astype(np.float32))[0]
    meta = model.metadata
    counts = dip_count_classes(hi - lo + 1, int(meta["n_classes"]), int(meta["indices_per_spin"]))
    return counts[int(np.argmax(scores))]


def _n256_range(config: Optional[RunConfig]) -> Optional[Tuple[float, float]]:
    if config is None or Regime.N256 not in config.regimes:
        return None
    return config.regimes[Regime.N256].target_b_range_hz


def merge_regimes(
    found: Dict[Regime, List[DetectedSpin]],
    settings: DetectionSettings,
    n256_b_range_hz: Optional[Tuple[float, float]] = None,
) -> List[DetectedSpin]:
    """
    Reconcile detections of the three regimes.

    Low-B N32 detections within merge_radius indices of a high-B detection are
    dropped. Each N256 detection attaches its confidence to the nearest free
    N32 spin within n256_match_radius indices, or is kept on its own. When the
    N256 regime ran, N32 spins without an N256 partner whose B lies in the N256
    range get the n32_only diagnostic. Inputs are not modified and merging a
    merged list again changes nothing.
    """
    high = [s.model_copy(deep=True) for s in found.get(Regime.N32_HIGH_B, [])]
    low = [
        s.model_copy(deep=True) for s in found.get(Regime.N32_LOW_B, [])
        if not any(abs(s.tp_index - h.tp_index) <= settings.merge_radius for h in high)
    ]
    n32 = high + low

    n256_ran = Regime.N256 in found
    n256_spins = sorted(
        (s.model_copy(deep=True) for s in found.get(Regime.N256, [])),
        key=lambda s: (-(s.confidence_n256 or 0.0), s.tp_index, s.a_hz),
    )
    kept_n256 = []
    for spin in n256_spins:
        free = [s for s in n32 if s.confidence_n256 is None
                and abs(s.tp_index - spin.tp_index) <= settings.n256_match_radius]
        if free:
            partner = min(free, key=lambda s: (abs(s.tp_index - spin.tp_index), s.tp_index, s.a_hz))
            partner.confidence_n256 = spin.confidence_n256
            partner.diagnostics = [d for d in partner.diagnostics if d != N32_ONLY]
        else:
            kept_n256.append(spin)

    if n256_ran and n256_b_range_hz is not None:
        lo, hi = n256_b_range_hz
        for s in n32:
            if s.confidence_n256 is None and lo <= s.b_hz <= hi and N32_ONLY not in s.diagnostics:
                s.diagnostics.append(N32_ONLY)

    merged = n32 + kept_n256
    return sorted(merged, key=lambda s: (s.tp_index, s.regime.value, s.a_hz, s.b_hz))


def _regroup(spins: Sequence[DetectedSpin]) -> Dict[Regime, List[DetectedSpin]]:
    grouped: Dict[Regime, List[DetectedSpin]] = {}
    for s in spins:
        grouped.setdefault(s.regime, []).append(s)
    return grouped


def _confidence_fields(regime: Regime, score: float) -> Dict[str, float]:
    return {"confidence_n256": score} if regime == Regime.N256 else {"confidence_n32": score}


def detect_regime(
    trace: Trace,
    regime: Regime,
    bank: ModelBank,
    config: RunConfig,
    workers: int = 1,
) -> Tuple[ConfidenceCurve, List[DetectedSpin]]:
    """
    Candidates of one regime from a recovered trace.

    Isolated peaks are regressed to (A, B); runs of at least broad_dip_min_run
    above-threshold indices are counted and their spins spread over the run,
    tagged as one broad-dip group.
    """
    settings = config.detection
    profile = config.regimes[regime]
    cfg = trace.config
    dictionary = regime_dictionary(config, regime)
    tracker = get_stage_tracker()

    models = bank.hpc_models(regime, cfg, settings.index_range)
    with tracker.track("hpc_sweep", items=len(models)):
        curve = hpc_sweep(trace, models, dictionary, regime, settings.index_range, workers)

    height = profile.peak_height
    runs = above_threshold_runs(curve.scores, height, settings.broad_dip_min_run)
    in_run = np.zeros(curve.scores.size, dtype=bool)
    for a, b in runs:
        in_run[a:b + 1] = True
    peaks = [p for p in find_peaks(curve.scores, settings.peak_params(height)) if not in_run[p]]

    spins: List[DetectedSpin] = []
    for p in peaks:
        tp_index = int(curve.indices[p])
        model = bank.regression(regime, tp_index, cfg)
        a_hz, b_hz = regress_ab(model_image(trace, model, dictionary.tp_at(tp_index)), model, cfg.larmor_hz)
        spins.append(DetectedSpin(a_hz=a_hz, b_hz=b_hz, regime=regime, tp_index=tp_index,
                                  **_confidence_fields(regime, float(curve.scores[p]))))

    for a, b in runs:
        lo, hi = int(curve.indices[a]), int(curve.indices[b])
        count = count_broad_dip(trace, (lo, hi), bank.dip_count(regime, (lo, hi), cfg), dictionary)
        tag = f"broad_dip_{regime.value}_{lo}_{hi}"
        logger.info(f"{regime.value}: broad dip over indices {lo}-{hi} holds {count} spins")
        score = float(curve.scores[a:b + 1].max())
        for tp_index in sorted({int(round(x)) for x in np.linspace(lo, hi, count)}) if count else []:
            model = bank.regression(regime, tp_index, cfg)
            a_hz, b_hz = regress_ab(model_image(trace, model, dictionary.tp_at(tp_index)), model, cfg.larmor_hz)
            spins.append(DetectedSpin(a_hz=a_hz, b_hz=b_hz, regime=regime, tp_index=tp_index, group_tag=tag,
                                      **_confidence_fields(regime, score)))

    logger.info(f"{regime.value}: {len(peaks)} peaks, {len(runs)} broad dips, {len(spins)} candidates")
    return curve, spins


def _refine(
    spins: List[DetectedSpin],
    experiments: Dict[int, Trace],
    config: RunConfig,
    bank: ModelBank,
    workers: int,
) -> Tuple[List[DetectedSpin], float, int]:
    """Fine-tune each pulse count's own spins with every spin generating the signal."""
    settings = config.fine_tune
    tracker = get_stage_tracker()
    total_loss, iterations = 0.0, 0
    spins = [s.model_copy(deep=True) for s in spins]

    for n_pulses in sorted(experiments):
        owned = [i for i, s in enumerate(spins) if config.regimes[s.regime].n_pulses == n_pulses]
        if not owned:
            continue
        experiment = experiments[n_pulses]
        bath = bath_mask(experiment.config, settings, bank.dft_table)
        candidates = [s.as_spin() for s in spins]
        with tracker.track("fine_tune", items=len(owned)):
            result = fine_tune(candidates, experiment, settings, bath, owned, workers)
        with tracker.track("uncertainty", items=len(owned) * settings.uncertainty_repeats):
            sigmas = fine_tune_uncertainty(result.spins, experiment, settings, bath, owned, config.seed, workers)

        for i, (sigma_a, sigma_b) in zip(owned, sigmas):
            refined = result.spins[i]
            spins[i] = spins[i].model_copy(update={
                "a_hz": refined.a_hz, "b_hz": refined.b_hz,
                "sigma_a_hz": sigma_a, "sigma_b_hz": sigma_b, "flagged": result.flagged[i],
            })
        total_loss += result.loss
        iterations += result.passes
    return spins, total_loss, iterations


def detect(traces: Dict[int, Trace], bank: ModelBank, config: RunConfig, workers: int = 1) -> DetectionRun:
    """
    Run the whole pipeline on measured traces keyed by pulse count.

    Args:
        traces: Measured traces, e.g. {32: trace_n32, 256: trace_n256}
        bank: Source of trained models
        config: Effective run configuration
        workers: Parallelism of sweeps and particle evaluation

    Returns:
        DetectionRun with the report, confidence curves and recovered traces

    Raises:
        DetectionError: If no trace is given or no requested regime has a trace
        MissingModelError: If a needed model is absent and may not be trained
    """
    if not traces:
        raise DetectionError("At least one trace is required for detection")

    settings = config.detection
    regimes = [r for r in settings.regimes if config.regimes[r].n_pulses in traces]
    skipped = [r.value for r in settings.regimes if r not in regimes]
    if skipped:
        logger.info(f"No trace for regimes {skipped}; skipping them")
    if not regimes:
        raise DetectionError(f"None of the regimes {[r.value for r in settings.regimes]} has a trace "
                             f"(pulse counts given: {sorted(traces)})")
    unused = sorted(set(traces) - {config.regimes[r].n_pulses for r in regimes})
    if unused:
        logger.warning(f"No requested regime uses N={unused}; those traces are ignored")

    tracker = get_stage_tracker()
    run = DetectionRun(report=DetectionReport())
    for n_pulses in sorted({config.regimes[r].n_pulses for r in regimes}):
        trace = traces[n_pulses]
        denoiser = bank.denoiser(trace.config) if settings.use_denoiser else None
        with tracker.track("preprocess"):
            recovered, dp = preprocess(trace, denoiser, envelope_floor=config.noise.envelope_floor)
        run.recovered[n_pulses] = recovered
        run.decoherence[n_pulses] = dp

    found: Dict[Regime, List[DetectedSpin]] = {}
    for regime in regimes:
        n_pulses = config.regimes[regime].n_pulses
        curve, spins = detect_regime(run.recovered[n_pulses], regime, bank, config, workers)
        run.curves[regime] = curve
        found[regime] = spins

    merged = merge_regimes(found, settings, _n256_range(config))
    experiments = {
        n: (run.recovered[n] if settings.fit_on == "recovered" else traces[n]) for n in run.recovered
    }
    refined, loss, iterations = _refine(merged, experiments, config, bank, workers)
    refined.sort(key=lambda s: (s.a_hz, s.b_hz, s.regime.value))

    run.report = DetectionReport(spins=refined, fit_loss_final=loss, iterations=iterations, regimes=regimes)
    logger.info(f"Detected {run.report.summary_total} spins ({len(refined)} entries), final loss {loss:.6g}")
    return run


def run_detection(traces: Dict[int, Trace], bank: ModelBank, config: RunConfig, workers: int = 1) -> DetectionReport:
    return detect(traces, bank, config, workers).report
