"""
Denoising and decoherence recovery of measured traces.
"""

import logging
from typing import Optional, Tuple

import numpy as np

from .model_io import ReuseKeyMismatchError, TrainedModel, reuse_key_differences
from .models import AcquisitionConfig, DecoherenceParams, ReuseKey, Trace, TraceKind
from .spinmodel import fit_decoherence, recover_decoherence

logger = logging.getLogger(__name__)


def denoiser_reuse_key(cfg: AcquisitionConfig) -> ReuseKey:
    """A denoiser is reusable across samples while N and the time resolution stay the same."""
    return ReuseKey(role="denoiser", n_pulses=cfg.n_pulses, tau_step_s=cfg.tau_step_s)


def check_reuse(model: TrainedModel, expected: ReuseKey, source: str = "model") -> None:
    """
    Raises:
        ReuseKeyMismatchError: If the model's key differs from expected
    """
    diffs = reuse_key_differences(model.reuse_key, expected)
    if diffs:
        raise ReuseKeyMismatchError(source, diffs)


def window_starts(n_points: int, window: int, hop: int) -> np.ndarray:
    """Starts of windows with the given hop; the last window is aligned to the trace end."""
    if n_points <= window:
        return np.array([0])
    starts = list(range(0, n_points - window + 1, hop))
    if starts[-1] != n_points - window:
        starts.append(n_points - window)
    return np.array(starts)


def denoise(trace: Trace, model: TrainedModel, batch_size: int = 64) -> Trace:
    """
    Run the denoiser over half-overlapping windows and average the overlaps.

    Args:
        trace: Measured trace
        model: Trained denoiser whose reuse key matches the trace's N and step
        batch_size: Windows per forward pass

    Returns:
        Trace of kind DENOISED with values in [0, 1]

    Raises:
        ReuseKeyMismatchError: If the model was trained for another N or time resolution
    """
    check_reuse(model, denoiser_reuse_key(trace.config), source=f"{model.reuse_key.role} model")

    window = model.network.input_dim
    values = np.asarray(trace.values, dtype=np.float64)
    n = values.size
    padded = values if n >= window else np.concatenate([values, np.full(window - n, values[-1])])

    starts = window_starts(padded.size, window, max(1, window // 2))
    batch = np.stack([padded[s:s + window] for s in starts])
    outputs = model.network.predict(batch, batch_size).astype(np.float64)

    total = np.zeros(padded.size)
    counts = np.zeros(padded.size)
    for s, out in zip(starts, outputs):
        total[s:s + window] += out
        counts[s:s + window] += 1.0
    denoised = np.clip(total / counts, 0.0, 1.0)[:n]

    logger.debug(f"Denoised {n} points with {len(starts)} windows of {window}")
    return trace.derive(denoised, TraceKind.DENOISED)


def preprocess(
    trace: Trace,
    denoiser: Optional[TrainedModel] = None,
    decoherence: Optional[DecoherenceParams] = None,
    envelope_floor: float = 0.05,
) -> Tuple[Trace, DecoherenceParams]:
    """
    Denoise (when a model is given), fit the dephasing envelope unless it is
    known, and divide it out.

    Returns:
        (recovered trace, decoherence parameters used)
    """
    working = denoise(trace, denoiser) if denoiser is not None else trace
    if working.kind == TraceKind.PURE:
        working = working.derive(working.values, TraceKind.NOISY)
    dp = decoherence if decoherence is not None else fit_decoherence(working)
    recovered = recover_decoherence(working, dp, envelope_floor)
    logger.info(
        f"Preprocessed N={trace.config.n_pulses} trace: T={dp.t_s * 1e6:.1f} µs, n={dp.n_exp:.2f}, "
        f"{int(recovered.low_confidence.sum())} low-confidence points"
    )
    return recovered, dp
