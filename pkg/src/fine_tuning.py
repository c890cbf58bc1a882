"""
Sequential per-spin refinement of (A, B) against a measured trace.

The loss sums squared residuals between the generated signal of all
candidates and the measurement over windows of ±window_half samples around
every dip of each candidate's single-spin signal, minus the bath mask.
Each spin in turn spawns particles over B (A fixed), each particle is locally
optimized, and the best particle replaces the spin only if it lowers the loss.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from .config import FineTuneSettings
from .models import AcquisitionConfig, DftTable, SpinParams, Trace
from .spinmodel import coherence_product, signal_at, target_period

logger = logging.getLogger(__name__)

KHZ = 1e3
WEAK_OMEGA_H_HZ = 100e3
MIN_B_HZ = 100.0


@dataclass
class FineTuneResult:
    spins: List[SpinParams]
    loss: float
    passes: int
    flagged: List[bool]
    accepted_losses: List[float] = field(default_factory=list)
    pass_losses: List[float] = field(default_factory=list)


def dip_window_mask(spin: SpinParams, cfg: AcquisitionConfig, half: int = 10, min_depth: float = 0.02) -> np.ndarray:
    """
    Mask of ±half samples around each dip of the spin's single-spin signal.

    Dips are the per-period argmin of the generated signal, one period being
    the spin's target period; periods shallower than min_depth are skipped.
    """
    n = cfg.n_points
    mask = np.zeros(n, dtype=bool)
    if spin.b_hz == 0.0:
        return mask
    tau = cfg.tau_grid()
    g = signal_at([spin], cfg.larmor_hz, cfg.n_pulses, tau)
    period = target_period(spin, cfg.larmor_hz) / cfg.tau_step_s
    first = (0.5 * target_period(spin, cfg.larmor_hz) - cfg.tau_start_s) / cfg.tau_step_s
    start = first - 0.5 * period
    while start < n:
        lo = max(0, int(math.floor(start)))
        hi = min(n, int(math.ceil(start + period)))
        start += period
        if hi - lo < 2:
            continue
        k = lo + int(np.argmin(g[lo:hi]))
        if 1.0 - g[k] >= min_depth:
            mask[max(0, k - half): min(n, k + half + 1)] = True
    return mask


def bath_mask(
    cfg: AcquisitionConfig,
    settings: FineTuneSettings,
    dft_table: Optional[DftTable] = None,
) -> np.ndarray:
    """τ points excluded from the loss: explicit ranges plus, for dft_weak, where weak DFT spins pull the signal below the threshold."""
    tau = cfg.tau_grid()
    mask = np.zeros(tau.size, dtype=bool)
    for lo, hi in settings.bath_mask_ranges_s:
        mask |= (tau >= lo) & (tau <= hi)
    if settings.bath_reference == "dft_weak":
        if dft_table is None:
            logger.warning("bath_reference is dft_weak but no DFT table was loaded; skipping the reference")
        else:
            weak = [r.as_spin() for r in dft_table.rows() if r.omega_h_hz < WEAK_OMEGA_H_HZ]
            reference = signal_at(weak, cfg.larmor_hz, cfg.n_pulses, tau)
            mask |= reference < settings.bath_threshold
    return mask


def loss_weights(spins: Sequence[SpinParams], cfg: AcquisitionConfig, bath: np.ndarray, half: int, min_depth: float) -> np.ndarray:
    """Per-point multiplicity of the loss: number of spin windows covering each point, zero on the bath."""
    weights = np.zeros(cfg.n_points)
    for spin in spins:
        weights += dip_window_mask(spin, cfg, half, min_depth)
    weights[bath] = 0.0
    return weights


def fit_loss(
    spins: Sequence[SpinParams],
    experiment: Trace,
    windows: Sequence[np.ndarray],
    bath: Optional[np.ndarray] = None,
) -> float:
    """
    Σ_i Σ_{t in window_i, not bath} (g(t) - p(t))² with g the signal of all spins.

    Args:
        spins: Candidate spins generating g
        experiment: Measured (or recovered) trace p
        windows: One boolean mask per spin
        bath: Points to exclude

    Returns:
        Non-negative loss
    """
    weights = np.zeros(experiment.config.n_points)
    for w in windows:
        weights += w
    if bath is not None:
        weights[bath] = 0.0
    return _weighted_loss(spins, experiment, weights)


def total_loss(
    spins: Sequence[SpinParams],
    experiment: Trace,
    bath: Optional[np.ndarray] = None,
    half: int = 10,
    min_depth: float = 0.02,
) -> float:
    """fit_loss with the windows derived from the given spins themselves."""
    cfg = experiment.config
    return fit_loss(spins, experiment, [dip_window_mask(s, cfg, half, min_depth) for s in spins], bath)


def _weighted_loss(spins: Sequence[SpinParams], experiment: Trace, weights: np.ndarray) -> float:
    cfg = experiment.config
    idx = np.nonzero(weights)[0]
    if idx.size == 0:
        return 0.0
    tau = cfg.tau_grid()[idx]
    g = signal_at(spins, cfg.larmor_hz, cfg.n_pulses, tau)
    return float(np.sum(weights[idx] * (g - experiment.values[idx]) ** 2))


class _SpinObjective:
    """Loss as a function of one spin's (A, B) in kHz with the other spins frozen."""

    def __init__(self, spins: Sequence[SpinParams], index: int, experiment: Trace, weights: np.ndarray):
        cfg = experiment.config
        self.cfg = cfg
        self.idx = np.nonzero(weights)[0]
        self.w = weights[self.idx]
        self.p = experiment.values[self.idx]
        self.tau = cfg.tau_grid()[self.idx]
        others = [s for j, s in enumerate(spins) if j != index]
        self.others = coherence_product(others, cfg.larmor_hz, cfg.n_pulses, self.tau)

    def __call__(self, x: np.ndarray) -> float:
        a_hz, b_hz = float(x[0]) * KHZ, abs(float(x[1])) * KHZ
        m = coherence_product([SpinParams(a_hz=a_hz, b_hz=b_hz)], self.cfg.larmor_hz, self.cfg.n_pulses, self.tau)
        g = np.clip(0.5 * (1.0 + self.others * m), 0.0, 1.0)
        return float(np.sum(self.w * (g - self.p) ** 2))


def _optimize_particle(objective: _SpinObjective, start: Tuple[float, float], method: str, max_iter: int):
    x0 = np.array([start[0] / KHZ, start[1] / KHZ])
    options = {"maxiter": max_iter, "eps": 1e-4}
    bounds = [(None, None), (MIN_B_HZ / KHZ, None)] if method == "L-BFGS-B" else None
    try:
        res = minimize(objective, x0, method=method, bounds=bounds, options=options)
    except (ValueError, FloatingPointError) as e:
        logger.debug(f"Particle at {start} failed: {e}")
        return None
    if not np.isfinite(res.fun):
        return None
    return float(res.fun), SpinParams(a_hz=float(res.x[0]) * KHZ, b_hz=abs(float(res.x[1])) * KHZ)


def _particle_starts(spin: SpinParams, settings: FineTuneSettings) -> List[Tuple[float, float]]:
    bs = np.linspace(spin.b_hz - settings.delta_b_hz, spin.b_hz + settings.delta_b_hz, settings.n_particles)
    return [(spin.a_hz, float(max(b, MIN_B_HZ))) for b in bs]


def fine_tune(
    candidates: Sequence[SpinParams],
    experiment: Trace,
    settings: FineTuneSettings,
    bath: Optional[np.ndarray] = None,
    owned: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> FineTuneResult:
    """
    Refine candidate spins one at a time until the loss settles.

    Args:
        candidates: Starting (A, B) of every spin generating the signal
        experiment: Preprocessed (recovered) or raw measured trace
        settings: Particle count, B spread, window, tolerance and pass limits
        bath: Optional bath-exclusion mask
        owned: Indices of the spins to refine (all by default); the others stay fixed
        workers: Threads evaluating particles of one spin

    Returns:
        FineTuneResult with the refined spins, final loss and pass count
    """
    spins = list(candidates)
    flagged = [False] * len(spins)
    if not spins:
        return FineTuneResult(spins=[], loss=0.0, passes=0, flagged=[])

    cfg = experiment.config
    bath = bath if bath is not None else np.zeros(cfg.n_points, dtype=bool)
    owned = list(range(len(spins))) if owned is None else list(owned)
    method = "CG" if cfg.n_pulses == 32 else "L-BFGS-B"
    half, min_depth = settings.window_half, settings.min_dip_depth
    loss = total_loss(spins, experiment, bath, half, min_depth)
    accepted: List[float] = [loss]
    pass_losses: List[float] = []
    passes = 0

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for passes in range(1, settings.max_passes + 1):
            previous = loss
            for i in owned:
                # particles descend on the windows of the current spins; acceptance re-derives them
                weights = loss_weights(spins, cfg, bath, half, min_depth)
                objective = _SpinObjective(spins, i, experiment, weights)
                starts = _particle_starts(spins[i], settings)
                run = lambda s: _optimize_particle(objective, s, method, settings.max_iter)  # noqa: E731
                results = list(pool.map(run, starts)) if pool else [run(s) for s in starts]
                finite = [r for r in results if r is not None]
                if len(finite) < len(results):
                    logger.warning(f"Spin {i}: discarded {len(results) - len(finite)} non-finite particles")
                if not finite:
                    flagged[i] = True
                    continue
                scored = [
                    (total_loss(spins[:i] + [particle] + spins[i + 1:], experiment, bath, half, min_depth), particle)
                    for _, particle in finite
                ]
                best_loss, best = min(scored, key=lambda r: r[0])
                if best_loss < loss:
                    spins[i] = best
                    loss = best_loss
                    accepted.append(loss)

            pass_losses.append(loss)
            logger.debug(f"Fine-tune pass {passes}: loss {loss:.6g}")
            if loss == 0.0 or previous - loss <= settings.tol_rel * previous:
                break
    finally:
        if pool:
            pool.shutdown()

    logger.info(f"Fine-tuned {len(owned)} spins in {passes} passes, loss {loss:.6g}")
    return FineTuneResult(
        spins=spins, loss=loss, passes=passes, flagged=flagged, accepted_losses=accepted, pass_losses=pass_losses
    )


def _jittered_run(args) -> List[Tuple[float, float]]:
    candidates, experiment, settings, bath, owned, seed = args
    rng = np.random.default_rng(seed)
    start = list(candidates)
    for i in owned:
        s = start[i]
        start[i] = SpinParams(
            a_hz=s.a_hz + rng.normal(0.0, settings.jitter_a_hz),
            b_hz=max(MIN_B_HZ, s.b_hz + rng.normal(0.0, settings.jitter_b_hz)),
        )
    result = fine_tune(start, experiment, settings, bath, owned)
    return [(result.spins[i].a_hz, result.spins[i].b_hz) for i in owned]


def fine_tune_uncertainty(
    candidates: Sequence[SpinParams],
    experiment: Trace,
    settings: FineTuneSettings,
    bath: Optional[np.ndarray] = None,
    owned: Optional[Sequence[int]] = None,
    seed: int = 0,
    workers: int = 1,
) -> List[Tuple[float, float]]:
    """
    Standard deviation of (A, B) over repeated fine-tunes from jittered starts.

    Returns:
        (σ_A, σ_B) per owned spin; zeros when repeats < 2
    """
    owned = list(range(len(candidates))) if owned is None else list(owned)
    repeats = settings.uncertainty_repeats
    if repeats < 2 or not owned:
        return [(0.0, 0.0)] * len(owned)

    seeds = np.random.SeedSequence(seed).generate_state(repeats)
    jobs = [(list(candidates), experiment, settings, bath, owned, int(s)) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_jittered_run, jobs))
    else:
        runs = [_jittered_run(job) for job in jobs]

    values = np.array(runs)
    std = values.std(axis=0, ddof=1)
    return [(float(a), float(b)) for a, b in std]
