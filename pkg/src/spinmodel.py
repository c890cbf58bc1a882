"""
Closed-form physics of the CPMG signal.

Single-spin coherence, the multi-spin product, the local target period,
electron decoherence with its inversion, and truncated Gaussian read-out noise.
Everything here is a pure function of its inputs.
"""

import logging
import math
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import curve_fit
from scipy.stats import truncnorm

from .models import AcquisitionConfig, DecoherenceParams, SpinParams, Trace, TraceKind

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]


class SpinModelError(Exception):
    """Custom exception for invalid physics inputs."""
    pass


def _coherence(a_hz: float, b_hz: float, larmor_hz: float, n_pulses: int, tau: np.ndarray) -> np.ndarray:
    w_l = TWO_PI * larmor_hz
    w_par = TWO_PI * a_hz + w_l
    w_tilde = math.hypot(w_par, TWO_PI * b_hz)
    if w_tilde == 0.0:
        return np.ones_like(tau)

    m_z = w_par / w_tilde
    m_x = TWO_PI * b_hz / w_tilde
    alpha = w_tilde * tau
    beta = w_l * tau
    cos_a, sin_a = np.cos(alpha), np.sin(alpha)
    cos_b, sin_b = np.cos(beta), np.sin(beta)

    cos_phi = np.clip(cos_a * cos_b - m_z * sin_a * sin_b, -1.0, 1.0)
    phi = np.arccos(cos_phi)
    denom = np.maximum(1.0 + cos_phi, 1e-300)
    dip = m_x * m_x * (1.0 - cos_a) * (1.0 - cos_b) / denom * np.sin(n_pulses * phi / 2.0) ** 2
    return np.clip(1.0 - dip, -1.0, 1.0)


def _as_tau(tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0):
        raise SpinModelError("τ must be non-negative")
    return tau


def single_spin_coherence(spin: SpinParams, cfg: AcquisitionConfig, tau) -> Union[float, np.ndarray]:
    """
    Coherence factor M_k of one nuclear spin under an N-pulse CPMG sequence.

    Args:
        spin: Hyperfine pair of the spin
        cfg: Acquisition settings (pulse count and Larmor frequency are used)
        tau: Half inter-pulse delay in seconds, scalar or array

    Returns:
        M_k in [-1, 1], same shape as tau

    Raises:
        SpinModelError: If any τ is negative
    """
    tau_arr = _as_tau(tau)
    m = _coherence(spin.a_hz, spin.b_hz, cfg.larmor_hz, cfg.n_pulses, tau_arr)
    return float(m) if m.ndim == 0 else m


def coherence_product(spins: Iterable[SpinParams], larmor_hz: float, n_pulses: int, tau) -> np.ndarray:
    """Product of M_k over all spins at the given τ values."""
    tau_arr = _as_tau(tau)
    product = np.ones_like(tau_arr)
    for spin in spins:
        product *= _coherence(spin.a_hz, spin.b_hz, larmor_hz, n_pulses, tau_arr)
    return product


def signal_at(spins: Iterable[SpinParams], larmor_hz: float, n_pulses: int, tau) -> np.ndarray:
    """Pure P_x values at arbitrary τ points."""
    return np.clip(0.5 * (1.0 + coherence_product(spins, larmor_hz, n_pulses, tau)), 0.0, 1.0)


def cpmg_signal(spins: Sequence[SpinParams], cfg: AcquisitionConfig) -> Trace:
    """
    Simulate the pure coherence trace P_x = (1 + ∏ M_k)/2 on the configured τ grid.

    Args:
        spins: Nuclear spins coupled to the sensor (may be empty)
        cfg: Acquisition settings

    Returns:
        Trace of kind PURE
    """
    values = signal_at(spins, cfg.larmor_hz, cfg.n_pulses, cfg.tau_grid())
    logger.debug(f"Simulated {len(spins)} spins on {cfg.n_points} τ points (N={cfg.n_pulses})")
    return Trace(config=cfg, values=values, kind=TraceKind.PURE)


def target_period(spin: SpinParams, larmor_hz: float) -> float:
    """
    Approximate dip spacing TP = 2π/(ω̃ + ω_L) of a spin, in seconds.

    Raises:
        SpinModelError: If ω̃ + ω_L is not positive
    """
    total = spin.omega_tilde_hz(larmor_hz) + larmor_hz
    if total <= 0:
        raise SpinModelError(f"ω̃ + ω_L must be positive, got {total} Hz")
    return 1.0 / total


def contour_a_for(tp_s: float, b_hz: float, larmor_hz: float) -> float:
    """
    A on the constant-period contour: the A whose spin with transverse coupling B has period tp_s.

    Raises:
        SpinModelError: If no real A reaches the requested period with this B
    """
    if tp_s <= 0:
        raise SpinModelError(f"Target period must be positive, got {tp_s}")
    w_tilde = 1.0 / tp_s - larmor_hz
    b_hz = abs(b_hz)
    if w_tilde < b_hz:
        raise SpinModelError(
            f"Period {tp_s:.6e} s is unreachable with B = {b_hz:.1f} Hz (ω̃/2π = {w_tilde:.1f} Hz)"
        )
    return math.sqrt(w_tilde * w_tilde - b_hz * b_hz) - larmor_hz


def equivalent_a(spin: SpinParams, larmor_hz: float, b_ref_hz: float) -> float:
    """A at reference B sharing this spin's target period (its position on the dictionary axis)."""
    return contour_a_for(target_period(spin, larmor_hz), b_ref_hz, larmor_hz)


def decoherence_envelope(tau, dp: DecoherenceParams) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64)
    if dp.is_sentinel:
        return np.ones_like(tau)
    return np.exp(-np.power(tau / dp.t_s, dp.n_exp))


def apply_decoherence(trace: Trace, dp: DecoherenceParams) -> Trace:
    """
    Damp a pure trace with the electron dephasing envelope.

    Raises:
        SpinModelError: If the trace is not PURE
    """
    if trace.kind != TraceKind.PURE:
        raise SpinModelError(f"apply_decoherence expects a pure trace, got {trace.kind.value}")
    envelope = decoherence_envelope(trace.tau, dp)
    values = 0.5 * (2.0 * trace.values - 1.0) * envelope + 0.5
    return trace.derive(values, TraceKind.DECOHERED)


def recover_decoherence(trace: Trace, dp: DecoherenceParams, envelope_floor: float = 0.05) -> Trace:
    """
    Undo the dephasing envelope of a decohered, denoised or raw noisy trace.

    NOISY traces are accepted for detection without a denoiser; their noise is
    scaled up by 1/envelope along with the signal. Points where the envelope is
    below envelope_floor are passed through unscaled and flagged in the
    low_confidence mask.

    Args:
        trace: DECOHERED, DENOISED or NOISY trace
        dp: Fitted or known decoherence parameters
        envelope_floor: Smallest envelope value that is divided out

    Returns:
        Trace of kind RECOVERED

    Raises:
        SpinModelError: For PURE or already RECOVERED traces
    """
    if trace.kind not in (TraceKind.DECOHERED, TraceKind.DENOISED, TraceKind.NOISY):
        raise SpinModelError(f"Cannot recover decoherence of a {trace.kind.value} trace")

    envelope = decoherence_envelope(trace.tau, dp)
    low = envelope < envelope_floor
    safe = np.where(low, 1.0, envelope)
    scaled = np.clip((trace.values - 0.5) / safe + 0.5, 0.0, 1.0)
    values = np.where(low, trace.values, scaled)

    if low.any():
        logger.warning(
            f"Envelope below {envelope_floor} on {int(low.sum())} of {low.size} points; passed through unscaled"
        )
    return trace.derive(values, TraceKind.RECOVERED, low_confidence=low)


def _envelope_model(tau_us: np.ndarray, t_us: float, n_exp: float) -> np.ndarray:
    return 0.5 * np.exp(-np.power(tau_us / t_us, n_exp)) + 0.5


def window_maxima(trace: Trace, window: Optional[int] = None):
    """Maximum of each consecutive window (one Larmor period by default) and the τ where it occurs."""
    cfg = trace.config
    if window is None:
        window = max(1, int(round(1.0 / (cfg.larmor_hz * cfg.tau_step_s))))
    n_windows = trace.values.size // window
    if n_windows == 0:
        return trace.tau[:1], trace.values[:1]
    blocks = trace.values[: n_windows * window].reshape(n_windows, window)
    arg = blocks.argmax(axis=1)
    rows = np.arange(n_windows)
    tau = trace.tau[: n_windows * window].reshape(n_windows, window)[rows, arg]
    return tau, blocks[rows, arg]


def fit_decoherence(trace: Trace, decay_tolerance: float = 0.01) -> DecoherenceParams:
    """
    Fit (T, n) of the dephasing envelope to the upper envelope of a trace.

    The envelope is sampled as the maximum over windows of one Larmor period,
    which skips coherence dips. Traces that never decay return the T = +inf
    sentinel with n = 1.

    Args:
        trace: Trace with a visible envelope decay
        decay_tolerance: Envelope drop below 1 that counts as decay

    Returns:
        Fitted DecoherenceParams
    """
    tau, peaks = window_maxima(trace)
    sentinel = DecoherenceParams(t_s=math.inf, n_exp=1.0)

    if peaks.size < 3 or peaks.min() >= 1.0 - decay_tolerance:
        logger.info("No envelope decay detected; using the non-decaying sentinel")
        return sentinel

    tau_us = tau * 1e6
    coherent = 2.0 * peaks - 1.0
    crossing = np.nonzero(coherent < math.exp(-1.0))[0]
    t0 = tau_us[crossing[0]] if crossing.size else tau_us[-1] * 2.0
    t0 = max(t0, tau_us[1] if tau_us.size > 1 else 1.0)

    try:
        (t_us, n_exp), _ = curve_fit(
            _envelope_model, tau_us, peaks,
            p0=(t0, 2.0),
            bounds=([1e-6, 0.1], [np.inf, 10.0]),
            maxfev=20000,
        )
    except (RuntimeError, ValueError) as e:
        logger.warning(f"Decoherence fit failed ({e}); using the non-decaying sentinel")
        return sentinel

    if not (np.isfinite(t_us) and np.isfinite(n_exp)):
        return sentinel

    logger.debug(f"Fitted decoherence T = {t_us:.3f} µs, n = {n_exp:.3f}")
    return DecoherenceParams(t_s=float(t_us) * 1e-6, n_exp=float(n_exp))


def truncated_noise(size: int, sigma: float, clip: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian samples truncated to [-clip, +clip]."""
    if sigma == 0:
        return np.zeros(size)
    bound = clip / sigma
    return truncnorm.rvs(-bound, bound, loc=0.0, scale=sigma, size=size, random_state=rng)


def truncated_noise_std(sigma: float, clip: float) -> float:
    """Theoretical standard deviation of truncated_noise."""
    if sigma == 0:
        return 0.0
    bound = clip / sigma
    return float(truncnorm.std(-bound, bound, loc=0.0, scale=sigma))


def make_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def add_gaussian_noise(trace: Trace, sigma: float, clip: float = 0.05, seed: SeedLike = None) -> Trace:
    """
    Add truncated Gaussian read-out noise and clamp to [0, 1].

    Args:
        trace: Input trace
        sigma: Standard deviation before truncation
        clip: Truncation bound of each noise sample
        seed: Seed or generator; identical seeds give identical traces

    Returns:
        Trace of kind NOISY

    Raises:
        SpinModelError: If sigma is negative
    """
    if sigma < 0:
        raise SpinModelError(f"Noise sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return trace.derive(trace.values, TraceKind.NOISY)
    noise = truncated_noise(trace.values.size, sigma, clip, make_rng(seed))
    return trace.derive(np.clip(trace.values + noise, 0.0, 1.0), TraceKind.NOISY)
