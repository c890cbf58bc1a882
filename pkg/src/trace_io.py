"""
Trace and scene files.

A trace is stored as CSV with columns `tau_s,p_x` (values written with 17
significant digits) next to a JSON sidecar holding its acquisition settings
and kind. Traces without a sidecar are accepted when the caller supplies the
pulse count; the τ grid is then read from the CSV and must be uniform.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from .models import AcquisitionConfig, SpinParams, Trace, TraceKind

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["tau_s", "p_x"]


class TraceIOError(Exception):
    """Custom exception for unreadable or inconsistent trace and scene files."""
    pass


def sidecar_path(path: Path) -> Path:
    return Path(path).with_suffix(".json")


def save_trace(trace: Trace, path: Path) -> Path:
    """Write the CSV and its sidecar; returns the CSV path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"tau_s": trace.tau, "p_x": trace.values})
    frame.to_csv(path, index=False, float_format="%.17g")
    sidecar = {
        "config": trace.config.model_dump(mode="json"),
        "kind": trace.kind.value,
        "low_confidence_points": int(trace.low_confidence.sum()) if trace.low_confidence is not None else 0,
    }
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    logger.debug(f"Saved {trace.kind.value} trace ({trace.config.n_points} points) to {path}")
    return path


def _config_from_grid(tau: np.ndarray, n_pulses: int, field_gauss: Optional[float], larmor_hz: Optional[float]) -> AcquisitionConfig:
    if tau.size < 2:
        raise TraceIOError("A trace needs at least two τ points")
    steps = np.diff(tau)
    step = float(np.median(steps))
    if step <= 0 or np.max(np.abs(steps - step)) > 1e-6 * step:
        raise TraceIOError("τ values must be increasing on a uniform grid")
    return AcquisitionConfig(
        n_pulses=n_pulses,
        field_gauss=field_gauss,
        larmor_hz=larmor_hz,
        tau_start_s=float(tau[0]),
        tau_end_s=float(tau[0] + step * (tau.size - 1)),
        tau_step_s=step,
    )


def load_trace(
    path: Path,
    n_pulses: Optional[int] = None,
    field_gauss: Optional[float] = None,
    larmor_hz: Optional[float] = None,
    kind: TraceKind = TraceKind.NOISY,
) -> Trace:
    """
    Read a trace CSV.

    Args:
        path: CSV with tau_s and p_x columns
        n_pulses: Pulse count, required when there is no sidecar
        field_gauss: Field for traces without sidecar (or larmor_hz)
        larmor_hz: Larmor frequency for traces without sidecar
        kind: Kind assigned to traces without sidecar

    Returns:
        Trace

    Raises:
        TraceIOError: If the file is missing, malformed or disagrees with its sidecar
    """
    path = Path(path)
    if not path.exists():
        raise TraceIOError(f"Trace file not found: {path}")
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise TraceIOError(f"Cannot parse trace {path}: {e}")
    missing = [c for c in TRACE_COLUMNS if c not in frame.columns]
    if missing:
        raise TraceIOError(f"Trace {path} lacks columns {missing}")
    if frame[TRACE_COLUMNS].isna().any().any():
        raise TraceIOError(f"Trace {path} has empty cells")

    tau = frame["tau_s"].to_numpy(dtype=np.float64)
    values = frame["p_x"].to_numpy(dtype=np.float64)

    side = sidecar_path(path)
    if side.exists():
        with open(side, "r", encoding="utf-8") as f:
            meta = json.load(f)
        config = AcquisitionConfig(**meta["config"])
        kind = TraceKind(meta.get("kind", kind.value))
        if n_pulses is not None and n_pulses != config.n_pulses:
            raise TraceIOError(f"{path} was recorded with N={config.n_pulses}, not N={n_pulses}")
        if config.n_points != tau.size or not np.allclose(tau, config.tau_grid(), rtol=0.0, atol=1e-3 * config.tau_step_s):
            raise TraceIOError(f"τ column of {path} disagrees with the acquisition settings in {side}")
    else:
        if n_pulses is None:
            raise TraceIOError(f"{path} has no sidecar; the pulse count must be given")
        if field_gauss is None and larmor_hz is None:
            raise TraceIOError(f"{path} has no sidecar; a field or Larmor frequency must be given")
        config = _config_from_grid(tau, n_pulses, field_gauss, larmor_hz)

    if np.any(values < 0.0) or np.any(values > 1.0):
        logger.warning(f"{path}: {int(np.sum((values < 0) | (values > 1)))} values outside [0, 1] were clipped")
        values = np.clip(values, 0.0, 1.0)
    return Trace(config=config, values=values, kind=kind)


def save_scene(spins: List[SpinParams], path: Path, extra: Optional[Dict] = None) -> Path:
    """Ground-truth spins of a simulated scene as JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"spins": [s.model_dump() for s in spins], **(extra or {})}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return path


def load_spins(path: Path) -> List[SpinParams]:
    """
    Spins from a scene JSON ({"spins": [...]} or a bare list) or a CSV with a_hz,b_hz columns.

    Raises:
        TraceIOError: If the file is missing or malformed
    """
    path = Path(path)
    if not path.exists():
        raise TraceIOError(f"Spin file not found: {path}")
    try:
        if path.suffix.lower() == ".csv":
            frame = pd.read_csv(path)
            records = frame[["a_hz", "b_hz"]].to_dict("records")
        else:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
            records = data["spins"] if isinstance(data, dict) else data
        return [SpinParams.from_signed(float(r["a_hz"]), float(r["b_hz"])) for r in records]
    except (KeyError, TypeError, ValueError, json.JSONDecodeError, pd.errors.ParserError) as e:
        raise TraceIOError(f"Malformed spin file {path}: {e}")
