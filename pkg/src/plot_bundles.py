"""
Plot-ready data bundles.

Writes the data behind the usual figures as plain files: trace overlays
(measured points against the trace reproduced from detected spins), confidence
curves per regime and period images of detected spins as PGM. Interactive HTML
versions of the overlay and the curves are rendered with plotly when requested.
"""

import logging
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from .config import RunConfig
from .imaging import ImagingError, export_pgm, slice_and_stack
from .models import ConfidenceCurve, DetectedSpin, SpinParams, Trace, TraceKind
from .spinmodel import apply_decoherence, cpmg_signal, fit_decoherence, target_period

logger = logging.getLogger(__name__)

OVERLAY_COLUMNS = ["tau_s", "p_measured", "p_reproduced"]
CURVE_COLUMNS = ["index", "A_hz", "score"]


class PlotBundleError(Exception):
    """Custom exception for bundle inputs that do not fit together."""
    pass


def reproduce_trace(measured: Trace, spins: Sequence[SpinParams]) -> Trace:
    """Trace of the given spins on the measured grid, damped like the measurement when it is not pure."""
    pure = cpmg_signal(list(spins), measured.config)
    if measured.kind in (TraceKind.PURE, TraceKind.RECOVERED):
        return pure
    return apply_decoherence(pure, fit_decoherence(measured))


def overlay_frame(measured: Trace, reproduced: Trace) -> pd.DataFrame:
    if measured.config.n_points != reproduced.config.n_points or not np.allclose(measured.tau, reproduced.tau):
        raise PlotBundleError("Measured and reproduced traces must share one τ grid")
    return pd.DataFrame({
        "tau_s": measured.tau,
        "p_measured": measured.values,
        "p_reproduced": reproduced.values,
    })


def curve_frame(curve: ConfidenceCurve) -> pd.DataFrame:
    frame = pd.DataFrame({"index": curve.indices, "A_hz": curve.a_hz, "score": curve.scores})
    return frame.sort_values("index", kind="stable").reset_index(drop=True)


def read_curve_csv(path: Path) -> pd.DataFrame:
    frame = pd.read_csv(path)
    missing = [c for c in CURVE_COLUMNS if c not in frame.columns]
    if missing:
        raise PlotBundleError(f"Confidence CSV {path} lacks columns {missing}")
    return frame[CURVE_COLUMNS].sort_values("index", kind="stable").reset_index(drop=True)


def _write_html(fig, path: Path) -> Path:
    fig.write_html(str(path), include_plotlyjs="cdn")
    return path


def write_overlay(frame: pd.DataFrame, out_dir: Path, html: bool = False) -> List[Path]:
    """overlay.csv plus overlay.html when html is set."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / "overlay.csv"]
    frame[OVERLAY_COLUMNS].to_csv(written[0], index=False, float_format="%.17g")
    if html:
        import plotly.graph_objects as go

        fig = go.Figure()
        fig.add_trace(go.Scatter(x=frame["tau_s"] * 1e6, y=frame["p_measured"], mode="markers",
                                 marker={"size": 3}, name="measured"))
        fig.add_trace(go.Scatter(x=frame["tau_s"] * 1e6, y=frame["p_reproduced"], mode="lines",
                                 name="reproduced"))
        fig.update_layout(title="Measured vs reproduced coherence", xaxis_title="τ (µs)", yaxis_title="P_x")
        written.append(_write_html(fig, out_dir / "overlay.html"))
    return written


def write_curve(frame: pd.DataFrame, name: str, out_dir: Path, html: bool = False) -> List[Path]:
    """confidence_{name}.csv sorted by index, plus an HTML line chart when html is set."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = frame.sort_values("index", kind="stable")
    written = [out_dir / f"confidence_{name}.csv"]
    frame[CURVE_COLUMNS].to_csv(written[0], index=False, float_format="%.17g")
    if html:
        import plotly.express as px

        fig = px.line(frame.assign(A_khz=frame["A_hz"] / 1e3), x="A_khz", y="score",
                      title=f"Confidence curve ({name})",
                      labels={"A_khz": "A (kHz) at reference B", "score": "Target-present score"})
        fig.update_yaxes(range=[0, 1.05])
        written.append(_write_html(fig, out_dir / f"confidence_{name}.html"))
    return written


def write_spin_images(trace: Trace, spins: Sequence[DetectedSpin], config: RunConfig, out_dir: Path) -> Dict[int, Path]:
    """
    Period image of every detected spin, sliced at its own target period.

    Spins whose image does not fit the trace are skipped with a warning.

    Returns:
        Mapping of 1-based report position to PGM path
    """
    out_dir = Path(out_dir)
    written: Dict[int, Path] = {}
    larmor = trace.config.larmor_hz
    for number, spin in enumerate(spins, start=1):
        params = SpinParams(a_hz=spin.a_hz, b_hz=spin.b_hz)
        tp_s = target_period(params, larmor)
        try:
            image = slice_and_stack(trace, tp_s, config.image_width_for(spin.a_hz),
                                    config.imaging.n_slices, config.imaging.interp)
        except ImagingError as e:
            logger.warning(f"No image for spin {number} (A={spin.a_hz:.0f} Hz): {e}")
            continue
        written[number] = export_pgm(image, out_dir / f"spin_{number:03d}.pgm")
    return written
