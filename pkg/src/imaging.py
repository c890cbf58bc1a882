"""
Target-period image representation.

A trace is cut into slices one candidate period apart and the slices are
stacked into rows; a spin whose period matches the slicing period shows up as
a vertical dip line through the centre column.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from .models import AcquisitionConfig, Interp, PeriodDictionary, PeriodImage, Trace

logger = logging.getLogger(__name__)

DICTIONARY_SCHEMA = "spindetect-period-dictionary/1"
DEFAULT_SLICES = 33


class ImagingError(Exception):
    """Custom exception for slicing and dictionary errors."""
    pass


def build_period_dictionary(
    larmor_hz: float,
    a_min_hz: float = -50_000.0,
    a_max_hz: float = 50_000.0,
    a_step_hz: float = 50.0,
    b_ref_hz: float = 10_000.0,
) -> PeriodDictionary:
    """
    Pre-compute target periods on a regular A grid at fixed reference B.

    Args:
        larmor_hz: 13C Larmor frequency
        a_min_hz: First A of the grid
        a_max_hz: Last A of the grid (inclusive)
        a_step_hz: Grid step
        b_ref_hz: Transverse coupling used for every entry

    Returns:
        PeriodDictionary with one entry per grid A

    Raises:
        ImagingError: If the range or step is invalid
    """
    if a_step_hz <= 0:
        raise ImagingError(f"a_step_hz must be positive, got {a_step_hz}")
    if a_max_hz < a_min_hz:
        raise ImagingError(f"a_min_hz ({a_min_hz}) must not exceed a_max_hz ({a_max_hz})")

    count = int(math.floor((a_max_hz - a_min_hz) / a_step_hz + 1e-6)) + 1
    a_hz = a_min_hz + np.arange(count, dtype=np.float64) * a_step_hz
    tp_s = 1.0 / (np.hypot(a_hz + larmor_hz, b_ref_hz) + larmor_hz)
    logger.debug(f"Built period dictionary with {count} entries ({a_min_hz} to {a_max_hz} Hz)")
    return PeriodDictionary(larmor_hz=larmor_hz, a_step_hz=a_step_hz, b_ref_hz=b_ref_hz, a_hz=a_hz, tp_s=tp_s)


def save_period_dictionary(dictionary: PeriodDictionary, path: Path) -> Path:
    """Write the dictionary as a versioned, sorted TSV table (index, a_hz, tp_s)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({
        "index": np.arange(len(dictionary)),
        "a_hz": dictionary.a_hz,
        "tp_s": dictionary.tp_s,
    })
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# {DICTIONARY_SCHEMA}\n")
        f.write(f"# larmor_hz={dictionary.larmor_hz!r}\n")
        f.write(f"# a_step_hz={dictionary.a_step_hz!r}\n")
        f.write(f"# b_ref_hz={dictionary.b_ref_hz!r}\n")
        frame.to_csv(f, sep="\t", index=False, float_format="%.17g")
    return path


def load_period_dictionary(path: Path) -> PeriodDictionary:
    """
    Read a dictionary written by save_period_dictionary.

    Raises:
        ImagingError: If the file is missing, has another schema or is malformed
    """
    path = Path(path)
    if not path.exists():
        raise ImagingError(f"Period dictionary not found: {path}")

    meta = {}
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != f"# {DICTIONARY_SCHEMA}":
            raise ImagingError(f"{path} is not a period dictionary (header '{header}')")
        for line in f:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            meta[key] = float(value)

    frame = pd.read_csv(path, sep="\t", comment="#")
    if list(frame.columns) != ["index", "a_hz", "tp_s"]:
        raise ImagingError(f"Unexpected dictionary columns in {path}: {list(frame.columns)}")
    if not np.array_equal(frame["index"].to_numpy(), np.arange(len(frame))):
        raise ImagingError(f"Dictionary indices in {path} are not sorted and contiguous")

    try:
        return PeriodDictionary(
            larmor_hz=meta["larmor_hz"],
            a_step_hz=meta["a_step_hz"],
            b_ref_hz=meta["b_ref_hz"],
            a_hz=frame["a_hz"].to_numpy(dtype=np.float64),
            tp_s=frame["tp_s"].to_numpy(dtype=np.float64),
        )
    except (KeyError, ValueError) as e:
        raise ImagingError(f"Malformed period dictionary {path}: {e}")


def crop_width_for(
    a_hz: float,
    wide_width_s: float = 100e-9,
    narrow_width_s: float = 60e-9,
    narrow_below_hz: float = 10_000.0,
) -> float:
    """Image window width for a target A: narrow close to A = 0, wide elsewhere (ties go wide)."""
    return narrow_width_s if abs(a_hz) < narrow_below_hz else wide_width_s


@dataclass(frozen=True)
class SliceGeometry:
    """Where the pixels of a period image sit on the τ axis."""
    tp_s: float
    origin_s: float
    n_slices: int
    n_cols: int
    pitch_s: float

    @property
    def width_s(self) -> float:
        return self.n_cols * self.pitch_s

    def pixel_times(self) -> np.ndarray:
        rows = self.origin_s + np.arange(self.n_slices)[:, None] * self.tp_s
        cols = (np.arange(self.n_cols) - self.n_cols / 2.0) * self.pitch_s
        return rows + cols[None, :]


def _first_dip_origin(cfg: AcquisitionConfig, tp_s: float, width_s: float) -> float:
    k = max(0, math.ceil((cfg.tau_start_s + width_s / 2.0) / tp_s - 0.5 - 1e-12))
    return (k + 0.5) * tp_s


def slice_geometry(
    cfg: AcquisitionConfig,
    tp_s: float,
    width_s: float,
    n_slices: Optional[int] = None,
    origin_s: Optional[float] = None,
) -> SliceGeometry:
    """
    Lay out the rows of a period image on the acquisition grid.

    Args:
        cfg: Acquisition grid being sliced
        tp_s: Slicing period
        width_s: Requested window width (rounded to whole pixels of one τ step)
        n_slices: Number of rows; None takes 33 or as many as fit
        origin_s: Centre of row 0; defaults to the first expected dip time

    Returns:
        SliceGeometry

    Raises:
        ImagingError: If the window exceeds the period or the trace is too short
    """
    if tp_s <= 0:
        raise ImagingError(f"Slicing period must be positive, got {tp_s}")
    if width_s > tp_s:
        raise ImagingError(f"Window width {width_s:.3e} s exceeds the slicing period {tp_s:.3e} s")

    pitch = cfg.tau_step_s
    n_cols = max(1, int(round(width_s / pitch)))
    half = n_cols * pitch / 2.0
    origin = _first_dip_origin(cfg, tp_s, n_cols * pitch) if origin_s is None else origin_s
    if origin - half < cfg.tau_start_s - 1e-15:
        raise ImagingError(f"Row 0 starts at {origin - half:.3e} s, before the trace start {cfg.tau_start_s:.3e} s")

    end = cfg.tau_start_s + cfg.total_length_s
    last_pixel = half - pitch
    available = end - origin
    fit = int(math.floor((available - last_pixel) / tp_s + 1e-9)) + 1 if available >= last_pixel else 0

    if n_slices is None:
        n_slices = min(DEFAULT_SLICES, fit)
        if n_slices < 1:
            raise ImagingError(
                f"Trace too short for one slice: requires {origin + last_pixel:.3e} s, available {end:.3e} s"
            )
    elif n_slices > fit:
        required = origin + (n_slices - 1) * tp_s + last_pixel
        raise ImagingError(
            f"Trace too short for {n_slices} slices at period {tp_s:.6e} s: "
            f"requires {required:.6e} s, available {end:.6e} s"
        )

    return SliceGeometry(tp_s=tp_s, origin_s=origin, n_slices=n_slices, n_cols=n_cols, pitch_s=pitch)


def grid_positions(geometry: SliceGeometry, cfg: AcquisitionConfig) -> np.ndarray:
    """Pixel times in fractional grid-index units."""
    return (geometry.pixel_times() - cfg.tau_start_s) / cfg.tau_step_s


def required_grid_indices(geometry: SliceGeometry, cfg: AcquisitionConfig, interp: Interp) -> np.ndarray:
    """Sorted grid indices whose values determine every pixel of the image."""
    u = grid_positions(geometry, cfg)
    if interp == Interp.NEAREST:
        idx = np.rint(u)
    else:
        lower = np.floor(u)
        idx = np.concatenate([lower.ravel(), lower.ravel() + 1])
    return np.unique(np.clip(idx, 0, cfg.n_points - 1).astype(np.int64))


def stack_from_samples(
    geometry: SliceGeometry,
    cfg: AcquisitionConfig,
    indices: np.ndarray,
    values: np.ndarray,
    interp: Interp = Interp.LINEAR,
) -> PeriodImage:
    """
    Build a period image from trace values known at a sorted subset of grid indices.

    The subset must contain required_grid_indices(geometry, cfg, interp); the
    result is then identical to slicing the full trace.
    """
    u = grid_positions(geometry, cfg)
    if interp == Interp.NEAREST:
        pos = np.searchsorted(indices, np.clip(np.rint(u), 0, cfg.n_points - 1).astype(np.int64))
        pixels = values[pos]
    else:
        pixels = np.interp(u, indices.astype(np.float64), values)
    return PeriodImage(
        pixels=np.clip(pixels, 0.0, 1.0),
        tp_s=geometry.tp_s,
        width_s=geometry.width_s,
        origin_s=geometry.origin_s,
        pixel_pitch_s=geometry.pitch_s,
        interp=interp,
    )


def slice_and_stack(
    trace: Trace,
    tp_s: float,
    width_s: float,
    n_slices: Optional[int] = None,
    interp: Interp = Interp.LINEAR,
    origin_s: Optional[float] = None,
) -> PeriodImage:
    """
    Cut a trace at a candidate period and stack the slices into an image.

    Row r covers τ in [origin + r·tp - width/2, origin + r·tp + width/2) with a
    pixel pitch of one τ step.

    Args:
        trace: Trace to slice
        tp_s: Slicing period
        width_s: Window width
        n_slices: Number of rows (None: 33 or as many as fit)
        interp: Resampling mode
        origin_s: Centre of row 0 (None: first expected dip time)

    Returns:
        PeriodImage

    Raises:
        ImagingError: If the trace is too short or the window exceeds the period
    """
    geometry = slice_geometry(trace.config, tp_s, width_s, n_slices, origin_s)
    indices = np.arange(trace.config.n_points)
    return stack_from_samples(geometry, trace.config, indices, trace.values, interp)


def flatten_image(img: PeriodImage) -> np.ndarray:
    """Row-major pixel vector."""
    return img.pixels.reshape(-1).copy()


def unflatten_image(vector: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    vector = np.asarray(vector)
    if vector.size != shape[0] * shape[1]:
        raise ImagingError(f"Cannot reshape {vector.size} values into {shape}")
    return vector.reshape(shape)


def row_argmin_columns(img: PeriodImage) -> np.ndarray:
    """Column of the deepest pixel in every row."""
    return img.pixels.argmin(axis=1)


def export_pgm(img: PeriodImage, path: Path) -> Path:
    """Write an 8-bit binary PGM for inspection."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width = img.shape
    data = np.rint(img.pixels * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(data.tobytes())
    return path


def read_pgm(path: Path) -> np.ndarray:
    """Read an 8-bit binary PGM back into [0, 1] pixel values."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P5" or tokens[3] != "255":
        raise ImagingError(f"{path} is not an 8-bit binary PGM")
    width, height = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos + 1:pos + 1 + width * height], dtype=np.uint8)
    return data.reshape(height, width) / 255.0


def export_pixels_csv(img: PeriodImage, path: Path) -> Path:
    """Lossless CSV of the raw pixel values (one image row per line)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(img.pixels).to_csv(path, index=False, header=False, float_format="%.17g")
    return path
