"""
Versioned binary model files.

Layout: 8-byte magic, u32 schema version, u32 header length, UTF-8 JSON header
(layer specs, input shape, reuse key, tensor table, metadata), little-endian
float32 tensors in header order, then the SHA-256 of everything before it.
"""

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .models import LayerSpec, ReuseKey
from .network import Network

logger = logging.getLogger(__name__)

MAGIC = b"SPNDTNN\x00"
SCHEMA_VERSION = 1
_HEAD = struct.Struct("<8sII")
_DIGEST = 32


class ModelFormatError(Exception):
    """Custom exception for unreadable or corrupted model files."""
    pass


class ReuseKeyMismatchError(Exception):
    """Custom exception raised when a model is loaded for an acquisition it was not trained for."""

    def __init__(self, path: Path, differences: Dict[str, tuple]):
        listed = ", ".join(f"{k}: model={a} job={b}" for k, (a, b) in differences.items())
        super().__init__(f"Model {path} cannot be reused for this job ({listed})")
        self.differences = differences


@dataclass
class TrainedModel:
    """A network with the acquisition key it is valid for and free-form metadata."""
    network: Network
    reuse_key: ReuseKey
    metadata: dict = field(default_factory=dict)


def reuse_key_differences(stored: ReuseKey, expected: ReuseKey) -> Dict[str, tuple]:
    """Fields that differ; optional fields unset on the expected side are not compared."""
    diffs = {}
    for name, want in expected.model_dump().items():
        have = getattr(stored, name)
        if want is None:
            continue
        if isinstance(want, float) and isinstance(have, float):
            if math.isclose(have, want, rel_tol=1e-9, abs_tol=0.0):
                continue
        elif have == want:
            continue
        diffs[name] = (have, want)
    return diffs


def save_model(model: TrainedModel, path: Path) -> Path:
    """Write a model file; identical models give identical bytes."""
    network = model.network
    state = network.state_dict()
    names = sorted(state, key=lambda k: (int(k.split(".")[1]), k))
    header = {
        "layers": [spec.model_dump(mode="json") for spec in network.specs],
        "input_shape": list(network.input_shape),
        "reuse_key": model.reuse_key.model_dump(mode="json"),
        "tensors": [{"name": n, "shape": list(state[n].shape)} for n in names],
        "metadata": model.metadata,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(state[n], dtype="<f4").tobytes() for n in names)
    payload = _HEAD.pack(MAGIC, SCHEMA_VERSION, len(header_bytes)) + header_bytes + body

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload + hashlib.sha256(payload).digest())
    logger.info(f"Saved {model.reuse_key.role} model ({network.n_parameters} parameters) to {path}")
    return path


def load_model(path: Path, expected_key: Optional[ReuseKey] = None) -> TrainedModel:
    """
    Read a model file, verify its checksum and optionally its reuse key.

    Args:
        path: Model file
        expected_key: Acquisition key of the job; None skips the check

    Returns:
        TrainedModel in eval mode

    Raises:
        FileNotFoundError: If the file does not exist
        ModelFormatError: If the file is truncated, corrupted or of another format
        ReuseKeyMismatchError: If the stored key differs from expected_key
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEAD.size + _DIGEST:
        raise ModelFormatError(f"{path} is too short to be a model file")
    payload, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    magic, version, header_len = _HEAD.unpack_from(payload)
    if magic != MAGIC:
        raise ModelFormatError(f"{path} is not a model file")
    if version != SCHEMA_VERSION:
        raise ModelFormatError(f"{path} has unsupported schema version {version}")
    if hashlib.sha256(payload).digest() != digest:
        raise ModelFormatError(f"Checksum mismatch in {path}; the file is corrupted")

    try:
        header = json.loads(payload[_HEAD.size:_HEAD.size + header_len].decode("utf-8"))
        specs: List[LayerSpec] = [LayerSpec(**s) for s in header["layers"]]
        reuse_key = ReuseKey(**header["reuse_key"])
        network = Network(specs, tuple(header["input_shape"]))
        state = {}
        offset = _HEAD.size + header_len
        for entry in header["tensors"]:
            count = int(np.prod(entry["shape"]))
            values = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
            state[entry["name"]] = values.reshape(entry["shape"])
            offset += 4 * count
        if offset != len(payload):
            raise ModelFormatError(f"{path} has {len(payload) - offset} unexpected trailing bytes")
        network.load_state_dict(state)
    except ModelFormatError:
        raise
    except Exception as e:
        raise ModelFormatError(f"Cannot parse model {path}: {e}")

    if expected_key is not None:
        diffs = reuse_key_differences(reuse_key, expected_key)
        if diffs:
            raise ReuseKeyMismatchError(path, diffs)

    logger.debug(f"Loaded {reuse_key.role} model from {path}")
    return TrainedModel(network=network.eval(), reuse_key=reuse_key, metadata=header.get("metadata", {}))
