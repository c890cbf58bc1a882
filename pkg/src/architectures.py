"""
Network families used by the pipeline: HPC and dip-count classifiers, (A, B)
regressors and the convolutional denoiser.
"""

import logging
from typing import List, Sequence

from .layers import NetworkError
from .models import LayerKind, LayerSpec
from .network import Network

logger = logging.getLogger(__name__)


def dense_block(in_features: int, out_features: int, slope: float = 0.01) -> List[LayerSpec]:
    """Dense → BatchNorm1d → LeakyRelu."""
    return [
        LayerSpec(kind=LayerKind.DENSE, in_features=in_features, out_features=out_features),
        LayerSpec(kind=LayerKind.BATCH_NORM, num_features=out_features),
        LayerSpec(kind=LayerKind.LEAKY_RELU, slope=slope),
    ]


def _dense_stack(input_dim: int, hidden: Sequence[int], slope: float) -> List[LayerSpec]:
    specs: List[LayerSpec] = []
    width = input_dim
    for h in hidden:
        specs += dense_block(width, h, slope)
        width = h
    return specs


def classifier_specs(input_dim: int, n_classes: int, hidden: Sequence[int] = (1024, 512, 256), slope: float = 0.01) -> List[LayerSpec]:
    """Stacked dense blocks and a K-way sigmoid head."""
    width = hidden[-1] if hidden else input_dim
    return _dense_stack(input_dim, hidden, slope) + [
        LayerSpec(kind=LayerKind.DENSE, in_features=width, out_features=n_classes),
        LayerSpec(kind=LayerKind.SIGMOID),
    ]


def hpc_classifier(input_dim: int, n_classes: int = 3, hidden: Sequence[int] = (1024, 512, 256),
                   slope: float = 0.01, seed: int = 0) -> Network:
    return Network(classifier_specs(input_dim, n_classes, hidden, slope), (input_dim,), seed=seed)


def dip_count_classifier(input_dim: int, n_classes: int = 5, hidden: Sequence[int] = (512, 256),
                         slope: float = 0.01, seed: int = 0) -> Network:
    return Network(classifier_specs(input_dim, n_classes, hidden, slope), (input_dim,), seed=seed)


def regression_model(input_dim: int, hidden: Sequence[int] = (512, 256), slope: float = 0.01, seed: int = 0) -> Network:
    """Dense blocks ending in two linear units: normalized (A, B) on the target contour."""
    width = hidden[-1] if hidden else input_dim
    specs = _dense_stack(input_dim, hidden, slope) + [
        LayerSpec(kind=LayerKind.DENSE, in_features=width, out_features=2),
    ]
    return Network(specs, (input_dim,), seed=seed)


def denoiser_specs(channels: Sequence[int] = (16, 32, 64), slope: float = 0.01) -> List[LayerSpec]:
    """
    Length-preserving encoder/decoder.

    Each encoder stage is Conv1d(kernel 4, padding (1, 2)) → BatchNorm1d →
    LeakyRelu → MaxPool1d(2); each decoder stage doubles the length with
    TransposedConv1d(kernel 4, stride 2, padding (1, 1)). A final Conv1d maps
    back to one channel and a Sigmoid keeps outputs in [0, 1].
    """
    specs: List[LayerSpec] = []
    c_in = 1
    for c in channels:
        specs += [
            LayerSpec(kind=LayerKind.CONV1D, in_channels=c_in, out_channels=c, kernel_size=4, padding=(1, 2)),
            LayerSpec(kind=LayerKind.BATCH_NORM, num_features=c),
            LayerSpec(kind=LayerKind.LEAKY_RELU, slope=slope),
            LayerSpec(kind=LayerKind.MAX_POOL1D, pool_size=2),
        ]
        c_in = c
    for c in list(channels[-2::-1]) + [channels[0]]:
        specs += [
            LayerSpec(kind=LayerKind.TRANSPOSED_CONV1D, in_channels=c_in, out_channels=c,
                      kernel_size=4, stride=2, padding=(1, 1)),
            LayerSpec(kind=LayerKind.BATCH_NORM, num_features=c),
            LayerSpec(kind=LayerKind.LEAKY_RELU, slope=slope),
        ]
        c_in = c
    specs += [
        LayerSpec(kind=LayerKind.CONV1D, in_channels=c_in, out_channels=1, kernel_size=4, padding=(1, 2)),
        LayerSpec(kind=LayerKind.SIGMOID),
    ]
    return specs


def denoiser(window: int, channels: Sequence[int] = (16, 32, 64), slope: float = 0.01, seed: int = 0) -> Network:
    """
    Convolutional denoiser over windows of `window` points.

    Raises:
        NetworkError: If the window is not divisible by 2 ** len(channels)
    """
    if not channels:
        raise NetworkError("The denoiser needs at least one encoder stage")
    factor = 2 ** len(channels)
    if window % factor:
        raise NetworkError(f"Denoiser window {window} must be divisible by {factor}")
    return Network(denoiser_specs(channels, slope), (1, window), seed=seed)
