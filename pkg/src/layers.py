"""
Numpy layers of the feed-forward / 1D-convolutional network engine.

Dense layers take (batch, features); convolution, pooling and channel batch
norm take (batch, channels, length). Every layer caches what its backward
pass needs during a training-mode forward; eval-mode forwards are read-only.
"""

import logging
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .models import LayerKind, LayerSpec

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]


class NetworkError(Exception):
    """Custom exception for network construction, shape and call-order errors."""
    pass


class Layer:
    """Base layer: parameters, gradients and non-trainable buffers keyed by name."""

    kind: LayerKind

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self._cache = None

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise NetworkError(f"{self.kind.value}: backward called before a training-mode forward")
        cache, self._cache = self._cache, None
        return cache


def _expect_ndim(x: np.ndarray, ndim: int, kind: LayerKind) -> None:
    if x.ndim != ndim:
        raise NetworkError(f"{kind.value} expects {ndim}-D input, got shape {x.shape}")


class Dense(Layer):
    kind = LayerKind.DENSE

    def __init__(self, spec: LayerSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__(spec)
        if not spec.in_features or not spec.out_features:
            raise NetworkError("Dense layers need in_features and out_features")
        bound = 1.0 / np.sqrt(spec.in_features)
        self.params["weight"] = rng.uniform(-bound, bound, (spec.in_features, spec.out_features)).astype(dtype)
        self.params["bias"] = rng.uniform(-bound, bound, spec.out_features).astype(dtype)

    def output_shape(self, input_shape: Shape) -> Shape:
        if input_shape != (self.spec.in_features,):
            raise NetworkError(f"dense expects ({self.spec.in_features},) features, got {input_shape}")
        return (self.spec.out_features,)

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        _expect_ndim(x, 2, self.kind)
        if x.shape[1] != self.spec.in_features:
            raise NetworkError(f"dense expects {self.spec.in_features} features, got {x.shape[1]}")
        if training:
            self._cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x = self._take_cache()
        self.grads["weight"] = x.T @ grad
        self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"].T


class BatchNorm1d(Layer):
    """Batch normalization over the batch axis (and length for 3-D input), per feature or channel."""

    kind = LayerKind.BATCH_NORM

    def __init__(self, spec: LayerSpec, dtype=np.float32):
        super().__init__(spec)
        n = spec.num_features
        if not n:
            raise NetworkError("BatchNorm1d needs num_features")
        self.params["gamma"] = np.ones(n, dtype=dtype)
        self.params["beta"] = np.zeros(n, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(n, dtype=dtype)
        self.buffers["running_var"] = np.ones(n, dtype=dtype)

    def output_shape(self, input_shape: Shape) -> Shape:
        if input_shape[0] != self.spec.num_features:
            raise NetworkError(f"batch_norm_1d expects {self.spec.num_features} features, got {input_shape}")
        return input_shape

    @staticmethod
    def _layout(x: np.ndarray):
        if x.ndim == 2:
            return (0,), (1, -1)
        if x.ndim == 3:
            return (0, 2), (1, -1, 1)
        raise NetworkError(f"batch_norm_1d expects 2-D or 3-D input, got shape {x.shape}")

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        axes, shape = self._layout(x)
        if x.shape[1] != self.spec.num_features:
            raise NetworkError(f"batch_norm_1d expects {self.spec.num_features} features, got {x.shape[1]}")
        gamma = self.params["gamma"].reshape(shape)
        beta = self.params["beta"].reshape(shape)

        if not training:
            mean = self.buffers["running_mean"].reshape(shape)
            var = self.buffers["running_var"].reshape(shape)
            return gamma * (x - mean) / np.sqrt(var + self.spec.eps) + beta

        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.spec.eps)
        x_hat = (x - mean) * inv_std

        count = x.size // x.shape[1]
        m = self.spec.momentum
        unbiased = var.reshape(-1) * (count / max(count - 1, 1))
        self.buffers["running_mean"] = ((1 - m) * self.buffers["running_mean"] + m * mean.reshape(-1)).astype(x.dtype)
        self.buffers["running_var"] = ((1 - m) * self.buffers["running_var"] + m * unbiased).astype(x.dtype)

        self._cache = (x_hat, inv_std, axes, shape, count)
        return gamma * x_hat + beta

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x_hat, inv_std, axes, shape, count = self._take_cache()
        self.grads["gamma"] = (grad * x_hat).sum(axis=axes)
        self.grads["beta"] = grad.sum(axis=axes)
        d_hat = grad * self.params["gamma"].reshape(shape)
        return (inv_std / count) * (
            count * d_hat
            - d_hat.sum(axis=axes, keepdims=True)
            - x_hat * (d_hat * x_hat).sum(axis=axes, keepdims=True)
        )


class LeakyRelu(Layer):
    kind = LayerKind.LEAKY_RELU

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        if training:
            self._cache = x > 0
        return np.where(x > 0, x, self.spec.slope * x)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        positive = self._take_cache()
        return np.where(positive, grad, self.spec.slope * grad)


class Sigmoid(Layer):
    kind = LayerKind.SIGMOID

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        y = expit(x)
        if training:
            self._cache = y
        return y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        y = self._take_cache()
        return grad * y * (1.0 - y)


def _conv_length(length: int, kernel: int, stride: int, padding: Tuple[int, int]) -> int:
    return (length + padding[0] + padding[1] - kernel) // stride + 1


def _windows(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """(batch, channels, positions, kernel) view of every stride-th window."""
    return sliding_window_view(x, kernel, axis=2)[:, :, ::stride, :]


def _pad(x: np.ndarray, padding: Tuple[int, int]) -> np.ndarray:
    if padding == (0, 0):
        return x
    return np.pad(x, ((0, 0), (0, 0), padding))


def _crop(x: np.ndarray, padding: Tuple[int, int]) -> np.ndarray:
    left, right = padding
    return x[:, :, left: x.shape[2] - right]


class Conv1d(Layer):
    """1D cross-correlation with weight (out_channels, in_channels, kernel) and (left, right) zero padding."""

    kind = LayerKind.CONV1D

    def __init__(self, spec: LayerSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__(spec)
        if not spec.in_channels or not spec.out_channels:
            raise NetworkError("Conv1d needs in_channels and out_channels")
        bound = 1.0 / np.sqrt(spec.in_channels * spec.kernel_size)
        shape = (spec.out_channels, spec.in_channels, spec.kernel_size)
        self.params["weight"] = rng.uniform(-bound, bound, shape).astype(dtype)
        self.params["bias"] = rng.uniform(-bound, bound, spec.out_channels).astype(dtype)

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 2 or input_shape[0] != self.spec.in_channels:
            raise NetworkError(f"conv1d expects ({self.spec.in_channels}, length) input, got {input_shape}")
        length = _conv_length(input_shape[1], self.spec.kernel_size, self.spec.stride, self.spec.padding)
        if length < 1:
            raise NetworkError(f"conv1d input length {input_shape[1]} is shorter than the kernel")
        return (self.spec.out_channels, length)

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        _expect_ndim(x, 3, self.kind)
        self.output_shape(x.shape[1:])
        windows = _windows(_pad(x, self.spec.padding), self.spec.kernel_size, self.spec.stride)
        if training:
            self._cache = (windows, x.shape)
        return np.einsum("bclk,ock->bol", windows, self.params["weight"]) + self.params["bias"][None, :, None]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        windows, x_shape = self._take_cache()
        weight = self.params["weight"]
        s = self.spec.stride
        self.grads["weight"] = np.einsum("bol,bclk->ock", grad, windows)
        self.grads["bias"] = grad.sum(axis=(0, 2))

        left, right = self.spec.padding
        padded = np.zeros((x_shape[0], x_shape[1], x_shape[2] + left + right), dtype=grad.dtype)
        n_out = grad.shape[2]
        for k in range(self.spec.kernel_size):
            padded[:, :, k: k + s * (n_out - 1) + 1: s] += np.einsum("bol,oc->bcl", grad, weight[:, :, k])
        return _crop(padded, self.spec.padding)


class TransposedConv1d(Layer):
    """
    Transposed 1D convolution, the adjoint of Conv1d with the same kernel,
    stride and padding. Weight layout is (in_channels, out_channels, kernel);
    output length is (L - 1) * stride + kernel - left - right.
    """

    kind = LayerKind.TRANSPOSED_CONV1D

    def __init__(self, spec: LayerSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__(spec)
        if not spec.in_channels or not spec.out_channels:
            raise NetworkError("TransposedConv1d needs in_channels and out_channels")
        bound = 1.0 / np.sqrt(spec.out_channels * spec.kernel_size)
        shape = (spec.in_channels, spec.out_channels, spec.kernel_size)
        self.params["weight"] = rng.uniform(-bound, bound, shape).astype(dtype)
        self.params["bias"] = rng.uniform(-bound, bound, spec.out_channels).astype(dtype)

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 2 or input_shape[0] != self.spec.in_channels:
            raise NetworkError(
                f"transposed_conv1d expects ({self.spec.in_channels}, length) input, got {input_shape}"
            )
        left, right = self.spec.padding
        length = (input_shape[1] - 1) * self.spec.stride + self.spec.kernel_size - left - right
        if length < 1:
            raise NetworkError(f"transposed_conv1d padding {self.spec.padding} removes the whole output")
        return (self.spec.out_channels, length)

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        _expect_ndim(x, 3, self.kind)
        self.output_shape(x.shape[1:])
        weight = self.params["weight"]
        s, kernel = self.spec.stride, self.spec.kernel_size
        n_in = x.shape[2]
        full = np.zeros((x.shape[0], self.spec.out_channels, (n_in - 1) * s + kernel), dtype=x.dtype)
        for k in range(kernel):
            full[:, :, k: k + s * (n_in - 1) + 1: s] += np.einsum("bcl,co->bol", x, weight[:, :, k])
        if training:
            self._cache = x
        return _crop(full, self.spec.padding) + self.params["bias"][None, :, None]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x = self._take_cache()
        windows = _windows(_pad(grad, self.spec.padding), self.spec.kernel_size, self.spec.stride)
        self.grads["weight"] = np.einsum("bcl,bolk->cok", x, windows)
        self.grads["bias"] = grad.sum(axis=(0, 2))
        return np.einsum("bolk,cok->bcl", windows, self.params["weight"])


class MaxPool1d(Layer):
    """Non-overlapping max pooling; a trailing remainder shorter than the pool is dropped."""

    kind = LayerKind.MAX_POOL1D

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 2:
            raise NetworkError(f"max_pool1d expects (channels, length) input, got {input_shape}")
        length = input_shape[1] // self.spec.pool_size
        if length < 1:
            raise NetworkError(f"max_pool1d input length {input_shape[1]} is shorter than the pool")
        return (input_shape[0], length)

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        _expect_ndim(x, 3, self.kind)
        p = self.spec.pool_size
        n_out = self.output_shape(x.shape[1:])[1]
        blocks = x[:, :, : n_out * p].reshape(x.shape[0], x.shape[1], n_out, p)
        winners = blocks.argmax(axis=3)
        if training:
            self._cache = (winners, x.shape)
        return np.take_along_axis(blocks, winners[..., None], axis=3)[..., 0]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        winners, x_shape = self._take_cache()
        p = self.spec.pool_size
        n_out = winners.shape[2]
        blocks = np.zeros((x_shape[0], x_shape[1], n_out, p), dtype=grad.dtype)
        np.put_along_axis(blocks, winners[..., None], grad[..., None], axis=3)
        out = np.zeros(x_shape, dtype=grad.dtype)
        out[:, :, : n_out * p] = blocks.reshape(x_shape[0], x_shape[1], n_out * p)
        return out


def build_layer(spec: LayerSpec, rng: Optional[np.random.Generator] = None, dtype=np.float32) -> Layer:
    """Instantiate a layer from its spec; trainable weights are drawn from rng."""
    rng = rng or np.random.default_rng(0)
    if spec.kind == LayerKind.DENSE:
        return Dense(spec, rng, dtype)
    if spec.kind == LayerKind.BATCH_NORM:
        return BatchNorm1d(spec, dtype)
    if spec.kind == LayerKind.LEAKY_RELU:
        return LeakyRelu(spec)
    if spec.kind == LayerKind.SIGMOID:
        return Sigmoid(spec)
    if spec.kind == LayerKind.CONV1D:
        return Conv1d(spec, rng, dtype)
    if spec.kind == LayerKind.TRANSPOSED_CONV1D:
        return TransposedConv1d(spec, rng, dtype)
    if spec.kind == LayerKind.MAX_POOL1D:
        return MaxPool1d(spec)
    raise NetworkError(f"Unknown layer kind: {spec.kind}")
