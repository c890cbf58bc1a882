"""
Sequential network built from LayerSpecs.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .layers import Layer, NetworkError, build_layer
from .models import LayerSpec

logger = logging.getLogger(__name__)


class Network:
    """
    Ordered stack of layers with a fixed per-sample input shape.

    Inputs arrive as (batch, features) and are reshaped to (batch, *input_shape);
    outputs are flattened back to (batch, features).
    """

    def __init__(
        self,
        specs: Sequence[LayerSpec],
        input_shape: Tuple[int, ...],
        seed: int = 0,
        dtype=np.float32,
    ):
        if not specs:
            raise NetworkError("A network needs at least one layer")
        self.specs: List[LayerSpec] = list(specs)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.dtype = np.dtype(dtype)
        self.training = False

        rng = np.random.default_rng(seed)
        self.layers: List[Layer] = []
        self._shapes = [self.input_shape]
        for i, spec in enumerate(self.specs):
            layer = build_layer(spec, rng, self.dtype)
            try:
                self._shapes.append(layer.output_shape(self._shapes[-1]))
            except NetworkError as e:
                raise NetworkError(f"Layer {i} ({spec.kind.value}): {e}")
            self.layers.append(layer)

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def output_dim(self) -> int:
        return int(np.prod(self._shapes[-1]))

    @property
    def n_parameters(self) -> int:
        return sum(p.size for layer in self.layers for p in layer.params.values())

    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    def forward(self, x: np.ndarray) -> np.ndarray:
        """
        Run a batch through every layer.

        Args:
            x: Array of shape (batch, input_dim) or (batch, *input_shape)

        Returns:
            Array of shape (batch, output_dim)

        Raises:
            NetworkError: On a shape mismatch, naming the offending layer index
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim < 2 or int(np.prod(x.shape[1:])) != self.input_dim:
            raise NetworkError(f"Layer 0 ({self.specs[0].kind.value}): expected input {self.input_shape}, got {x.shape[1:]}")
        batch = x.shape[0]
        out = x.reshape((batch,) + self.input_shape)
        for i, layer in enumerate(self.layers):
            try:
                out = layer.forward(out, self.training)
            except NetworkError as e:
                raise NetworkError(f"Layer {i} ({layer.kind.value}): {e}")
        return out.reshape(batch, -1)

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        """Propagate dL/d(output) back through the stack; fills every layer's grads and returns dL/d(input)."""
        grad = np.asarray(grad, dtype=self.dtype)
        out = grad.reshape((grad.shape[0],) + self._shapes[-1])
        for i in reversed(range(len(self.layers))):
            try:
                out = self.layers[i].backward(out)
            except NetworkError as e:
                raise NetworkError(f"Layer {i}: {e}")
        return out.reshape(grad.shape[0], -1)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode forward in batches; leaves the mode unchanged."""
        mode = self.training
        self.training = False
        try:
            x = np.asarray(x)
            if x.shape[0] == 0:
                return np.zeros((0, self.output_dim), dtype=self.dtype)
            return np.concatenate([self.forward(x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)])
        finally:
            self.training = mode

    def parameters(self) -> List[Tuple[str, Layer, str]]:
        """(qualified name, layer, parameter name) for every trainable tensor, in layer order."""
        return [
            (f"layers.{i}.{name}", layer, name)
            for i, layer in enumerate(self.layers)
            for name in sorted(layer.params)
        ]

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed `layers.<i>.<name>`."""
        state = {}
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                state[f"layers.{i}.{name}"] = layer.params[name].copy()
            for name in sorted(layer.buffers):
                state[f"layers.{i}.{name}"] = layer.buffers[name].copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        if set(state) != expected:
            missing = sorted(expected - set(state))
            unexpected = sorted(set(state) - expected)
            raise NetworkError(f"State mismatch: missing {missing}, unexpected {unexpected}")
        for i, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for name in store:
                    value = np.asarray(state[f"layers.{i}.{name}"])
                    if value.shape != store[name].shape:
                        raise NetworkError(
                            f"Layer {i} {name}: expected shape {store[name].shape}, got {value.shape}"
                        )
                    store[name] = value.astype(self.dtype).copy()

    def copy(self, dtype: Optional[np.dtype] = None) -> "Network":
        """Independent copy, optionally converted to another float dtype."""
        clone = Network(self.specs, self.input_shape, seed=0, dtype=dtype or self.dtype)
        clone.load_state_dict(self.state_dict())
        clone.training = self.training
        return clone

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.state_dict().values())
