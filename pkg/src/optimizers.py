"""
Adaptive-moment optimizers operating in place on a Network's parameters.
"""

import logging
from typing import Dict

import numpy as np

from .models import OptimizerKind, TrainConfig
from .network import Network

logger = logging.getLogger(__name__)


class Adam:
    """Adam with bias correction; the learning rate can be changed between steps."""

    def __init__(self, network: Network, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.network = network
        self.lr = lr
        self.base_lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def _moments(self, key: str, grad: np.ndarray):
        m = self._m.get(key)
        v = self._v.get(key)
        if m is None:
            m = np.zeros_like(grad)
            v = np.zeros_like(grad)
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        self._m[key], self._v[key] = m, v
        return m, v

    def _step_size(self) -> float:
        t = self.step_count
        return self.lr * np.sqrt(1.0 - self.beta2 ** t) / (1.0 - self.beta1 ** t)

    def _update(self, m: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self._step_size() * m / (np.sqrt(v) + self.eps)

    def step(self) -> None:
        self.step_count += 1
        for key, layer, name in self.network.parameters():
            grad = layer.grads.get(name)
            if grad is None:
                continue
            m, v = self._moments(key, grad)
            layer.params[name] = (layer.params[name] - self._update(m, v)).astype(layer.params[name].dtype)


class AdaBound(Adam):
    """
    Adam whose per-element step is clipped into bounds that converge to
    final_lr (scaled by the current lr / base_lr) as steps accumulate.
    """

    def __init__(self, network: Network, lr: float, final_lr: float = 0.1, gamma: float = 1e-3, **kwargs):
        super().__init__(network, lr, **kwargs)
        self.final_lr = final_lr
        self.gamma = gamma

    def bounds(self):
        t = self.step_count
        final = self.final_lr * self.lr / self.base_lr if self.base_lr > 0 else 0.0
        lower = final * (1.0 - 1.0 / (self.gamma * t + 1.0))
        upper = final * (1.0 + 1.0 / (self.gamma * t))
        return lower, upper

    def _update(self, m: np.ndarray, v: np.ndarray) -> np.ndarray:
        lower, upper = self.bounds()
        rate = np.clip(self._step_size() / (np.sqrt(v) + self.eps), lower, upper)
        return rate * m


def make_optimizer(network: Network, cfg: TrainConfig) -> Adam:
    if cfg.optimizer == OptimizerKind.ADAM:
        return Adam(network, cfg.lr_initial)
    return AdaBound(network, cfg.lr_initial, final_lr=cfg.final_lr, gamma=cfg.bound_gamma)
