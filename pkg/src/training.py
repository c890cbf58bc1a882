"""
Losses, the mini-batch training loop and finite-difference gradient checking.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from scipy.special import xlogy
from tqdm import tqdm

from .layers import NetworkError
from .models import LossKind, TrainConfig
from .network import Network
from .optimizers import make_optimizer

logger = logging.getLogger(__name__)

_TINY = 1e-12


class TrainingDivergedError(Exception):
    """Custom exception raised when the loss or the weights become non-finite."""

    def __init__(self, message: str, epoch: int, history: "TrainingHistory"):
        super().__init__(message)
        self.epoch = epoch
        self.history = history


def loss_value(kind: LossKind, pred: np.ndarray, target: np.ndarray) -> float:
    """Mean loss over every element."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if kind == LossKind.MSE:
        return float(np.mean((pred - target) ** 2))
    p = np.clip(pred, 0.0, 1.0)
    return float(-np.mean(xlogy(target, np.maximum(p, _TINY)) + xlogy(1.0 - target, np.maximum(1.0 - p, _TINY))))


def loss_gradient(kind: LossKind, pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """d(mean loss)/d(pred), in the dtype of pred."""
    n = pred.size
    if kind == LossKind.MSE:
        return (2.0 * (pred - target) / n).astype(pred.dtype)
    p = np.clip(pred.astype(np.float64), 0.0, 1.0)
    grad = (-target / np.maximum(p, _TINY) + (1.0 - target) / np.maximum(1.0 - p, _TINY)) / n
    return grad.astype(pred.dtype)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: Optional[float] = None
    val_accuracy: Optional[float] = None


@dataclass
class TrainingHistory:
    records: List[EpochRecord] = field(default_factory=list)

    @property
    def final_train_loss(self) -> Optional[float]:
        return self.records[-1].train_loss if self.records else None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(r) for r in self.records], columns=list(EpochRecord.__dataclass_fields__))

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


def accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax score matches the argmax label."""
    if scores.shape[0] == 0:
        return 0.0
    return float(np.mean(np.argmax(scores, axis=1) == np.argmax(labels, axis=1)))


def evaluate_loss(network: Network, x: np.ndarray, y: np.ndarray, kind: LossKind, batch_size: int = 256) -> float:
    pred = network.predict(x, batch_size)
    return loss_value(kind, pred, y)


def train(
    network: Network,
    x_train: np.ndarray,
    y_train: np.ndarray,
    cfg: TrainConfig,
    x_val: Optional[np.ndarray] = None,
    y_val: Optional[np.ndarray] = None,
    progress: bool = False,
) -> TrainingHistory:
    """
    Train a network in place with mini-batches and a per-epoch decaying learning rate.

    Args:
        network: Network to update
        x_train: Inputs (n, input_dim)
        y_train: Targets (n, output_dim)
        cfg: Loss, schedule, batch size, optimizer and seed
        x_val: Optional validation inputs
        y_val: Optional validation targets
        progress: Show a tqdm bar over epochs

    Returns:
        TrainingHistory with one record per epoch

    Raises:
        NetworkError: If the training set is empty or inputs and targets disagree in length
        TrainingDivergedError: If the loss or weights become non-finite; the weights of
            the last completed epoch are restored first
    """
    if len(x_train) == 0:
        raise NetworkError("Cannot train on an empty dataset")
    if len(x_train) != len(y_train):
        raise NetworkError(f"{len(x_train)} inputs but {len(y_train)} targets")

    history = TrainingHistory()
    if cfg.epochs == 0:
        logger.warning("Training for 0 epochs; the network keeps its initial weights")
        return history

    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(network, cfg)
    has_val = x_val is not None and y_val is not None and len(x_val) > 0
    n = len(x_train)

    for epoch in tqdm(range(cfg.epochs), desc="epochs", disable=not progress):
        checkpoint = network.state_dict()
        optimizer.lr = cfg.lr_for_epoch(epoch)
        order = rng.permutation(n)
        network.train()
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            yb = np.asarray(y_train[batch], dtype=network.dtype)
            pred = network.forward(x_train[batch])
            loss = loss_value(cfg.loss, pred, yb)
            if not np.isfinite(loss):
                network.load_state_dict(checkpoint)
                network.eval()
                logger.error(f"Loss became non-finite in epoch {epoch}; restored weights of the previous epoch")
                raise TrainingDivergedError(f"Training diverged in epoch {epoch}", epoch, history)
            network.backward(loss_gradient(cfg.loss, pred, yb))
            optimizer.step()
            total += loss * len(batch)
        network.eval()

        if not network.all_finite():
            network.load_state_dict(checkpoint)
            logger.error(f"Weights became non-finite in epoch {epoch}; restored weights of the previous epoch")
            raise TrainingDivergedError(f"Training diverged in epoch {epoch}", epoch, history)

        record = EpochRecord(epoch=epoch, lr=optimizer.lr, train_loss=total / n)
        if has_val:
            scores = network.predict(x_val, cfg.batch_size)
            record.val_loss = loss_value(cfg.loss, scores, y_val)
            if cfg.loss == LossKind.BCE:
                record.val_accuracy = accuracy(scores, y_val)
        history.records.append(record)
        logger.debug(f"Epoch {epoch}: lr={record.lr:.3g} train={record.train_loss:.5f} val={record.val_loss}")

    logger.info(f"Trained {cfg.epochs} epochs, final train loss {history.final_train_loss:.5f}")
    return history


@dataclass
class GradCheckResult:
    relative_errors: Dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.relative_errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom < _TINY:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradient_check(
    network: Network,
    x: np.ndarray,
    y: np.ndarray,
    kind: LossKind,
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckResult:
    """
    Compare backprop gradients with central differences on a float64 copy.

    The check runs in training mode, so batch norm uses batch statistics.
    Every parameter element is perturbed; keep networks small.

    Returns:
        GradCheckResult with the relative error per parameter tensor and for the input
    """
    net = network.copy(dtype=np.float64).train()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)

    def total_loss(inputs: np.ndarray) -> float:
        out = net.forward(inputs)
        return loss_value(kind, out, y)

    pred = net.forward(x)
    input_grad = net.backward(loss_gradient(kind, pred, y))
    errors: Dict[str, float] = {}

    for key, layer, name in net.parameters():
        analytic = layer.grads[name].copy()
        param = layer.params[name]
        numeric = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            original = param[idx]
            param[idx] = original + step
            up = total_loss(x)
            param[idx] = original - step
            down = total_loss(x)
            param[idx] = original
            numeric[idx] = (up - down) / (2 * step)
        errors[key] = _relative_error(analytic, numeric)

    numeric_input = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        bumped = x.copy()
        bumped[idx] += step
        up = total_loss(bumped)
        bumped[idx] -= 2 * step
        down = total_loss(bumped)
        numeric_input[idx] = (up - down) / (2 * step)
    errors["input"] = _relative_error(input_grad, numeric_input)

    result = GradCheckResult(relative_errors=errors, tolerance=tolerance)
    logger.info(f"Gradient check max relative error {result.max_error:.2e} over {len(errors)} tensors")
    return result