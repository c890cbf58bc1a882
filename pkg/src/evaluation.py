"""
Held-out evaluation of trained models.

Classifiers are scored from their sigmoid outputs: one-vs-rest ROC curves and
AUC per class, the confusion matrix and accuracy from the argmax, and
macro-averaged precision and average precision (mAP). Regressors report the
mean absolute and squared errors per output.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from sklearn.metrics import (
    accuracy_score,
    average_precision_score,
    confusion_matrix,
    mean_absolute_error,
    mean_squared_error,
    precision_score,
    roc_auc_score,
    roc_curve,
)

from .dataset_store import Dataset
from .model_io import TrainedModel

logger = logging.getLogger(__name__)


class EvaluationError(Exception):
    """Custom exception for evaluations that cannot be computed."""
    pass


@dataclass
class ClassificationMetrics:
    accuracy: float
    precision_macro: float
    mean_average_precision: float
    auc: Dict[int, float]
    confusion: np.ndarray
    roc: Dict[int, pd.DataFrame] = field(default_factory=dict)
    n_samples: int = 0

    @property
    def auc_macro(self) -> float:
        values = [v for v in self.auc.values() if not np.isnan(v)]
        return float(np.mean(values)) if values else float("nan")

    def summary(self) -> Dict:
        return {
            "kind": "classifier",
            "n_samples": self.n_samples,
            "accuracy": self.accuracy,
            "precision_macro": self.precision_macro,
            "mean_average_precision": self.mean_average_precision,
            "auc": {str(k): v for k, v in self.auc.items()},
            "auc_macro": self.auc_macro,
            "confusion": self.confusion.tolist(),
        }


@dataclass
class RegressionMetrics:
    mae: List[float]
    mse: List[float]
    n_samples: int = 0

    def summary(self) -> Dict:
        return {"kind": "regressor", "n_samples": self.n_samples, "mae": self.mae, "mse": self.mse}


def evaluate_classifier(scores: np.ndarray, labels: np.ndarray) -> ClassificationMetrics:
    """
    Metrics of K-way sigmoid scores against one-hot labels.

    Classes absent from the labels get an AUC of NaN and are left out of the
    macro averages.

    Raises:
        EvaluationError: If scores and labels disagree in shape or are empty
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2 or scores.shape[0] == 0:
        raise EvaluationError(f"Scores {scores.shape} and labels {labels.shape} must be equal, non-empty (n, K)")

    n_classes = scores.shape[1]
    y_true = labels.argmax(axis=1)
    y_pred = scores.argmax(axis=1)
    present = [c for c in range(n_classes) if np.any(y_true == c)]

    auc, roc = {}, {}
    for c in range(n_classes):
        positive = y_true == c
        if positive.all() or not positive.any():
            auc[c] = float("nan")
            continue
        fpr, tpr, thresholds = roc_curve(positive, scores[:, c])
        auc[c] = float(roc_auc_score(positive, scores[:, c]))
        roc[c] = pd.DataFrame({"fpr": fpr, "tpr": tpr, "threshold": thresholds})

    ap = [average_precision_score(y_true == c, scores[:, c]) for c in present if not np.all(y_true == c)]
    metrics = ClassificationMetrics(
        accuracy=float(accuracy_score(y_true, y_pred)),
        precision_macro=float(precision_score(y_true, y_pred, labels=present, average="macro", zero_division=0)),
        mean_average_precision=float(np.mean(ap)) if ap else float("nan"),
        auc=auc,
        confusion=confusion_matrix(y_true, y_pred, labels=list(range(n_classes))),
        roc=roc,
        n_samples=int(scores.shape[0]),
    )
    logger.info(f"Classifier on {metrics.n_samples} samples: accuracy {metrics.accuracy:.3f}, "
                f"macro AUC {metrics.auc_macro:.3f}, mAP {metrics.mean_average_precision:.3f}")
    return metrics


def evaluate_regressor(predictions: np.ndarray, targets: np.ndarray) -> RegressionMetrics:
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape or predictions.shape[0] == 0:
        raise EvaluationError(f"Predictions {predictions.shape} and targets {targets.shape} must be equal and non-empty")
    return RegressionMetrics(
        mae=[float(v) for v in mean_absolute_error(targets, predictions, multioutput="raw_values")],
        mse=[float(v) for v in mean_squared_error(targets, predictions, multioutput="raw_values")],
        n_samples=int(predictions.shape[0]),
    )


def evaluate_model(model: TrainedModel, dataset: Dataset, batch_size: int = 256):
    """Score a model on a held-out dataset; the role decides classifier or regressor metrics."""
    role = model.reuse_key.role
    inputs = dataset.inputs
    if role == "denoiser":
        inputs = inputs.reshape(len(inputs), 1, -1)
    outputs = model.network.predict(inputs, batch_size)
    if role in ("hpc", "dip_count"):
        return evaluate_classifier(outputs, dataset.labels)
    return evaluate_regressor(outputs.reshape(len(outputs), -1), dataset.labels.reshape(len(outputs), -1))


def evaluate_models(models: Dict[str, TrainedModel], test_sets: Dict[str, Dataset]) -> Dict[str, object]:
    """
    Evaluate each named model on the test set of the same name.

    Raises:
        EvaluationError: If a model has no test set
    """
    missing = sorted(set(models) - set(test_sets))
    if missing:
        raise EvaluationError(f"No test set for models: {', '.join(missing)}")
    return {name: evaluate_model(model, test_sets[name]) for name, model in sorted(models.items())}


def export_metrics(metrics: Dict[str, object], out_dir: Path, extra: Optional[Dict] = None) -> Path:
    """
    Write metrics.json, one confusion-matrix CSV and one ROC CSV per classifier.

    Returns:
        Path of metrics.json
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {name: m.summary() for name, m in metrics.items()}
    if extra:
        summary["_run"] = extra

    for name, m in metrics.items():
        if not isinstance(m, ClassificationMetrics):
            continue
        labels = [f"class_{c + 1}" for c in range(m.confusion.shape[0])]
        pd.DataFrame(m.confusion, index=labels, columns=labels).to_csv(out_dir / f"{name}_confusion.csv")
        frames = [frame.assign(cls=c + 1) for c, frame in sorted(m.roc.items())]
        if frames:
            pd.concat(frames, ignore_index=True)[["cls", "fpr", "tpr", "threshold"]].to_csv(
                out_dir / f"{name}_roc.csv", index=False, float_format="%.10g"
            )

    path = out_dir / "metrics.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=_json_default)
    logger.info(f"Wrote metrics of {len(metrics)} models to {out_dir}")
    return path


def _json_default(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    raise TypeError(f"Cannot serialize {type(value).__name__}")
