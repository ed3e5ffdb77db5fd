"""Classification metrics for the 4-class ordinal risk scale and confident-example selection."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError
from .geodata import RISK_CLASSES

NUM_CLASSES = 4


def confusion_matrix(preds, labels, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.size == 0:
        raise ValidationError("cannot build a confusion matrix from zero samples")
    if preds.shape != labels.shape:
        raise ValidationError("predictions and labels differ in length")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValidationError(f"{name} outside 0..{num_classes - 1}")
    return np.bincount(labels * num_classes + preds, minlength=num_classes**2).reshape(num_classes, num_classes)


def _check(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValidationError("confusion matrix must be square")
    if cm.sum() <= 0:
        raise ValidationError("confusion matrix is empty")
    return cm


def accuracy(cm) -> float:
    cm = _check(cm)
    return float(np.trace(cm) / cm.sum())


def adjusted_accuracy(cm, tolerance: int = 1) -> float:
    """Fraction of predictions at most ``tolerance`` classes away from the truth."""
    cm = _check(cm)
    t, p = np.indices(cm.shape)
    return float(cm[np.abs(t - p) <= tolerance].sum() / cm.sum())


def per_class_f1(cm) -> np.ndarray:
    cm = _check(cm).astype(float)
    tp = np.diag(cm)
    denom = cm.sum(0) + cm.sum(1)  # 2tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(denom > 0, 2 * tp / denom, 0.0)
    return f1


def weighted_f1(cm) -> float:
    """Support-weighted mean of per-class F1; classes without support weigh zero."""
    cm = _check(cm)
    support = cm.sum(1)
    return float((per_class_f1(cm) * support).sum() / support.sum())


@dataclass
class EvalReport:
    accuracy: float
    adjusted_accuracy: float
    weighted_f1: float
    avg_loss: float
    confusion_matrix: list
    n: int

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        return (
            f"n={self.n} accuracy={self.accuracy:.4f} adjusted={self.adjusted_accuracy:.4f} "
            f"f1={self.weighted_f1:.4f} loss={self.avg_loss:.4f}"
        )


def report_from_predictions(probs, labels, eps: float = 1e-12) -> EvalReport:
    """Build a report from class probabilities (n, 4) and integer labels."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValidationError("cannot evaluate an empty split")
    cm = confusion_matrix(probs.argmax(1), labels, probs.shape[1])
    loss = float(-np.log(np.clip(probs[np.arange(len(labels)), labels], eps, None)).mean())
    return EvalReport(accuracy(cm), adjusted_accuracy(cm), weighted_f1(cm), loss, cm.tolist(), int(len(labels)))


@torch.no_grad()
def predict(model, data, batch_size: int = 32) -> tuple:
    """Softmax probabilities and labels for a dataset or loader, with the model in eval mode."""
    loader = data if isinstance(data, torch.utils.data.DataLoader) else torch.utils.data.DataLoader(
        data, batch_size=batch_size, shuffle=False
    )
    model.eval()
    probs, labels = [], []
    for x, y in loader:
        probs.append(F.softmax(model(x).double(), dim=1).numpy())
        labels.append(np.asarray(y))
    if not probs:
        raise ValidationError("cannot evaluate an empty split")
    return np.concatenate(probs), np.concatenate(labels)


def evaluate(model, data, batch_size: int = 32) -> EvalReport:
    probs, labels = predict(model, data, batch_size)
    return report_from_predictions(probs, labels)


@dataclass
class ConfidentExample:
    ref: object
    true_class: int
    predicted_class: int
    probability: float


def top_confident_true_positives(probs, labels, refs=None, k: int = 10) -> dict:
    """Per class, the ``k`` correctly classified samples with the highest predicted probability.

    Ties keep sample order.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    refs = list(range(len(labels))) if refs is None else list(refs)
    pred = probs.argmax(1)
    conf = probs.max(1)
    out = {}
    for c in range(probs.shape[1]):
        idx = np.flatnonzero((labels == c) & (pred == c))
        order = idx[np.argsort(-conf[idx], kind="stable")][:k]
        out[c] = [ConfidentExample(refs[i], c, c, float(conf[i])) for i in order]
    return out


def render_confusion_matrix(cm, path, title: str = "", class_names=RISK_CLASSES) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cm = np.asarray(cm)
    fig, ax = plt.subplots(figsize=(5, 4.5), dpi=100)
    ax.imshow(cm, cmap="Blues")
    for (t, p), v in np.ndenumerate(cm):
        ax.text(p, t, str(v), ha="center", va="center", color="white" if v > cm.max() / 2 else "black")
    ax.set_xticks(range(len(class_names)), class_names, rotation=30, ha="right")
    ax.set_yticks(range(len(class_names)), class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
