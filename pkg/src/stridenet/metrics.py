"""Confusion-matrix metrics: OA, AA, Cohen's kappa and macro P/R/F1."""

from __future__ import annotations

import numpy as np

__all__ = ["confusion_matrix", "compute_metrics"]


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label shapes differ: {y_true.shape} vs {y_pred.shape}")
    for name, arr in (("true", y_true), ("predicted", y_pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} labels outside 0..{num_classes - 1}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # 0/0 per-class ratios count as 0
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def compute_metrics(cm) -> dict[str, float]:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    if (cm < 0).any():
        raise ValueError("confusion matrix entries must be non-negative")
    total = cm.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    cm = cm.astype(np.float64)
    diag = np.diag(cm)
    rows, cols = cm.sum(axis=1), cm.sum(axis=0)

    recall = _safe_ratio(diag, rows)
    precision = _safe_ratio(diag, cols)
    f1 = _safe_ratio(2 * precision * recall, precision + recall)

    p_o = diag.sum() / total
    p_e = float((rows * cols).sum() / total**2)
    kappa = (p_o - p_e) / (1.0 - p_e) if p_e < 1.0 else (1.0 if p_o == 1.0 else 0.0)
    return {
        "OA": float(p_o),
        "AA": float(recall.mean()),
        "kappa": float(kappa),
        "precision": float(precision.mean()),
        "recall": float(recall.mean()),
        "f1": float(f1.mean()),
    }
