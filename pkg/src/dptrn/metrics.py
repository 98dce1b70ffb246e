"""Accuracy, macro recall, macro F1 and the best/mean-over-seeds summary."""

import numpy as np


def predictions_from(logits_or_preds):
    """Argmax over the last axis for 2-D logits (ties go to the lowest index); 1-D passes through."""
    arr = np.asarray(logits_or_preds)
    if arr.ndim == 2:
        return np.argmax(arr, axis=1)
    return arr.astype(np.int64)


def confusion_matrix(y_true, y_pred, n_classes):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    for name, arr in (("label", y_true), ("prediction", y_pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} out of range [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return counts


def evaluate(logits_or_preds, labels, n_classes=None):
    """Metrics dict with ``accuracy``, ``macro_recall``, ``macro_f1``, ``confusion``.

    Classes that never occur in ``labels`` count as recall 0 and are listed
    under ``absent_classes``.
    """
    arr = np.asarray(logits_or_preds)
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = arr.shape[1] if arr.ndim == 2 else int(max(labels.max(), arr.max())) + 1
    preds = predictions_from(arr)
    cm = confusion_matrix(labels, preds, n_classes)
    tp = np.diag(cm).astype(float)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    recall = np.divide(tp, support, out=np.zeros(n_classes), where=support > 0)
    precision = np.divide(tp, predicted, out=np.zeros(n_classes), where=predicted > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    total = cm.sum()
    return {
        "accuracy": float(tp.sum() / total) if total else 0.0,
        "macro_recall": float(recall.mean()),
        "macro_f1": float(f1.mean()),
        "confusion": cm,
        "absent_classes": [int(c) for c in np.flatnonzero(support == 0)],
    }


SCALAR_METRICS = ("accuracy", "macro_recall", "macro_f1")


def aggregate_seeds(runs):
    """``{metric: {"best": max, "mean": mean}}`` over a non-empty list of metric dicts."""
    if not runs:
        raise ValueError("no runs to aggregate")
    out = {}
    for key in SCALAR_METRICS:
        values = np.array([r[key] for r in runs], dtype=float)
        out[key] = {"best": float(values.max()), "mean": float(values.mean())}
    return out


def metrics_json(metrics):
    """Flat JSON-friendly copy (confusion matrix as nested lists)."""
    out = {k: metrics[k] for k in SCALAR_METRICS}
    out["confusion"] = np.asarray(metrics["confusion"]).tolist()
    out["absent_classes"] = list(metrics.get("absent_classes", []))
    return out
