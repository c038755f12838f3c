"""Binary classification metrics for imbalanced patch sets.

F1 is computed for the positive class only. AUC uses the pairwise
(rank-sum) formulation: the fraction of (positive, negative) score pairs
where the positive outscores the negative, ties counted as half. Both are
exact; no curve interpolation anywhere.
"""

import json
from dataclasses import dataclass, field

import numpy as np


def confusion_counts(predictions, labels):
    """tp/fp/fn/tn counts; predictions and labels are 0/1 arrays."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(
            f"predictions shape {predictions.shape} != labels shape {labels.shape}")
    tp = int(np.sum((predictions == 1) & (labels == 1)))
    fp = int(np.sum((predictions == 1) & (labels == 0)))
    fn = int(np.sum((predictions == 0) & (labels == 1)))
    tn = int(np.sum((predictions == 0) & (labels == 0)))
    return {"tp": tp, "fp": fp, "fn": fn, "tn": tn}


def f1_score(tp, fp, fn):
    """Positive-class F1. Returns 0.0 when tp == 0 (including the
    degenerate no-positives-anywhere case; see f1_degenerate)."""
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def f1_degenerate(tp, fp, fn):
    """True when F1 is undefined because there are no positives at all."""
    return tp == 0 and fp == 0 and fn == 0


def _midranks(values):
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        # average of ranks i+1 .. j+1 (1-based)
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc_roc(scores, labels):
    """Probability a random positive outscores a random negative.

    Computed via mid-ranks, which equals exhaustive pairwise comparison
    with ties worth 0.5. Raises on single-class input.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError(
            f"AUC needs both classes, got {n_pos} positives / {n_neg} negatives")
    ranks = _midranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def slide_seconds(prediction_rate, patches=200_000):
    """Seconds to classify one whole slide at the given patches/second."""
    if prediction_rate <= 0:
        raise ValueError("prediction rate must be positive")
    return patches / prediction_rate


@dataclass
class MetricsReport:
    f1: float
    auc: float
    confusion: dict
    prediction_rate_patches_per_s: float
    model_id: str = ""
    dataset_id: str = ""
    f1_degenerate: bool = False
    extras: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({
            "f1": self.f1,
            "auc": self.auc,
            "confusion": self.confusion,
            "prediction_rate_patches_per_s": self.prediction_rate_patches_per_s,
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
            "f1_degenerate": self.f1_degenerate,
            **self.extras,
        }, sort_keys=True)

    def to_text(self):
        c = self.confusion
        lines = [
            f"model:            {self.model_id}",
            f"dataset:          {self.dataset_id}",
            f"f1 (positive):    {self.f1:.4f}" + ("  [degenerate]" if self.f1_degenerate else ""),
            f"auc:              {self.auc:.4f}",
            f"confusion:        tp={c['tp']} fp={c['fp']} fn={c['fn']} tn={c['tn']}",
            f"prediction rate:  {self.prediction_rate_patches_per_s:.1f} patches/s",
            f"est. slide time:  {slide_seconds(self.prediction_rate_patches_per_s):.1f} s "
            f"(200000 patches)",
        ]
        return "\n".join(lines)
