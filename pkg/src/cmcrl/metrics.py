"""Clustering (CACC, ARI) and classification (ACC, macro recall/precision, F1) metrics.

Class labels are 1..K; pseudo-labels are 1..m with -1 for noise. Noise is
dropped before the clustering metrics, so their denominator is N_C.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment


class EvaluationError(ValueError):
    """Metrics are undefined for the given input."""


@dataclass
class MetricsReport:
    acc: float = float("nan")
    recall: float = float("nan")
    precision: float = float("nan")
    f1: float = float("nan")
    cacc: float = float("nan")
    ari: float = float("nan")
    confusion_matrix: np.ndarray | None = field(default=None, repr=False)
    cluster_contingency: np.ndarray | None = field(default=None, repr=False)

    def scalars(self) -> dict:
        d = asdict(self)
        return {k: v for k, v in d.items() if not isinstance(v, np.ndarray) and v is not None}

    def write(self, out_dir, prefix: str = "metrics") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        scal = self.scalars()
        with open(out / f"{prefix}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(scal))
            w.writerow([repr(float(v)) for v in scal.values()])
        with open(out / f"{prefix}.txt", "w") as fh:
            for k, v in scal.items():
                fh.write(f"{k} = {float(v)!r}\n")
        if self.confusion_matrix is not None:
            np.savetxt(out / "confusion_matrix.csv", self.confusion_matrix, fmt="%d", delimiter=",")


def contingency(true_labels, pseudo_labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """K x m table N_ij over clustered samples, with its row and column label values."""
    y = np.asarray(true_labels)
    c = np.asarray(pseudo_labels)
    if y.shape != c.shape:
        raise EvaluationError("label arrays differ in length")
    keep = c != -1
    y, c = y[keep], c[keep]
    if len(y) == 0:
        raise EvaluationError("all samples are noise; clustering metrics undefined")
    classes, yi = np.unique(y, return_inverse=True)
    clusters, ci = np.unique(c, return_inverse=True)
    table = np.zeros((len(classes), len(clusters)), dtype=np.int64)
    np.add.at(table, (yi, ci), 1)
    return table, classes, clusters


def cacc(true_labels, pseudo_labels) -> float:
    """Best fraction of clustered samples matched under an injective cluster->class map.

    Solved as an assignment problem on the zero-padded square contingency
    table; clusters left unmatched (when m > K) count as errors.
    """
    table, _, _ = contingency(true_labels, pseudo_labels)
    n = max(table.shape)
    square = np.zeros((n, n), dtype=np.int64)
    square[: table.shape[0], : table.shape[1]] = table
    rows, cols = linear_sum_assignment(square, maximize=True)
    return float(square[rows, cols].sum() / table.sum())


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def ari(true_labels, pseudo_labels) -> float:
    """Adjusted Rand index from the contingency table.

    Degenerate case (both partitions a single block, zero denominator) returns 1.
    """
    table, _, _ = contingency(true_labels, pseudo_labels)
    n = table.sum()
    index = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    total = _comb2(n)
    expected = sum_a * sum_b / total if total > 0 else 0.0
    max_index = (sum_a + sum_b) / 2.0
    denom = max_index - expected
    if denom == 0:
        return 1.0
    return float((index - expected) / denom)


def confusion_matrix(true_labels, predicted_labels, num_classes: int) -> np.ndarray:
    y = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if y.shape != p.shape:
        raise EvaluationError("label arrays differ in length")
    if len(y) == 0:
        raise EvaluationError("cannot evaluate an empty set")
    for arr in (y, p):
        if arr.min() < 1 or arr.max() > num_classes:
            raise EvaluationError(f"labels must lie in 1..{num_classes}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y - 1, p - 1), 1)
    return cm


def classification_metrics(true_labels, predicted_labels, num_classes: int, f1_mode: str = "macro-harmonic"):
    """Return (acc, recall, precision, f1, confusion).

    Recall and precision are unweighted means of the per-class ratios over
    all K classes; 0/0 counts as 0. ``f1_mode="macro-harmonic"`` takes the
    harmonic mean of macro precision and macro recall; ``"per-class"``
    averages per-class F1 scores.
    """
    cm = confusion_matrix(true_labels, predicted_labels, num_classes)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rec_c = np.where(support > 0, tp / np.maximum(support, 1), 0.0)
        prec_c = np.where(predicted > 0, tp / np.maximum(predicted, 1), 0.0)
    acc = tp.sum() / cm.sum()
    recall = rec_c.mean()
    precision = prec_c.mean()
    if f1_mode == "macro-harmonic":
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    elif f1_mode == "per-class":
        denom = prec_c + rec_c
        f1 = np.where(denom > 0, 2 * prec_c * rec_c / np.where(denom > 0, denom, 1), 0.0).mean()
    else:
        raise ValueError(f"unknown f1_mode {f1_mode!r}")
    return float(acc), float(recall), float(precision), float(f1), cm


def cluster_composition(true_labels, pseudo_labels, class_names=None) -> list[dict]:
    """Per-cluster size, majority class and purity (noise excluded)."""
    table, classes, clusters = contingency(true_labels, pseudo_labels)
    rows = []
    for col, cid in enumerate(clusters):
        counts = table[:, col]
        top = int(np.argmax(counts))
        label = int(classes[top])
        rows.append({
            "cluster": int(cid),
            "size": int(counts.sum()),
            "majority_class": class_names[label - 1] if class_names else label,
            "majority_count": int(counts[top]),
            "purity": float(counts[top] / counts.sum()),
            **{f"n_{class_names[int(c) - 1] if class_names else int(c)}": int(v) for c, v in zip(classes, counts)},
        })
    return rows
