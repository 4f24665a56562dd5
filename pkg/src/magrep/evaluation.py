"""k-fold splitting and binary classification metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow


def fold_sizes(n: int, k: int) -> np.ndarray:
    """Near-equal fold sizes; the first ``n % k`` folds hold one extra index."""
    return np.array([n // k + (f < n % k) for f in range(k)], dtype=np.int64)


def stratified_counts(class_counts, sizes) -> np.ndarray:
    """Per (class, fold) counts, each the floor or ceiling of n_c * |fold| / n.

    Row sums equal the class counts and column sums equal the fold sizes. Such
    a rounding always exists; it is found as an integral max-flow that
    distributes the leftover units after flooring.
    """
    counts = np.asarray(class_counts, dtype=np.int64)
    sizes = np.asarray(sizes, dtype=np.int64)
    n = int(counts.sum())
    prod = counts[:, None] * sizes[None, :]
    out = prod // n
    frac = prod % n > 0
    row_need = counts - out.sum(axis=1)
    col_need = sizes - out.sum(axis=0)
    if row_need.sum() == 0:
        return out
    m, k = out.shape
    # nodes: 0 source, 1..m classes, m+1..m+k folds, m+k+1 sink
    cap = np.zeros((m + k + 2, m + k + 2), dtype=np.int32)
    cap[0, 1:m + 1] = row_need
    cap[1:m + 1, m + 1:m + k + 1] = frac
    cap[m + 1:m + k + 1, -1] = col_need
    flow = maximum_flow(csr_matrix(cap), 0, m + k + 1)
    if flow.flow_value != row_need.sum():  # pragma: no cover - excluded by the rounding theorem
        raise RuntimeError("no consistent stratified rounding found")
    extra = flow.flow.toarray()[1:m + 1, m + 1:m + k + 1]
    return out + np.maximum(extra, 0)


def kfold_split(n: int, k: int, labels=None, stratified: bool = True, seed: int = 0) -> list[np.ndarray]:
    """Partition ``range(n)`` into ``k`` disjoint folds whose sizes differ by at most one.

    Indices are shuffled with ``seed``. When stratified, every fold holds each
    class in its proportional share rounded up or down, so no class count is
    more than one sample away from n_c * |fold| / n.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of samples n={n}")
    rng = np.random.default_rng(seed)
    sizes = fold_sizes(n, k)
    if not stratified or labels is None:
        bounds = np.cumsum(sizes)[:-1]
        return [np.sort(f) for f in np.split(rng.permutation(n), bounds)]
    labels = np.asarray(labels)
    if len(labels) != n:
        raise ValueError("labels length must equal n")
    classes = np.unique(labels)
    members = [rng.permutation(np.flatnonzero(labels == c)) for c in classes]
    table = stratified_counts([len(m) for m in members], sizes)
    folds = [[] for _ in range(k)]
    for row, idx in zip(table, members):
        for f, part in enumerate(np.split(idx, np.cumsum(row)[:-1])):
            folds[f].append(part)
    return [np.sort(np.concatenate(parts)) for parts in folds]


def _pair(y_true, y_pred):
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch {y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise ValueError("empty label vectors")
    return y_true, y_pred


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = _pair(y_true, y_pred)
    return float(np.count_nonzero(y_true == y_pred)) / y_true.size


def confusion_matrix(y_true, y_pred, positive_label=1) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) with respect to ``positive_label``."""
    y_true, y_pred = _pair(y_true, y_pred)
    t = y_true == positive_label
    p = y_pred == positive_label
    return (int(np.count_nonzero(t & p)), int(np.count_nonzero(~t & p)),
            int(np.count_nonzero(t & ~p)), int(np.count_nonzero(~t & ~p)))


def f1_binary(y_true, y_pred, positive_label=1) -> float:
    """Harmonic mean of precision and recall; 0.0 when both are zero or undefined.

    Evaluated as 2TP / (2TP + FP + FN), the same quantity without the two
    intermediate divisions.
    """
    tp, fp, fn, _ = confusion_matrix(y_true, y_pred, positive_label)
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


@dataclass
class Metrics:
    fold_accuracies: list
    overall_accuracy: float
    f1: float
    confusion: tuple  # (TP, FP, FN, TN), positive = deposit
    mean_cv_accuracy: Optional[float] = None
    context: dict = field(default_factory=dict)  # mode, representation, kernel, C, seed

    def __post_init__(self):
        if self.mean_cv_accuracy is None:
            self.mean_cv_accuracy = float(np.mean(self.fold_accuracies))

    def to_dict(self) -> dict:
        tp, fp, fn, tn = self.confusion
        out = dict(self.context)
        out.update({
            "fold_accuracies": [float(a) for a in self.fold_accuracies],
            "mean_cv_accuracy": float(self.mean_cv_accuracy),
            "overall_accuracy": float(self.overall_accuracy),
            "f1": float(self.f1),
            "confusion": {"tp": tp, "fp": fp, "fn": fn, "tn": tn},
        })
        return out
