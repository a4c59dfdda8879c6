"""Unsupervised clustering metrics and the metrics CSV."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

CSV_HEADER = "method,clustering_accuracy,silhouette,davies_bouldin"


def confusion_matrix(pred, truth, k: int | None = None) -> np.ndarray:
    """Counts with predicted clusters as rows and true classes as columns."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if k is None:
        k = int(max(pred.max(initial=0), truth.max(initial=0))) + 1
    if pred.size and (pred.min() < 0 or truth.min() < 0 or pred.max() >= k or truth.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (pred, truth), 1)
    return cm


def matched_accuracy(pred, truth, k: int | None = None) -> float:
    """Best one-to-one cluster-to-class matching accuracy (Hungarian method)."""
    cm = confusion_matrix(pred, truth, k)
    rows, cols = linear_sum_assignment(-cm)
    return float(cm[rows, cols].sum()) / max(len(np.asarray(pred)), 1)


def _check_labels(points, labels):
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(labels)
    if len(x) != len(y):
        raise ValueError("one label per point required")
    _, y = np.unique(y, return_inverse=True)
    if y.max(initial=0) < 1:
        raise ValueError("need at least 2 clusters")
    return x, y


def silhouette(points, labels) -> float:
    """Mean silhouette coefficient with Euclidean distances.

    Points in singleton clusters contribute 0.
    """
    x, y = _check_labels(points, labels)
    if len(x) < 3:
        raise ValueError("silhouette needs N >= 3")
    k = y.max() + 1
    dist = cdist(x, x)
    onehot = np.eye(k)[y]
    sums = dist @ onehot
    counts = onehot.sum(axis=0)
    own = counts[y]
    a = sums[np.arange(len(x)), y] / np.maximum(own - 1, 1)
    mean_other = sums / counts
    mean_other[np.arange(len(x)), y] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own == 1] = 0.0
    return float(s.mean())


def davies_bouldin(points, labels) -> float:
    """Davies-Bouldin index; ``inf`` when two centroids coincide."""
    x, y = _check_labels(points, labels)
    k = y.max() + 1
    centroids = np.stack([x[y == j].mean(axis=0) for j in range(k)])
    scatter = np.array([np.linalg.norm(x[y == j] - centroids[j], axis=1).mean()
                        for j in range(k)])
    sep = cdist(centroids, centroids)
    worst = np.zeros(k)
    for i in range(k):
        ratios = []
        for j in range(k):
            if i == j:
                continue
            if sep[i, j] == 0:
                ratios.append(math.inf)
            else:
                ratios.append((scatter[i] + scatter[j]) / sep[i, j])
        worst[i] = max(ratios)
    return float(worst.mean())


@dataclass(frozen=True)
class MetricsReport:
    method: str
    clustering_accuracy: float
    silhouette: float
    davies_bouldin: float

    def __post_init__(self):
        if not 0.0 <= self.clustering_accuracy <= 1.0:
            raise ValueError("accuracy outside [0, 1]")
        if not -1.0 <= self.silhouette <= 1.0:
            raise ValueError("silhouette outside [-1, 1]")
        if not self.davies_bouldin >= 0.0:
            raise ValueError("Davies-Bouldin must be >= 0")

    def csv_row(self) -> str:
        return (f"{self.method},{self.clustering_accuracy:.4f},"
                f"{self.silhouette:.4f},{self.davies_bouldin:.4f}")


def report(method: str, pred, truth, points) -> MetricsReport:
    k = int(max(np.max(pred), np.max(truth))) + 1
    return MetricsReport(method, matched_accuracy(pred, truth, k),
                         silhouette(points, pred), davies_bouldin(points, pred))


def write_metrics_csv(path, reports) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [CSV_HEADER] + [r.csv_row() for r in reports]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_metrics_csv(path) -> list[MetricsReport]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: unexpected header")
    out = []
    for line in lines[1:]:
        method, acc, sil, db = line.rsplit(",", 3)
        out.append(MetricsReport(method, float(acc), float(sil), float(db)))
    return out
