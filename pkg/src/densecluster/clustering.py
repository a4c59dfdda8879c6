"""Feature preprocessing (standardize, PCA, row normalization) and k-means."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

STD_EPS = 1e-8


def standardize(features):
    """Column-wise zero mean, unit population std; constant columns map to 0.

    Returns ``(scaled, mean, std)``.
    """
    x = np.asarray(features, dtype=np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    safe = np.where(std > STD_EPS, std, 1.0)
    scaled = np.where(std > STD_EPS, (x - mean) / safe, 0.0)
    return scaled, mean, std


@dataclass(frozen=True)
class PCAModel:
    mean: np.ndarray
    components: np.ndarray
    singular_values: np.ndarray

    @property
    def dim(self) -> int:
        return self.components.shape[0]

    def explained_variance(self, n_samples: int) -> np.ndarray:
        return self.singular_values ** 2 / max(n_samples - 1, 1)


def pca_fit(x, dim: int) -> PCAModel:
    x = np.asarray(x, dtype=np.float64)
    n, f = x.shape
    if not 1 <= dim <= min(n - 1, f):
        raise ValueError(f"PCA dim {dim} outside [1, {min(n - 1, f)}]")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = vt[:dim]
    # sign convention: largest-magnitude loading of each component is positive
    flip = np.sign(comps[np.arange(dim), np.abs(comps).argmax(axis=1)])
    comps = comps * np.where(flip == 0, 1.0, flip)[:, None]
    return PCAModel(mean, comps, s[:dim])


def pca_transform(model: PCAModel, rows, whiten: bool = False) -> np.ndarray:
    z = (np.asarray(rows, dtype=np.float64) - model.mean) @ model.components.T
    if whiten:
        z = z / np.where(model.singular_values > 0, model.singular_values, 1.0)
    return z


def pca_inverse(model: PCAModel, z) -> np.ndarray:
    return np.asarray(z) @ model.components + model.mean


def l2_row_normalize(rows) -> np.ndarray:
    x = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(norms > 0, x / np.where(norms > 0, norms, 1.0), x)


def default_pca_dim(n: int, f: int, cap: int = 32) -> int:
    return max(1, min(n - 1, f, cap))


def preprocess(features, pca_dim: int | None = None, *, scale: bool = True,
               l2_normalize: bool = True, whiten: bool = False):
    """Standardize, PCA-reduce and row-normalize pooled features.

    Returns the reduced rows and the fitted :class:`PCAModel`.
    """
    x = np.asarray(features, dtype=np.float64)
    if scale:
        x, _, _ = standardize(x)
    dim = pca_dim or default_pca_dim(*x.shape)
    model = pca_fit(x, dim)
    z = pca_transform(model, x, whiten=whiten)
    if l2_normalize:
        z = l2_row_normalize(z)
    return z, model


# ---------------------------------------------------------------------------
# k-means

@dataclass(frozen=True)
class KMeansModel:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    n_iter: int
    inertia_history: tuple[float, ...] = ()


def _sq_dists(points, centroids):
    d = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d


def _assign(points, centroids):
    d = _sq_dists(points, centroids)
    labels = d.argmin(axis=1)
    return labels, d


def _inertia(points, centroids, labels) -> float:
    diff = points - centroids[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def kmeans_plusplus(points, k: int, rng) -> np.ndarray:
    n = len(points)
    centers = [points[rng.integers(n)]]
    closest = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centers.append(points[idx])
        closest = np.minimum(closest, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=np.float64)


def _repair_empty(points, centroids, labels, d, k):
    """Give every empty cluster the farthest point of the worst cluster."""
    labels = labels.copy()
    centroids = centroids.copy()
    for _ in range(k):
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            break
        own = d[np.arange(len(points)), labels]
        cost = np.bincount(labels, weights=own, minlength=k)
        cost[counts < 2] = -1.0
        donor = int(cost.argmax())
        members = np.flatnonzero(labels == donor)
        far = members[own[members].argmax()]
        target = int(empty[0])
        centroids[target] = points[far]
        labels[far] = target
        d = _sq_dists(points, centroids)
    return centroids, labels


def _lloyd(x, k: int, rng, max_iter: int, tol: float) -> KMeansModel:
    centroids = kmeans_plusplus(x, k, rng)
    labels, d = _assign(x, centroids)
    centroids, labels = _repair_empty(x, centroids, labels, d, k)
    inertia = _inertia(x, centroids, labels)
    history = [inertia]
    it = 0
    for it in range(1, max_iter + 1):
        for j in range(k):
            centroids[j] = x[labels == j].mean(axis=0)
        new_labels, d = _assign(x, centroids)
        centroids, new_labels = _repair_empty(x, centroids, new_labels, d, k)
        new_inertia = _inertia(x, centroids, new_labels)
        if new_inertia > inertia + 1e-9 * max(1.0, inertia):
            raise AssertionError(f"k-means inertia increased: {inertia} -> {new_inertia}")
        history.append(new_inertia)
        converged = np.array_equal(new_labels, labels) or inertia - new_inertia < tol
        labels, inertia = new_labels, new_inertia
        if converged:
            break
    return KMeansModel(centroids, labels, inertia, it, tuple(history))


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-10,
           n_init: int = 10) -> KMeansModel:
    """Lloyd's algorithm from k-means++ seeding, best of ``n_init`` restarts.

    Each restart stops when the inertia improves by less than ``tol``, when
    assignments stop changing, or after ``max_iter`` updates. The restart
    with the lowest inertia is returned (earliest on ties). Assignments are
    nearest-centroid for the returned centroids (first index on ties) and
    no cluster is empty.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if k < 1 or n < k:
        raise ValueError(f"need N >= k >= 1, got N={n}, k={k}")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    best = None
    for rng in (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_init)):
        model = _lloyd(x, k, rng, max_iter, tol)
        if best is None or model.inertia < best.inertia:
            best = model
    return best


def pseudo_labels(model: KMeansModel) -> np.ndarray:
    return np.asarray(model.assignments, dtype=np.int64).copy()


def dump_features_csv(path, features, assignments=None, ids=None) -> None:
    """Feature rows (and optional assignments) as CSV for offline inspection."""
    x = np.asarray(features)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        header = ["id"] + [f"f{j}" for j in range(x.shape[1])]
        if assignments is not None:
            header.append("cluster")
        w.writerow(header)
        for i, row in enumerate(x):
            out = [ids[i] if ids is not None else str(i)] + [f"{v:.8g}" for v in row]
            if assignments is not None:
                out.append(int(assignments[i]))
            w.writerow(out)
