"""Deterministic k-means (k-means++ seeding, Lloyd iterations)."""

from __future__ import annotations

import numpy as np


def sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, ``(n, k)``, float64, clipped at 0."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    d = (x * x).sum(1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid per row; ties go to the lower centroid index."""
    return np.argmin(sq_distances(x, centroids), axis=1)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    closest = sq_distances(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centers[j] = x[idx]
        closest = np.minimum(closest, sq_distances(x, centers[j : j + 1])[:, 0])
    return centers


def kmeans(
    x: np.ndarray,
    k: int,
    seed=0,
    max_iter: int = 100,
    tol: float = 1e-4,
) -> tuple[np.ndarray, np.ndarray]:
    """Cluster rows of ``x`` into ``k`` groups.

    Stops once no centroid moves more than ``tol`` (Euclidean) or after
    ``max_iter`` Lloyd steps. A centroid that loses all its points stays
    where it was. ``seed`` may be an int or a ``numpy.random.Generator``.

    Returns ``(centroids, labels)`` with float64 centroids.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("x must be 2-D")
    if k < 1:
        raise ValueError("k must be >= 1")
    if x.shape[0] < k:
        raise ValueError(f"need at least k={k} points, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus(x, k, rng)
    labels = assign(x, centroids)
    for _ in range(max_iter):
        member = np.zeros((k, x.shape[0]))
        member[labels, np.arange(x.shape[0])] = 1.0
        sums = member @ x
        counts = np.bincount(labels, minlength=k)
        updated = centroids.copy()
        filled = counts > 0
        updated[filled] = sums[filled] / counts[filled, None]
        shift = np.sqrt(((updated - centroids) ** 2).sum(1)).max()
        centroids = updated
        labels = assign(x, centroids)
        if shift < tol:
            break
    return centroids, labels
