"""Lloyd's algorithm with k-means++ seeding (shared fitting core).

All distance computations are in float64. Empty clusters are re-seeded from
the point farthest from its assigned center. Deterministic for a fixed seed.
"""

from __future__ import annotations

import numpy as np


def _sq_dists(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Pairwise squared euclidean distances (N, K), clipped at 0."""
    d2 = (
        (X * X).sum(axis=1)[:, None]
        + (centers * centers).sum(axis=1)[None, :]
        - 2.0 * (X @ centers.T)
    )
    return np.maximum(d2, 0.0)


def kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]), dtype=np.float64)
    idx = int(rng.integers(n))
    centers[0] = X[idx]
    closest = _sq_dists(X, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(closest), r))
            idx = min(idx, n - 1)
        centers[j] = X[idx]
        closest = np.minimum(closest, _sq_dists(X, centers[j:j + 1])[:, 0])
    return centers


def fit_kmeans(X: np.ndarray, k: int, seed: int = 0, max_iter: int = 300,
               tol: float = 1e-6):
    """Returns (centers, labels, inertia_history).

    Converged when the max center shift drops below ``tol`` or after
    ``max_iter`` Lloyd iterations.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < k:
        raise ValueError(f"fit_kmeans: need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    centers = kmeans_pp_init(X, k, rng)
    inertia_history = []
    labels = None
    for _ in range(max_iter):
        d2 = _sq_dists(X, centers)
        labels = d2.argmin(axis=1)
        inertia_history.append(float(d2[np.arange(n), labels].sum()))
        new_centers = np.empty_like(centers)
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j] == 0:
                # re-seed from the point farthest from its center
                farthest = int(d2[np.arange(n), labels].argmax())
                new_centers[j] = X[farthest]
            else:
                new_centers[j] = X[labels == j].mean(axis=0)
        shift = float(np.abs(new_centers - centers).max())
        centers = new_centers
        if shift < tol:
            break
    d2 = _sq_dists(X, centers)
    labels = d2.argmin(axis=1)
    return centers, labels, inertia_history
