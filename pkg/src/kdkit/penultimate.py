"""Teacher supervision at the penultimate layer.

Offline: K-means over teacher feature-map pixels. Online: per-pixel soft
labels from (negated, temperature-scaled) squared distances to the centers.
A clustering-free variant derives labels directly from the soft-maxed
activations of the teacher's final 3x3 convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kmeans import _sq_dists, fit_kmeans


def stable_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class PenultimateLabeler:
    """Frozen offline artifact producing per-pixel soft labels."""

    centers: np.ndarray | None   # (K, d) for the kmeans source, None otherwise
    tau: float = 1.0             # label temperature, > 0
    source: str = "kmeans"       # "kmeans" | "teacher_3x3_block"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("PenultimateLabeler: tau must be > 0")
        if self.source not in ("kmeans", "teacher_3x3_block"):
            raise ValueError(f"PenultimateLabeler: unknown source {self.source!r}")


def fit_penultimate_centers(features: np.ndarray, k: int, seed: int = 0,
                            max_points: int = 2_000_000) -> np.ndarray:
    """Fit K-means centers to (N, d) pixel samples.

    Fits on a uniformly drawn subset when N exceeds ``max_points``. Raises if
    the fitted centers contain duplicates (within 1e-9).
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError("fit_penultimate_centers: features must be (N, d)")
    n = features.shape[0]
    if n < k:
        raise ValueError(f"fit_penultimate_centers: N={n} < K={k}")
    if n > max_points:
        rng = np.random.default_rng(seed)
        idx = rng.choice(n, size=max_points, replace=False)
        idx.sort()
        features = features[idx]
    centers, _, _ = fit_kmeans(features, k, seed=seed)
    d2 = _sq_dists(centers, centers)
    np.fill_diagonal(d2, np.inf)
    if k > 1 and d2.min() < 1e-18:
        raise ValueError("fit_penultimate_centers: duplicate centers after fit")
    return centers


def penultimate_soft_labels(teacher_map: np.ndarray, labeler: PenultimateLabeler) -> np.ndarray:
    """Per-pixel simplex labels over the K centers for a (..., d) feature map."""
    if labeler.centers is None:
        raise ValueError("penultimate_soft_labels: labeler has no centers")
    tmap = np.asarray(teacher_map, dtype=np.float64)
    d = labeler.centers.shape[1]
    if tmap.shape[-1] != d:
        raise ValueError(
            f"penultimate_soft_labels: channel count {tmap.shape[-1]} != centers dim {d}")
    flat = tmap.reshape(-1, d)
    d2 = _sq_dists(flat, labeler.centers)
    p = stable_softmax(-d2 / labeler.tau)
    return p.reshape(tmap.shape[:-1] + (labeler.centers.shape[0],))


def labels_from_3x3_kernels(teacher_block_activations: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Soft labels from the pre-BN activations of the teacher's final 3x3 conv."""
    if tau <= 0:
        raise ValueError("labels_from_3x3_kernels: tau must be > 0")
    acts = np.asarray(teacher_block_activations, dtype=np.float64)
    return stable_softmax(acts / tau)


def align_spatial(teacher_map: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Average-pool a (..., H, W, d) map down to (..., target_h, target_w, d).

    H and W must be integer multiples of the targets.
    """
    tmap = np.asarray(teacher_map)
    h, w = tmap.shape[-3], tmap.shape[-2]
    if h % target_h or w % target_w:
        raise ValueError(
            f"align_spatial: extents ({h}, {w}) not divisible by targets ({target_h}, {target_w})")
    fh, fw = h // target_h, w // target_w
    if fh == 1 and fw == 1:
        return tmap
    lead = tmap.shape[:-3]
    d = tmap.shape[-1]
    reshaped = tmap.reshape(lead + (target_h, fh, target_w, fw, d))
    return reshaped.mean(axis=(-4, -2))
