"""Teacher supervision at an intermediate layer.

Offline: shrinkage LDA over labeled teacher feature pixels, per-class K-means
sub-clustering in the discriminant space, sub-class prototypes, and the
row-stochastic decision table relating within-class sub-class assignments to
the globally nearest sub-class. Online: each pixel inherits the table row of
its (image label, nearest within-class prototype) pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .kmeans import _sq_dists, fit_kmeans
from .penultimate import stable_softmax


@dataclass
class LdaModel:
    W: np.ndarray          # (d_lda, d) projection rows
    b: np.ndarray          # (d_lda,) bias centering the projected global mean at 0
    shrinkage: float

    def project(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.W.T + self.b


def fit_lda(features: np.ndarray, labels: np.ndarray, shrinkage: float = 0.1,
            n_components: int | None = None) -> LdaModel:
    """Fisher discriminant fit with shrinkage-regularized within-class scatter.

    The projection spans the leading generalized eigenvectors of
    (S_w + shrinkage * tr(S_w)/d * I)^-1 S_b; by default it keeps C - 1
    components. Row signs are fixed deterministically.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2:
        raise ValueError("fit_lda: features must be (N, d)")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("fit_lda: need at least 2 classes")
    n, d = X.shape
    mean = X.mean(axis=0)
    s_w = np.zeros((d, d))
    s_b = np.zeros((d, d))
    for c in classes:
        Xc = X[y == c]
        if Xc.shape[0] < 2:
            raise ValueError(f"fit_lda: class {c} has fewer than 2 samples")
        mc = Xc.mean(axis=0)
        centered = Xc - mc
        s_w += centered.T @ centered
        diff = (mc - mean)[:, None]
        s_b += Xc.shape[0] * (diff @ diff.T)
    s_w /= n
    s_b /= n
    if shrinkage > 0:
        s_w = s_w + (shrinkage * np.trace(s_w) / d) * np.eye(d)
    else:
        cond = np.linalg.cond(s_w)
        if not np.isfinite(cond) or cond > 1e12:
            raise np.linalg.LinAlgError(
                "fit_lda: within-class scatter is singular; set shrinkage > 0")
    k = classes.size - 1 if n_components is None else n_components
    k = min(k, d)
    vals, vecs = scipy.linalg.eigh(s_b, s_w)
    order = np.argsort(vals)[::-1][:k]
    W = vecs[:, order].T
    # deterministic sign: make the largest-magnitude entry of each row positive
    for row in W:
        j = int(np.abs(row).argmax())
        if row[j] < 0:
            row *= -1.0
    b = -W @ mean
    return LdaModel(W=W, b=b, shrinkage=shrinkage)


@dataclass
class SubclassModel:
    """Per-class sub-cluster prototypes and the sub-class decision table."""

    prototypes: np.ndarray       # (C, K, d_lda) sub-class means
    s_t: np.ndarray              # (C*K, C*K) row-stochastic table
    classes: int
    k_inter: int
    empty_rows: list[int] = field(default_factory=list)  # degenerate self-one-hot rows

    def flat_prototypes(self) -> np.ndarray:
        c, k, d = self.prototypes.shape
        return self.prototypes.reshape(c * k, d)


def _nearest_within_class(z: np.ndarray, prototypes: np.ndarray, cls: np.ndarray) -> np.ndarray:
    """Index of the nearest prototype of each point's own class (ties: lowest k)."""
    out = np.empty(z.shape[0], dtype=np.int64)
    for c in np.unique(cls):
        mask = cls == c
        d2 = _sq_dists(z[mask], prototypes[c])
        out[mask] = d2.argmin(axis=1)
    return out


def fit_subclass_model(lda_features: np.ndarray, labels: np.ndarray, k_inter: int,
                       seed: int = 0, table_temperature: float | None = None) -> SubclassModel:
    """Per-class K-means in LDA space plus the empirical decision table.

    Row (c, k) of the table is the distribution of the globally nearest
    prototype over all pixels whose within-class assignment is (c, k). Rows
    with no supporting pixels become self-one-hot and are flagged in
    ``empty_rows``. ``table_temperature`` optionally smooths rows via
    softmax(log row / tau).
    """
    Z = np.asarray(lda_features, dtype=np.float64)
    y = np.asarray(labels)
    classes = int(y.max()) + 1
    prototypes = np.zeros((classes, k_inter, Z.shape[1]))
    for c in range(classes):
        Zc = Z[y == c]
        if Zc.shape[0] < k_inter:
            raise ValueError(f"fit_subclass_model: class {c} has {Zc.shape[0]} < K={k_inter} pixels")
        centers, assign, _ = fit_kmeans(Zc, k_inter, seed=seed + c)
        for k in range(k_inter):
            members = Zc[assign == k]
            # duplicate data can leave a cluster empty even after re-seeding;
            # its fitted center (a data point) then stands in for the mean
            prototypes[c, k] = members.mean(axis=0) if members.size else centers[k]
    model = SubclassModel(prototypes=prototypes, s_t=np.zeros(0), classes=classes, k_inter=k_inter)
    flat = model.flat_prototypes()
    h1 = _nearest_within_class(Z, prototypes, y)
    h2 = _sq_dists(Z, flat).argmin(axis=1)
    rows = y * k_inter + h1
    size = classes * k_inter
    counts = np.zeros((size, size))
    np.add.at(counts, (rows, h2), 1.0)
    totals = counts.sum(axis=1)
    empty = np.flatnonzero(totals == 0)
    for r in empty:
        counts[r, r] = 1.0
    s_t = counts / counts.sum(axis=1, keepdims=True)
    if table_temperature is not None:
        s_t = _smooth_rows(s_t, table_temperature)
    model.s_t = s_t
    model.empty_rows = [int(r) for r in empty]
    return model


def _smooth_rows(s_t: np.ndarray, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ValueError("table temperature must be > 0")
    logits = np.log(np.maximum(s_t, 1e-12)) / tau
    return stable_softmax(logits)


def counting_oracle_sT(lda_features: np.ndarray, labels: np.ndarray,
                       prototypes: np.ndarray) -> np.ndarray:
    """Recompute the decision table by explicit per-pixel loops (verification)."""
    Z = np.asarray(lda_features, dtype=np.float64)
    y = np.asarray(labels)
    classes, k_inter, _ = prototypes.shape
    flat = prototypes.reshape(classes * k_inter, -1)
    size = classes * k_inter
    counts = np.zeros((size, size))
    for i in range(Z.shape[0]):
        z = Z[i]
        c = int(y[i])
        d_own = ((prototypes[c] - z) ** 2).sum(axis=1)
        h1 = int(d_own.argmin())
        d_all = ((flat - z) ** 2).sum(axis=1)
        h2 = int(d_all.argmin())
        counts[c * k_inter + h1, h2] += 1.0
    for r in range(size):
        if counts[r].sum() == 0:
            counts[r, r] = 1.0
    return counts / counts.sum(axis=1, keepdims=True)


def intermediate_soft_labels(teacher_map: np.ndarray, y: np.ndarray, lda: LdaModel,
                             subclass_model: SubclassModel) -> np.ndarray:
    """Per-pixel table rows for a (N, h, w, d) teacher map with image labels y.

    Every pixel sharing the same (label, nearest within-class prototype) pair
    receives the identical annotation row.
    """
    tmap = np.asarray(teacher_map, dtype=np.float64)
    if tmap.ndim != 4:
        raise ValueError("intermediate_soft_labels: teacher_map must be (N, h, w, d)")
    if tmap.shape[-1] != lda.W.shape[1]:
        raise ValueError("intermediate_soft_labels: channel count does not match the LDA input dim")
    y = np.asarray(y)
    n, h, w, _ = tmap.shape
    k_inter = subclass_model.k_inter
    z = lda.project(tmap.reshape(-1, tmap.shape[-1]))
    pixel_cls = np.repeat(y, h * w)
    if np.any(pixel_cls < 0) or np.any(pixel_cls >= subclass_model.classes):
        raise ValueError("intermediate_soft_labels: label out of range")
    k_star = _nearest_within_class(z, subclass_model.prototypes, pixel_cls)
    rows = pixel_cls * k_inter + k_star
    p_t = subclass_model.s_t[rows]
    return p_t.reshape(n, h, w, subclass_model.classes * k_inter)
