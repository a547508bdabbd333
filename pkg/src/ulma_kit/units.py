"""Acoustic unit discovery via k-means.

Stage 1 clusters MFCC frames; stage 2 re-clusters hidden-layer features
from a pretrained encoder.  Fits are fully deterministic given
(features, k, seed): k-means++ seeding from a seeded generator followed
by Lloyd iterations, with empty clusters re-seeded to the point farthest
from its assigned centroid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatchError, LayerOutOfRangeError, TooFewPointsError

DEFAULT_K = 16
DEFAULT_MAX_ITER = 300
DEFAULT_TOL = 1e-8


@dataclass(eq=False)
class Codebook:
    """k centroids of dimension d plus the provenance of the fit."""

    centroids: np.ndarray
    k: int
    dim: int
    stage: int
    seed: int

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.shape != (self.k, self.dim):
            raise ValueError("centroid matrix must be k x dim")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")


def _sq_distances(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact pairwise squared distances (n x k); computed by direct
    differencing so equidistant ties stay exact."""
    diff = features[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp_init(features: np.ndarray, k: int,
                    rng: np.random.Generator) -> np.ndarray:
    n = features.shape[0]
    centroids = np.empty((k, features.shape[1]))
    centroids[0] = features[rng.integers(n)]
    closest = np.sum((features - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            probs = closest / total
            idx = rng.choice(n, p=probs)
        else:
            idx = rng.integers(n)  # all points coincide with a centroid
        centroids[j] = features[idx]
        closest = np.minimum(
            closest, np.sum((features - centroids[j]) ** 2, axis=1)
        )
    return centroids


def kmeans_fit(features: np.ndarray, k: int, seed: int,
               max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL,
               stage: int = 1, trace: list | None = None) -> Codebook:
    """Fit k centroids with k-means++ initialization and Lloyd updates.

    Iterates until the largest centroid movement drops below ``tol`` or
    ``max_iter`` is reached.  When ``trace`` is given, the inertia after
    each assignment step is appended to it (a non-increasing sequence).
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    n, d = features.shape
    if k < 1:
        raise ValueError("k must be at least 1")
    if n < k:
        raise TooFewPointsError(f"{n} points cannot support {k} clusters")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(features, k, rng)

    for _ in range(max_iter):
        dists = _sq_distances(features, centroids)
        labels = np.argmin(dists, axis=1)

        # Re-seed empty clusters to the point farthest from its centroid.
        taken = set()
        for j in range(k):
            if np.any(labels == j):
                continue
            assigned = dists[np.arange(n), labels].copy()
            assigned[list(taken)] = -np.inf
            far = int(np.argmax(assigned))
            taken.add(far)
            centroids[j] = features[far]
            labels[far] = j
            dists[:, j] = np.sum((features - centroids[j]) ** 2, axis=1)

        if trace is not None:
            trace.append(float(dists[np.arange(n), labels].sum()))

        new_centroids = np.empty_like(centroids)
        for j in range(k):
            new_centroids[j] = features[labels == j].mean(axis=0)
        shift = np.sqrt(np.sum((new_centroids - centroids) ** 2, axis=1)).max()
        centroids = new_centroids
        if shift < tol:
            break

    return Codebook(centroids=centroids, k=k, dim=d, stage=stage, seed=seed)


def assign(cb: Codebook, features: np.ndarray) -> np.ndarray:
    """Nearest-centroid labels in [0, k); ties go to the lowest index."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != cb.dim:
        raise DimMismatchError(
            f"features have dim {features.shape[-1]}, codebook has {cb.dim}"
        )
    return np.argmin(_sq_distances(features, cb.centroids), axis=1)


def inertia(cb: Codebook, features: np.ndarray) -> float:
    """Sum of squared distances from each point to its assigned centroid."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != cb.dim:
        raise DimMismatchError(
            f"features have dim {features.shape[-1]}, codebook has {cb.dim}"
        )
    dists = _sq_distances(features, cb.centroids)
    return float(dists[np.arange(features.shape[0]), np.argmin(dists, axis=1)].sum())


def refit_from_hidden(model, clips, layer: int, k: int, seed: int) -> Codebook:
    """Stage-2 fit: cluster hidden-layer features pooled over ``clips``.

    Concatenates each clip's hidden representation at ``layer`` and runs
    the same deterministic k-means, returning a stage-2 codebook whose
    dimension is the encoder width.
    """
    from .model import hidden_states  # local import to keep units standalone

    if not 0 <= layer < model.config.n_layers:
        raise LayerOutOfRangeError(
            f"layer {layer} outside [0, {model.config.n_layers})"
        )
    stacked = np.vstack([hidden_states(model, clip)[layer] for clip in clips])
    cb = kmeans_fit(stacked, k, seed, stage=2)
    return cb
