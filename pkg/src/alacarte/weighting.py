"""Distance-weighted source ensembling.

Each source summarizes its training distribution as K-means centroids of
backbone class-token embeddings. At inference a sample's distance to each
source's nearest centroid is turned into a weight, softmax(-beta * d), and
the per-source logits are weighted before combination: scattered and
argmaxed when label spaces are disjoint, average-pooled when shared.
Building prototypes touches only that source's own data, so the
select-your-sources contract is preserved.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import backbone as B
from . import kernels
from . import prompts as P
from .backbone import BackboneConfig, BackboneParams
from .errors import CompositionError, ConfigError, DataError
from .pool import PromptPool, scatter_matrix

DEFAULT_K = 20
DEFAULT_BETA = 0.1


@dataclass
class PrototypeSet:
    source_id: str
    centroids: np.ndarray          # (K, d)
    built_from: str                # backbone fingerprint

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _kmeans_objective(points: np.ndarray, centroids: np.ndarray) -> float:
    _, sqd = kernels.kmeans_assign(points, centroids)
    return float(sqd.sum())


def _kmeans_pp_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread initial centroids proportionally to
    squared distance from those already chosen."""
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=points.dtype)
    centroids[0] = points[rng.integers(n)]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            centroids[j:] = points[rng.integers(n, size=k - j)]
            break
        probs = closest / total
        centroids[j] = points[rng.choice(n, p=probs)]
        d = ((points - centroids[j]) ** 2).sum(axis=1)
        closest = np.minimum(closest, d)
    return centroids


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iters: int = 100,
           n_init: int = 4) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; best of n_init restarts.

    Converges when assignments stop changing or after max_iters sweeps.
    An emptied cluster is re-seeded to the point farthest from its current
    centroid. Asking for more clusters than points clips K with a warning.
    """
    points = np.ascontiguousarray(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    if n == 0:
        raise DataError("kmeans needs at least one point")
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    if k > n:
        warnings.warn(f"K={k} exceeds {n} points; clipping to {n}", stacklevel=2)
        k = n
    rng = np.random.default_rng(seed)
    best, best_obj = None, np.inf
    for _ in range(n_init):
        centroids = _kmeans_pp_seed(points, k, rng)
        labels = np.full(n, -1, dtype=np.int64)
        for _ in range(max_iters):
            new_labels, sqd = kernels.kmeans_assign(points, centroids)
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for j in range(k):
                member = labels == j
                if member.any():
                    centroids[j] = points[member].mean(axis=0)
                else:
                    centroids[j] = points[np.argmax(sqd)]
        obj = _kmeans_objective(points, centroids)
        if obj < best_obj:
            best, best_obj = centroids.copy(), obj
    return best


def build_prototypes(config: BackboneConfig, params: BackboneParams,
                     images: np.ndarray, source_id: str = "source",
                     k: int = DEFAULT_K, seed: int = 0) -> PrototypeSet:
    """Cluster a source's class-token embeddings into K centroids.

    Uses the prompt-independent backbone pass, so prototypes depend only
    on this source's own samples."""
    if images.shape[0] == 0:
        raise DataError(f"source {source_id!r} has no samples to build prototypes from")
    feats = B.forward_backbone(config, params, images).class_features()
    centroids = kmeans(feats, k, seed=seed)
    return PrototypeSet(source_id, centroids.astype(feats.dtype), params.fingerprint())


def min_distance(embeddings: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Euclidean distance from each embedding to its nearest centroid."""
    emb = np.atleast_2d(np.ascontiguousarray(embeddings, dtype=np.float64))
    cen = np.ascontiguousarray(centroids, dtype=np.float64)
    if emb.shape[1] != cen.shape[1]:
        raise ConfigError(f"embedding dim {emb.shape[1]} != centroid dim {cen.shape[1]}")
    _, sqd = kernels.kmeans_assign(emb, cen)
    out = np.sqrt(sqd)
    return out if embeddings.ndim > 1 else out[0]


def source_weights(distances: np.ndarray, beta: float = DEFAULT_BETA) -> np.ndarray:
    """softmax(-beta * d) across sources (last axis); beta=0 is uniform."""
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    d = np.atleast_2d(np.asarray(distances, dtype=np.float64))
    w = kernels.softmax_rows(np.ascontiguousarray(-beta * d))
    return w if np.asarray(distances).ndim > 1 else w[0]


def attach_prototypes(ps: P.SourcePromptSet, protos: PrototypeSet) -> P.SourcePromptSet:
    if protos.built_from != ps.backbone_fingerprint:
        raise ConfigError(
            f"prototypes for {ps.source_id!r} built against a different backbone"
        )
    ps.prototypes = protos.centroids
    return ps


def aptw_predict(config: BackboneConfig, params: BackboneParams, images: np.ndarray,
                 pool: PromptPool, subset, mode: str, beta: float = DEFAULT_BETA,
                 return_weights: bool = False):
    """Distance-weighted prediction over a subset of sources.

    One composed pass yields per-source raw logits and the shared
    class-token embedding; weights follow softmax(-beta * min-distance).
    CIL scatters w_i * logits_i into the disjoint global space and argmaxes;
    DIL average-pools the weighted logits over the shared space.
    """
    if mode not in ("cil", "dil"):
        raise ConfigError(f"mode must be 'cil' or 'dil', got {mode!r}")
    subset = list(subset)
    sets = [pool.get(sid) for sid in subset]
    for ps in sets:
        if ps.prototypes is None:
            raise ConfigError(f"source {ps.source_id!r} has no prototypes")
    cache, feats = P.composed_forward(config, params, images, sets)
    emb = cache.class_features()
    dists = np.stack([min_distance(emb, ps.prototypes) for ps in sets], axis=1)
    w = np.atleast_2d(source_weights(dists, beta))          # (N, |I|)

    n = emb.shape[0]
    if mode == "cil":
        _assert_disjoint(sets)
    pooled = np.full((n, pool.n_classes), -np.inf, dtype=np.float64)
    if mode == "dil":
        pooled = np.zeros((n, pool.n_classes), dtype=np.float64)
    for j, ps in enumerate(sets):
        logits = P.predict_source(feats[ps.source_id], ps, apply_softmax=False).data
        weighted = w[:, j:j + 1] * logits
        if mode == "cil":
            pooled[:, ps.label_map] = weighted
        else:
            pooled[:, ps.label_map] += weighted
    if mode == "dil":
        pooled /= len(sets)
    if return_weights:
        return pooled, w
    return pooled


def _assert_disjoint(sets) -> None:
    seen: set[int] = set()
    for ps in sets:
        labels = set(int(c) for c in ps.label_map)
        overlap = seen & labels
        if overlap:
            raise CompositionError(f"label maps overlap on classes {sorted(overlap)}")
        seen |= labels
