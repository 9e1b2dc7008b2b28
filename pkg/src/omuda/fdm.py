"""Foreground relational distillation: pooled embeddings, distances, angles, loss.

Each image contributes one embedding, the mean of its foreground-pixel features.
Distances and angles are computed between the images of a batch, separately in
the extractor space and the student neck space, then matched with smooth-L1.
"""
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import ArgumentError
from .numerics import EPS, smooth_l1, smooth_l1_grad

NORMALIZATIONS = ("mean", "sum")


@dataclass(frozen=True)
class ForegroundEmbedding:
    vector: np.ndarray
    image_id: int
    fg_pixel_count: int


@dataclass(frozen=True)
class RelationalStats:
    points: np.ndarray           # n x D embeddings the stats were computed from
    pairs: tuple                 # (i, j) with i < j
    raw: np.ndarray              # unnormalized distances
    distances: np.ndarray        # normalized distances
    normalizer: float
    normalization: str
    triplets: tuple              # (vertex, j, k) with j < k
    angles: np.ndarray

    @property
    def degenerate(self):
        return self.normalizer < EPS


def foreground_mask(labels, partition):
    return partition.is_foreground(labels)


def pool_foreground(features, labels, partition, image_id=0, n_min_fg=8):
    """Mean feature over foreground pixels, or ``None`` below ``n_min_fg`` pixels."""
    features = np.asarray(features)
    labels = np.asarray(labels)
    if features.shape[:-1] != labels.shape:
        raise ArgumentError(f"features {features.shape} and labels {labels.shape} disagree")
    mask = foreground_mask(labels, partition)
    count = int(mask.sum())
    if count < max(n_min_fg, 1):
        return None
    return ForegroundEmbedding(features[mask].mean(axis=0), image_id, count)


def _as_points(embeddings):
    if isinstance(embeddings, np.ndarray):
        return np.asarray(embeddings, dtype=np.float64)
    return np.stack([getattr(e, "vector", e) for e in embeddings]).astype(np.float64)


def pairwise_distances(embeddings, normalization="mean"):
    """Return ``(pairs, raw, normalized, normalizer)`` over all unordered pairs."""
    if normalization not in NORMALIZATIONS:
        raise ArgumentError(f"unknown normalization {normalization!r}")
    pts = _as_points(embeddings)
    n = len(pts)
    if n < 2:
        raise ArgumentError("need at least two embeddings")
    pairs = tuple(combinations(range(n), 2))
    raw = np.array([np.linalg.norm(pts[i] - pts[j]) for i, j in pairs])
    norm = raw.mean() if normalization == "mean" else raw.sum()
    if norm < EPS:
        return pairs, raw, np.zeros_like(raw), float(norm)
    return pairs, raw, raw / norm, float(norm)


def triplet_angles(embeddings):
    """Cosine at each vertex i of the edges to j and k, for every i and pair {j, k}.

    Triplets whose edge vectors are shorter than 1e-12 are skipped.
    """
    pts = _as_points(embeddings)
    n = len(pts)
    trips, angles = [], []
    for i in range(n):
        others = [j for j in range(n) if j != i]
        for j, k in combinations(others, 2):
            u, v = pts[i] - pts[j], pts[i] - pts[k]
            nu, nv = np.linalg.norm(u), np.linalg.norm(v)
            if nu < EPS or nv < EPS:
                continue
            trips.append((i, j, k))
            angles.append(np.clip(u @ v / (nu * nv), -1.0, 1.0))
    return tuple(trips), np.asarray(angles, dtype=np.float64)


def relational_stats(embeddings, normalization="mean") -> RelationalStats:
    pts = _as_points(embeddings)
    if len(pts) >= 2:
        pairs, raw, dist, norm = pairwise_distances(pts, normalization)
    else:
        pairs, raw, dist, norm = (), np.zeros(0), np.zeros(0), 0.0
    trips, angles = triplet_angles(pts) if len(pts) >= 3 else ((), np.zeros(0))
    return RelationalStats(pts, pairs, raw, dist, norm, normalization, trips, angles)


@dataclass(frozen=True)
class KDResult:
    L_D: float
    L_A: float
    L_KD: float
    grad_D: np.ndarray   # d L_D / d neck points, n x D
    grad_A: np.ndarray

    @property
    def grad(self):
        return self.grad_D + self.grad_A


def kd_loss(pre: RelationalStats, neck: RelationalStats) -> KDResult:
    """Distance plus angle distillation; gradients only reach the neck points."""
    if pre.pairs != neck.pairs or pre.normalization != neck.normalization:
        raise ArgumentError("pre and neck statistics are not aligned")
    pts = neck.points
    grad_D = np.zeros_like(pts)
    grad_A = np.zeros_like(pts)

    L_D = 0.0
    # a degenerate side (all points coincide) contributes nothing
    if neck.pairs and not pre.degenerate and not neck.degenerate:
        diff = pre.distances - neck.distances
        L_D = float(np.sum(smooth_l1(diff)))
        g_d = -smooth_l1_grad(diff)          # dL / d d_neck
        N, P = neck.normalizer, len(neck.pairs)
        coupling = float(g_d @ neck.raw) / (N * N)
        if neck.normalization == "mean":
            g_r = g_d / N - coupling / P
        else:
            g_r = g_d / N - coupling
        for (i, j), r, g in zip(neck.pairs, neck.raw, g_r):
            if r < EPS:
                continue
            e = (pts[i] - pts[j]) / r
            grad_D[i] += g * e
            grad_D[j] -= g * e

    L_A = 0.0
    common = set(pre.triplets) & set(neck.triplets)
    if common:
        pre_a = dict(zip(pre.triplets, pre.angles))
        for t, a in zip(neck.triplets, neck.angles):
            if t not in common:
                continue
            diff = pre_a[t] - a
            L_A += float(smooth_l1(diff))
            g = -smooth_l1_grad(diff)
            i, j, k = t
            u, v = pts[i] - pts[j], pts[i] - pts[k]
            nu, nv = np.linalg.norm(u), np.linalg.norm(v)
            du = v / (nu * nv) - a * u / (nu * nu)
            dv = u / (nu * nv) - a * v / (nv * nv)
            grad_A[i] += g * (du + dv)
            grad_A[j] -= g * du
            grad_A[k] -= g * dv
    return KDResult(L_D, L_A, L_D + L_A, grad_D, grad_A)


def pooled_grad_to_pixels(grad_vec, labels, partition, count):
    """Spread the gradient of a pooled embedding back onto its foreground pixels."""
    mask = foreground_mask(labels, partition)
    out = np.zeros(labels.shape + (grad_vec.shape[0],))
    out[mask] = grad_vec / count
    return out
