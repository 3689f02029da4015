"""Anchor-based spectral clustering for large pixel sets.

Instead of the full N x N affinity graph, each point connects to its k
nearest anchors (p representative points, p << N), giving a sparse N x p
bipartite graph.  The normalized graph is embedded through its top singular
vectors (the transfer-cut shortcut for the bipartite Laplacian) and k-means
on the embedding yields cluster labels.  A median postfilter and a
cluster-to-class overlap mapping support mask-level evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import IsolatedPointError, ParameterError, ShapeError
from .feature_map import FeatureMapSpec, transform_batch

UNIFORM_RANDOM = "uniform_random"
SUBSAMPLE_KMEANS = "subsample_kmeans"

_AFFINITY_CHUNK = 4096


@dataclass
class AnchorSet:
    anchors: np.ndarray  # (p, d)
    seed: int
    method: str


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # (n,) ints in [0, c)
    c: int
    centers: np.ndarray | None = None


@dataclass
class SparseBipartiteAffinity:
    """Row-sparse nonnegative N x p matrix with exactly k entries per row."""

    indices: np.ndarray  # (n, k) anchor column per stored entry
    values: np.ndarray  # (n, k) nonnegative weights
    n_anchors: int

    @property
    def n_points(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def row_degrees(self) -> np.ndarray:
        return self.values.sum(axis=1)

    def column_degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_anchors)
        np.add.at(deg, self.indices.reshape(-1), self.values.reshape(-1))
        return deg

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_points, self.n_anchors))
        np.put_along_axis(dense, self.indices, self.values, axis=1)
        return dense


# ---------------------------------------------------------------------------
# k-means (shared final stage, also used for anchor selection)
# ---------------------------------------------------------------------------

def _pairwise_sq_dists(rows: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(rows * rows, axis=1)[:, None]
        + np.sum(centers * centers, axis=1)[None, :]
        - 2.0 * rows @ centers.T
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(rows: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    n = rows.shape[0]
    centers = np.empty((c, rows.shape[1]))
    centers[0] = rows[rng.integers(n)]
    closest = np.sum((rows - centers[0]) ** 2, axis=1)
    for i in range(1, c):
        total = closest.sum()
        if total > 0.0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)  # duplicated points: any choice is equivalent
        centers[i] = rows[idx]
        np.minimum(closest, np.sum((rows - centers[i]) ** 2, axis=1), out=closest)
    return centers


def _lloyd(rows: np.ndarray, centers: np.ndarray, max_iter: int, tol: float):
    n, c = rows.shape[0], centers.shape[0]
    for _ in range(max_iter):
        d2 = _pairwise_sq_dists(rows, centers)
        labels = np.argmin(d2, axis=1)
        new_centers = centers.copy()
        point_d2 = d2[np.arange(n), labels].copy()
        for j in range(c):
            mask = labels == j
            if mask.any():
                new_centers[j] = rows[mask].mean(axis=0)
            else:
                idx = int(np.argmax(point_d2))  # resettle on the worst-served point
                new_centers[j] = rows[idx]
                point_d2[idx] = -1.0
        shift = float(np.max(np.sqrt(np.sum((new_centers - centers) ** 2, axis=1))))
        centers = new_centers
        if shift < tol:
            break
    d2 = _pairwise_sq_dists(rows, centers)
    labels = np.argmin(d2, axis=1)
    wcss = float(d2[np.arange(n), labels].sum())
    return labels, centers, wcss


def kmeans(
    rows,
    c: int,
    seed: int = 42,
    n_restarts: int = 5,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> ClusterAssignment:
    """k-means++ with Lloyd iterations, best of ``n_restarts`` by within-cluster
    sum of squares.  Labels are renumbered by lexicographic center order so the
    same partition always gets the same ids.
    """
    arr = np.asarray(rows, dtype=float)
    if arr.ndim != 2:
        raise ShapeError(f"expected 2-D rows, got ndim {arr.ndim}")
    n = arr.shape[0]
    if c < 1:
        raise ParameterError(f"cluster count must be >= 1, got {c}")
    if n < c:
        raise ParameterError(f"need at least c={c} points, got {n}")
    best = None
    for restart in range(max(1, n_restarts)):
        rng = np.random.default_rng((seed, restart))
        centers0 = _kmeanspp_init(arr, c, rng)
        labels, centers, wcss = _lloyd(arr, centers0, max_iter, tol)
        if best is None or wcss < best[2]:
            best = (labels, centers, wcss)
    labels, centers, _ = best
    order = np.lexsort(centers.T[::-1])  # first coordinate is the primary key
    rank = np.empty(c, dtype=np.int64)
    rank[order] = np.arange(c)
    return ClusterAssignment(labels=rank[labels], c=c, centers=centers[order])


# ---------------------------------------------------------------------------
# Anchors and bipartite affinity
# ---------------------------------------------------------------------------

def select_anchors(points, p: int, method: str = SUBSAMPLE_KMEANS, seed: int = 42) -> AnchorSet:
    """Pick p representative points: a uniform draw of data rows, or k-means
    centers of a uniform subsample (at most 20 p rows)."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2:
        raise ShapeError(f"expected 2-D points, got ndim {arr.ndim}")
    n = arr.shape[0]
    if p < 1:
        raise ParameterError(f"anchor count must be >= 1, got {p}")
    if p > n:
        raise ParameterError(f"anchor count p={p} exceeds point count {n}")
    rng = np.random.default_rng(seed)
    if method == UNIFORM_RANDOM:
        anchors = arr[rng.permutation(n)[:p]]
    elif method == SUBSAMPLE_KMEANS:
        sample = arr[rng.permutation(n)[: min(n, 20 * p)]]
        anchors = kmeans(sample, p, seed=seed, n_restarts=1, max_iter=50).centers
    else:
        raise ParameterError(f"unknown anchor method: {method!r}")
    return AnchorSet(anchors=anchors, seed=seed, method=method)


def build_bipartite_affinity(points, anchors, k: int) -> SparseBipartiteAffinity:
    """Gaussian affinities from each point to its k nearest anchors.

    The bandwidth is self-tuned: the mean, over all points, of the distance to
    the k-th nearest anchor.  Ties in anchor distance break toward the lower
    anchor index.
    """
    arr = np.asarray(points, dtype=float)
    anchor_arr = anchors.anchors if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=float)
    if arr.ndim != 2 or anchor_arr.ndim != 2:
        raise ShapeError("points and anchors must be 2-D")
    if arr.shape[1] != anchor_arr.shape[1]:
        raise ShapeError(
            f"points have dimension {arr.shape[1]}, anchors {anchor_arr.shape[1]}"
        )
    p = anchor_arr.shape[0]
    if k < 1:
        raise ParameterError(f"neighbor count must be >= 1, got {k}")
    if k > p:
        raise ParameterError(f"neighbor count k={k} exceeds anchor count {p}")

    n = arr.shape[0]
    indices = np.empty((n, k), dtype=np.int64)
    nearest_d2 = np.empty((n, k))
    for start in range(0, n, _AFFINITY_CHUNK):
        chunk = arr[start : start + _AFFINITY_CHUNK]
        d2 = _pairwise_sq_dists(chunk, anchor_arr)
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        indices[start : start + _AFFINITY_CHUNK] = order
        nearest_d2[start : start + _AFFINITY_CHUNK] = np.take_along_axis(d2, order, axis=1)

    sigma = float(np.mean(np.sqrt(nearest_d2[:, k - 1])))
    if sigma <= 0.0:
        sigma = 1.0  # all points sit on anchors; weights collapse to 1
    values = np.exp(-nearest_d2 / (2.0 * sigma * sigma))
    return SparseBipartiteAffinity(indices=indices, values=values, n_anchors=p)


# ---------------------------------------------------------------------------
# Transfer-cut embedding
# ---------------------------------------------------------------------------

def spectral_embed(affinity: SparseBipartiteAffinity, c: int) -> np.ndarray:
    """Embed the N graph vertices through the top-c left singular vectors of the
    degree-normalized bipartite affinity; rows are scaled to unit length.

    Raises :class:`IsolatedPointError` when any point carries no affinity mass.
    """
    if c < 2:
        raise ParameterError(f"embedding needs c >= 2 clusters, got {c}")
    if c > affinity.n_anchors:
        raise ParameterError(
            f"c={c} exceeds the anchor count {affinity.n_anchors}; the bipartite "
            "spectrum has at most p components"
        )
    row_deg = affinity.row_degrees()
    dead = np.flatnonzero(row_deg <= 0.0)
    if dead.size:
        raise IsolatedPointError(dead.tolist())
    col_deg = affinity.column_degrees()
    inv_sqrt_col = np.zeros_like(col_deg)
    live = col_deg > 0.0
    inv_sqrt_col[live] = 1.0 / np.sqrt(col_deg[live])

    normalized = (
        affinity.values / np.sqrt(row_deg)[:, None] * inv_sqrt_col[affinity.indices]
    )

    p, k = affinity.n_anchors, affinity.k
    gram = np.zeros((p, p))
    for a in range(k):
        for b in range(k):
            np.add.at(
                gram,
                (affinity.indices[:, a], affinity.indices[:, b]),
                normalized[:, a] * normalized[:, b],
            )
    eigvals, eigvecs = np.linalg.eigh(gram)
    top = np.arange(p - 1, p - 1 - c, -1)
    sing = np.sqrt(np.maximum(eigvals[top], 0.0))
    basis = eigvecs[:, top]

    embedding = np.einsum("nk,nkc->nc", normalized, basis[affinity.indices])
    positive = sing > 1e-12
    embedding[:, positive] /= sing[positive]
    embedding[:, ~positive] = 0.0

    norms = np.sqrt(np.sum(embedding * embedding, axis=1))
    keep = norms > 0.0
    embedding[keep] /= norms[keep, None]
    return embedding


def cluster_pixels(
    pixels,
    c: int = 2,
    p: int = 75,
    k: int = 3,
    map_spec: FeatureMapSpec | None = None,
    seed: int = 42,
    anchor_method: str = SUBSAMPLE_KMEANS,
) -> ClusterAssignment:
    """Full pipeline: optional feature map, anchors, sparse affinity, spectral
    embedding, k-means.  Defaults follow the tuned triplet c=2, p=75, k=3."""
    arr = np.asarray(pixels, dtype=float)
    feats = transform_batch(arr, map_spec) if map_spec is not None else arr
    anchors = select_anchors(feats, p, method=anchor_method, seed=seed)
    affinity = build_bipartite_affinity(feats, anchors, k)
    embedding = spectral_embed(affinity, c)
    assignment = kmeans(embedding, c, seed=seed)
    return assignment


# ---------------------------------------------------------------------------
# Postprocessing
# ---------------------------------------------------------------------------

def median_filter(mask, window: int = 9) -> np.ndarray:
    """Windowed median with symmetric border padding; window must be odd."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D grid, got ndim {arr.ndim}")
    if window < 1 or window % 2 == 0:
        raise ParameterError(f"window must be odd and >= 1, got {window}")
    if window == 1:
        return arr.copy()
    pad = window // 2
    padded = np.pad(arr, pad, mode="symmetric")
    windows = sliding_window_view(padded, (window, window))
    out = np.median(windows, axis=(2, 3))
    if np.issubdtype(arr.dtype, np.integer):
        return np.rint(out).astype(arr.dtype)
    return out.astype(arr.dtype)


def map_clusters_to_classes(assignment, reference_mask) -> np.ndarray:
    """Map each cluster to the binary class it overlaps most; ties and empty
    clusters go to the positive class."""
    labels = assignment.labels if isinstance(assignment, ClusterAssignment) else np.asarray(assignment)
    c = assignment.c if isinstance(assignment, ClusterAssignment) else int(labels.max()) + 1 if labels.size else 0
    reference = np.asarray(reference_mask).reshape(-1)
    if labels.shape[0] != reference.shape[0]:
        raise ShapeError(
            f"assignment has {labels.shape[0]} labels, reference {reference.shape[0]}"
        )
    mapped = np.empty(c, dtype=np.int8)
    for j in range(c):
        inside = labels == j
        pos = int(np.count_nonzero(reference[inside] == 1))
        neg = int(np.count_nonzero(inside)) - pos
        mapped[j] = 1 if pos >= neg else 0
    return mapped[labels]
