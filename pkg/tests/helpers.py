"""Shared oracles for the test suite."""

import numpy as np

from efmkit.clustering import kmeans


def adjusted_rand_index(labels_a, labels_b) -> float:
    """ARI from the pair-counting contingency table."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    assert a.shape == b.shape
    classes_a, ia = np.unique(a, return_inverse=True)
    classes_b, ib = np.unique(b, return_inverse=True)
    table = np.zeros((classes_a.size, classes_b.size), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_cells = comb2(table).sum()
    sum_rows = comb2(table.sum(axis=1)).sum()
    sum_cols = comb2(table.sum(axis=0)).sum()
    total = comb2(a.size)
    expected = sum_rows * sum_cols / total if total else 0.0
    max_index = (sum_rows + sum_cols) / 2.0
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


def dense_normalized_cut_labels(affinity_matrix: np.ndarray, c: int, seed: int) -> np.ndarray:
    """Oracle: classic normalized-cut spectral clustering on a dense symmetric
    affinity matrix via full eigendecomposition."""
    W = np.asarray(affinity_matrix, dtype=float)
    deg = W.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    sym = inv_sqrt[:, None] * W * inv_sqrt[None, :]
    _, vecs = np.linalg.eigh(sym)
    embedding = vecs[:, -c:]
    norms = np.linalg.norm(embedding, axis=1)
    keep = norms > 0
    embedding[keep] /= norms[keep, None]
    return kmeans(embedding, c, seed=seed).labels
