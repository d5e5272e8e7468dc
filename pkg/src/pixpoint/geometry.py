"""Deterministic point-set utilities shared by both branches.

Farthest-point sampling is used twice -- picking 3D token centers and
thinning the 2D query pool -- so both sides inherit identical tie-breaking:
`argmin`/`argmax` resolve ties toward the lowest index.
"""
from __future__ import annotations

import numpy as np


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between row sets, shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def farthest_point_indices(points: np.ndarray, n_select: int) -> np.ndarray:
    """Farthest-point subsample of ``points`` (N, d) -> (n_select,) indices.

    The first pick is the point nearest the centroid; each subsequent pick
    maximizes the distance to the already-selected set.  All ties break to
    the lowest index, which makes the op a pure function of the input order.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n_select < 1 or n_select > n:
        raise ValueError(f"cannot select {n_select} of {n} points")
    centroid = pts.mean(axis=0)
    first = int(np.argmin(np.einsum("ij,ij->i", pts - centroid, pts - centroid)))
    chosen = np.empty(n_select, dtype=np.int64)
    chosen[0] = first
    diff = pts - pts[first]
    best_sq = np.einsum("ij,ij->i", diff, diff)
    best_sq[first] = -1.0  # selected points leave the candidate pool
    for i in range(1, n_select):
        nxt = int(np.argmax(best_sq))
        chosen[i] = nxt
        diff = pts - pts[nxt]
        np.minimum(best_sq, np.einsum("ij,ij->i", diff, diff), out=best_sq)
        best_sq[nxt] = -1.0
    return chosen


def knn_indices(queries: np.ndarray, points: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points per query, nearest first.

    Equal distances order by point index (stable sort).
    """
    pts = np.asarray(points, dtype=np.float64)
    if k < 1 or k > pts.shape[0]:
        raise ValueError(f"k={k} out of range for {pts.shape[0]} points")
    d2 = pairwise_sq_dists(np.asarray(queries, dtype=np.float64), pts)
    return np.argsort(d2, axis=1, kind="stable")[:, :k].astype(np.int64)
