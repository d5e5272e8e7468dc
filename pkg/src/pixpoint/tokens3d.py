"""Point-cloud tokenization: FPS centers, kNN neighborhoods, set encoding.

Token centers are actual surface points chosen by farthest-point sampling;
each token summarizes its k nearest points (coordinates relative to the
center, plus their world normals) through a trainable permutation-invariant
set encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .geometry import farthest_point_indices, knn_indices
from .layers import SetEncoder

N3D = 128
K_NEIGHBORS = 16
DVAE = 64
NEIGHBOR_DIM = 6   # relative xyz + unit normal


def select_centers(points: np.ndarray, n3d: int, seed: int | None = None
                   ) -> np.ndarray:
    """Indices of n3d token centers chosen by farthest-point sampling.

    ``seed`` is accepted for interface stability but has no effect: the
    first pick is the centroid-nearest point and ties break to the lowest
    index, so selection is fully deterministic.

    Raises ValueError when the cloud has fewer than n3d points.
    """
    del seed
    return farthest_point_indices(np.asarray(points, dtype=np.float64), n3d)


@dataclass
class TokenField:
    centers: np.ndarray         # (N, 3) float64, subset of the input points
    center_index: np.ndarray    # (N,) int32 rows into the point cloud
    neighborhoods: np.ndarray   # (N, k, 6) float64 relative xyz ⊕ normals
    neighbor_index: np.ndarray  # (N, k) int32

    @property
    def n_tokens(self) -> int:
        return self.centers.shape[0]


def build_token_field(points: np.ndarray, n3d: int = N3D,
                      k: int = K_NEIGHBORS, seed: int | None = None) -> TokenField:
    """Tokenize an (N, 6) xyz+normal cloud.

    Each center's neighborhood holds its k nearest points (the center itself
    included at distance zero), in nearest-first order with lowest-index
    tie-breaks.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 6:
        raise ValueError("expected an (N, 6) xyz+normal point array")
    xyz = pts[:, 0:3]
    normals = pts[:, 3:6]
    if k > xyz.shape[0]:
        raise ValueError(f"k={k} exceeds point count {xyz.shape[0]}")
    center_index = select_centers(xyz, n3d, seed)
    centers = xyz[center_index]
    neighbor_index = knn_indices(centers, xyz, k)
    rel = xyz[neighbor_index] - centers[:, None, :]
    neighborhoods = np.concatenate([rel, normals[neighbor_index]], axis=2)
    return TokenField(
        centers=centers,
        center_index=center_index.astype(np.int32),
        neighborhoods=neighborhoods,
        neighbor_index=neighbor_index.astype(np.int32),
    )


def make_set_encoder(rng: np.random.Generator, d_hidden: int = 64,
                     d_out: int = DVAE) -> SetEncoder:
    return SetEncoder(rng, NEIGHBOR_DIM, d_hidden, d_out)


def encode_tokens(field: TokenField, encoder: SetEncoder) -> Tensor:
    """Latents z: (N, d_out), differentiable w.r.t. encoder parameters."""
    return encoder(Tensor(field.neighborhoods))
