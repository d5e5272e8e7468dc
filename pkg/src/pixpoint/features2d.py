"""Frozen 2D patch features over rendered position maps.

The 2D side of the feature pipeline never trains: each view is summarized
by per-cell geometric statistics (coverage, camera-frame means, depth
spread, a plane-fit normal, world-frame scatter) pushed through a fixed
random two-layer perceptron.  Everything here is a pure function of
(inputs, seed); determinism is part of the contract.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import farthest_point_indices
from .render import CameraView, PositionMap
from .shapes import ObjectInstance

PATCH_SIZE = 8
F2D = 96
DC = 16
DT = 32
N_CATEGORIES = 8
COVERAGE_MIN = 0.5
STAT_DIM = 17

_DEPTH_SCALE = 4.0
_COV_SCALE = 25.0
_OFFSET_SCALE = 8.0
_VIEW_WOBBLE = 0.1
_HIST_BINS = 6
_TEACHER_HIDDEN = 64


# ---------------------------------------------------------------------------
# frozen parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrozenBackbone2D:
    """Fixed random weights for feature, context and teacher extraction."""

    seed: int
    patch: int
    f2d: int
    dc: int
    dt: int
    n_categories: int
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ctx_w: np.ndarray       # (f2d, dc), bias-free so "no valid cells" -> exact zero
    teach_w1: np.ndarray
    teach_b1: np.ndarray
    teach_w2: np.ndarray
    teach_b2: np.ndarray
    teach_view_w: np.ndarray  # (3, dt) view-direction wobble


def make_backbone(seed: int, f2d: int = F2D, dc: int = DC, dt: int = DT,
                  patch: int = PATCH_SIZE, n_categories: int = N_CATEGORIES) -> FrozenBackbone2D:
    ss = np.random.SeedSequence(seed, spawn_key=(2,))
    kids = ss.spawn(5)
    r_feat = np.random.default_rng(kids[0])
    r_ctx = np.random.default_rng(kids[1])
    r_teach = np.random.default_rng(kids[2])
    r_view = np.random.default_rng(kids[3])

    t_in = n_categories + 3 + _HIST_BINS
    return FrozenBackbone2D(
        seed=seed, patch=patch, f2d=f2d, dc=dc, dt=dt, n_categories=n_categories,
        w1=r_feat.normal(0.0, 1.0 / np.sqrt(STAT_DIM), (STAT_DIM, f2d)),
        b1=r_feat.normal(0.0, 0.5, (f2d,)),
        w2=r_feat.normal(0.0, 1.0 / np.sqrt(f2d), (f2d, f2d)),
        b2=np.zeros(f2d),
        ctx_w=r_ctx.normal(0.0, 1.0 / np.sqrt(f2d), (f2d, dc)),
        teach_w1=r_teach.normal(0.0, 1.0 / np.sqrt(t_in), (t_in, _TEACHER_HIDDEN)),
        teach_b1=r_teach.normal(0.0, 0.5, (_TEACHER_HIDDEN,)),
        teach_w2=r_teach.normal(0.0, 1.0 / np.sqrt(_TEACHER_HIDDEN), (_TEACHER_HIDDEN, dt)),
        teach_b2=np.zeros(dt),
        teach_view_w=r_view.normal(0.0, 1.0, (3, dt)),
    )


# ---------------------------------------------------------------------------
# per-cell statistics
# ---------------------------------------------------------------------------


def _oriented_normals(cov: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """Smallest principal direction of the scatter, facing the camera.

    A total-least-squares plane fit over the cell's world points; the sign
    is fixed by flipping normals that point away from the camera (visible
    surfaces face it), with a lexicographic tie-break for grazing planes.
    """
    sym = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    _, vecs = np.linalg.eigh(sym)
    normal = vecs[..., :, 0]
    dots = normal @ view_dir
    flip = dots > 0.0
    graze = dots == 0.0
    if np.any(graze):
        first = normal[..., 0]
        second = normal[..., 1]
        third = normal[..., 2]
        neg = (first < 0) | ((first == 0) & (second < 0)) | (
            (first == 0) & (second == 0) & (third < 0))
        flip = flip | (graze & neg)
    return np.where(flip[..., None], -normal, normal)


def _stats_from_blocks(world: np.ndarray, alpha: np.ndarray,
                       camera: CameraView) -> tuple[np.ndarray, np.ndarray]:
    """Statistics for pre-cut pixel blocks.

    ``world``: (..., p, p, 3) float64, ``alpha``: (..., p, p) float64 in {0,1}.
    Both the full-grid path and the single-window path feed identically
    laid-out contiguous blocks through this one function, so a grid cell and
    the window centered on its center pixel produce bit-equal statistics.
    """
    p = alpha.shape[-1]
    center = p // 2
    count = alpha.sum(axis=(-1, -2))
    coverage = count / float(p * p)
    valid = (coverage >= COVERAGE_MIN) & (alpha[..., center, center] == 1.0)
    safe = np.maximum(count, 1.0)

    aw = alpha[..., None]
    mean_world = (world * aw).sum(axis=(-2, -3)) / safe[..., None]

    cam = np.einsum("...k,lk->...l", world - camera.look_at, camera.rotation)
    mean_cam = (cam * aw).sum(axis=(-2, -3)) / safe[..., None]
    z = cam[..., 2]
    z2 = (z * z * alpha).sum(axis=(-1, -2)) / safe
    depth_std = np.sqrt(np.maximum(z2 - mean_cam[..., 2] ** 2, 0.0))

    m2 = np.einsum("...ijk,...ijl,...ij->...kl", world, world, alpha) / safe[..., None, None]
    cov = m2 - mean_world[..., :, None] * mean_world[..., None, :]
    normal = _oriented_normals(cov, camera.view_dir_world())

    iu, ju = np.triu_indices(3)
    cov_upper = cov[..., iu, ju]
    offset = mean_world - world[..., center, center, :]

    stats = np.concatenate([
        coverage[..., None],
        mean_cam,
        depth_std[..., None] * _DEPTH_SCALE,
        normal,
        cov_upper * _COV_SCALE,
        offset * _OFFSET_SCALE,
    ], axis=-1)
    return np.where(valid[..., None], stats, 0.0), valid


def _grid_blocks(arr: np.ndarray, patch: int) -> np.ndarray:
    h, w = arr.shape[0], arr.shape[1]
    g_r, g_c = h // patch, w // patch
    tail = arr.shape[2:]
    blocks = arr.reshape(g_r, patch, g_c, patch, *tail).swapaxes(1, 2)
    return np.ascontiguousarray(blocks, dtype=np.float64)


def cell_statistics(pmap: PositionMap, camera: CameraView,
                    patch: int = PATCH_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """(G, G, STAT_DIM) statistics plus (G, G) validity for one view."""
    if pmap.height % patch or pmap.width % patch:
        raise ValueError(
            f"map size {pmap.height}x{pmap.width} not divisible by patch {patch}")
    world = _grid_blocks(pmap.data[:, :, 0:3], patch)
    alpha = _grid_blocks(pmap.data[:, :, 3], patch)
    return _stats_from_blocks(world, alpha, camera)


def pixel_window_statistics(pmap: PositionMap, camera: CameraView, y: int, x: int,
                            patch: int = PATCH_SIZE) -> tuple[np.ndarray, bool]:
    """Statistics of the patch-sized window centered on pixel (y, x).

    The pixel sits at the same in-window offset as a grid-cell center, so a
    window at a cell's center pixel reproduces that cell's statistics
    exactly.  Returns (stats, ok); ok is False when the window leaves the
    image or fails the validity rule.
    """
    c = patch // 2
    y0, x0 = y - c, x - c
    if y0 < 0 or x0 < 0 or y0 + patch > pmap.height or x0 + patch > pmap.width:
        return np.zeros(STAT_DIM), False
    win = pmap.data[y0:y0 + patch, x0:x0 + patch]
    world = np.ascontiguousarray(
        win[None, None, :, :, 0:3], dtype=np.float64)
    alpha = np.ascontiguousarray(win[None, None, :, :, 3], dtype=np.float64)
    stats, valid = _stats_from_blocks(world, alpha, camera)
    return stats[0, 0], bool(valid[0, 0])


# ---------------------------------------------------------------------------
# frozen perceptron heads
# ---------------------------------------------------------------------------


@dataclass
class PatchGrid:
    view_index: int
    features: np.ndarray   # (G, G, f2d) float64, zero at invalid cells
    valid: np.ndarray      # (G, G) bool

    @property
    def grid(self) -> int:
        return self.features.shape[0]


def feature_from_stats(stats: np.ndarray, backbone: FrozenBackbone2D) -> np.ndarray:
    hidden = np.tanh(stats @ backbone.w1 + backbone.b1)
    return hidden @ backbone.w2 + backbone.b2


def extract_patch_features(pmap: PositionMap, camera: CameraView,
                           backbone: FrozenBackbone2D) -> PatchGrid:
    stats, valid = cell_statistics(pmap, camera, backbone.patch)
    features = feature_from_stats(stats, backbone)
    features = np.where(valid[..., None], features, 0.0)
    return PatchGrid(view_index=camera.view_index, features=features, valid=valid)


def compute_view_context(grid: PatchGrid, backbone: FrozenBackbone2D) -> np.ndarray:
    """Frozen linear map of the mean valid-cell feature; zero when none."""
    if not grid.valid.any():
        return np.zeros(backbone.dc)
    mean_feat = grid.features[grid.valid].mean(axis=0)
    return mean_feat @ backbone.ctx_w


# ---------------------------------------------------------------------------
# teacher tokens
# ---------------------------------------------------------------------------


def shape_statistics(instance: ObjectInstance, backbone: FrozenBackbone2D) -> np.ndarray:
    """Category one-hot ⊕ bbox extents ⊕ point-weighted part-size histogram."""
    one_hot = np.zeros(backbone.n_categories)
    one_hot[instance.category_id] = 1.0
    xyz = instance.points[:, 0:3].astype(np.float64)
    extents = xyz.max(axis=0) - xyz.min(axis=0)
    hist = np.zeros(_HIST_BINS)
    diag_max = np.sqrt(3.0)
    for label in np.unique(instance.point_label):
        sel = xyz[instance.point_label == label]
        diag = float(np.linalg.norm(sel.max(axis=0) - sel.min(axis=0)))
        b = min(int(diag / diag_max * _HIST_BINS), _HIST_BINS - 1)
        hist[b] += sel.shape[0] / xyz.shape[0]
    return np.concatenate([one_hot, extents, hist])


def teacher_token(instance: ObjectInstance, camera: CameraView,
                  backbone: FrozenBackbone2D) -> np.ndarray:
    """Per-view frozen shape embedding with a small view-dependent wobble."""
    stats = shape_statistics(instance, backbone)
    hidden = np.tanh(stats @ backbone.teach_w1 + backbone.teach_b1)
    base = hidden @ backbone.teach_w2 + backbone.teach_b2
    wobble = np.tanh(camera.view_dir_world() @ backbone.teach_view_w)
    return base + _VIEW_WOBBLE * wobble


def mean_teacher(view_tokens: Sequence[np.ndarray]) -> np.ndarray:
    """Instance-level teacher embedding: arithmetic mean over views."""
    return np.stack(view_tokens, axis=0).mean(axis=0)


# ---------------------------------------------------------------------------
# query sampling
# ---------------------------------------------------------------------------


@dataclass
class QuerySet:
    q: np.ndarray           # (M, 3) float64 world coords, exact map values
    x: np.ndarray           # (M, f2d) float64 cell features
    view_index: np.ndarray  # (M,) int32 index into the sampled view list
    cell: np.ndarray        # (M, 2) int32 grid cell (row, col)

    def __len__(self) -> int:
        return self.q.shape[0]


def _empty_queries(f2d: int) -> QuerySet:
    return QuerySet(
        q=np.zeros((0, 3)), x=np.zeros((0, f2d)),
        view_index=np.zeros(0, dtype=np.int32), cell=np.zeros((0, 2), dtype=np.int32))


def sample_queries(grids: Sequence[PatchGrid], maps: Sequence[PositionMap],
                   m_max: int) -> QuerySet:
    """Valid grid-center samples across views, FPS-thinned to at most m_max.

    Coordinates are read straight off the position maps (never re-projected),
    so each q equals its map value bit-for-bit.
    """
    if len(grids) != len(maps):
        raise ValueError("grids and maps must pair up per view")
    qs, xs, views, cells = [], [], [], []
    for s, (grid, pmap) in enumerate(zip(grids, maps)):
        g = grid.grid
        patch = pmap.height // g
        c = patch // 2
        for u, v in np.argwhere(grid.valid):
            py, px = u * patch + c, v * patch + c
            qs.append(pmap.data[py, px, 0:3].astype(np.float64))
            xs.append(grid.features[u, v])
            views.append(s)
            cells.append((u, v))
    if not qs:
        f2d = grids[0].features.shape[-1] if grids else F2D
        return _empty_queries(f2d)
    q = np.stack(qs)
    x = np.stack(xs)
    view_index = np.array(views, dtype=np.int32)
    cell = np.array(cells, dtype=np.int32)
    if len(q) > m_max:
        keep = farthest_point_indices(q, m_max)
        q, x, view_index, cell = q[keep], x[keep], view_index[keep], cell[keep]
    return QuerySet(q=q, x=x, view_index=view_index, cell=cell)
