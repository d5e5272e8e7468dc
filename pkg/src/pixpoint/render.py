"""Orthographic z-buffered point splatting.

Each surface point covers the pixels whose centers fall within
``splat_radius_px`` of its projection; the nearest-depth point wins each
pixel (depth ties break to the lower point index, making renders a pure
function of the input order).  The winning pixel stores the point's *exact*
world coordinates, so position maps are bit-consistent with the sampled
cloud -- that is what makes localization ground truth exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_MARGIN = 0.05
BASE_RESOLUTION = 64
BASE_SPLAT_RADIUS = 1.5


@dataclass
class CameraView:
    """Orthographic camera: cam = R @ (world - look_at), pixels = center + scale * xy."""

    view_index: int
    rotation: np.ndarray          # (3,3) world->camera, right-handed
    look_at: np.ndarray           # (3,)
    height: int
    width: int
    px_per_unit: float

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        r = self.rotation
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-9:
            raise ValueError("camera rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("camera rotation must be proper (det +1)")
        if self.height <= 0 or self.width <= 0:
            raise ValueError("image size must be positive")

    def view_dir_world(self) -> np.ndarray:
        """World-frame direction the camera looks along (+z in camera frame)."""
        return self.rotation[2].copy()


@dataclass
class PositionMap:
    data: np.ndarray         # (H, W, 4) float32: x, y, z, alpha
    labels: np.ndarray       # (H, W) int32 part label, -1 background
    point_index: np.ndarray  # (H, W) int32 source point, -1 background

    @property
    def alpha(self) -> np.ndarray:
        return self.data[:, :, 3]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def default_px_scale(height: int, width: int, margin: float = DEFAULT_MARGIN) -> float:
    """Fit the unit cube (diagonal sqrt(3), centered on look_at) with a margin."""
    return (1.0 - 2.0 * margin) * min(height, width) / math.sqrt(3.0)


def default_splat_radius(height: int, width: int) -> float:
    return BASE_SPLAT_RADIUS * min(height, width) / BASE_RESOLUTION


def _camera_from_axes(view_index, view_dir, up_hint, height, width, px_per_unit, look_at):
    z = np.asarray(view_dir, dtype=np.float64)
    up = np.asarray(up_hint, dtype=np.float64)
    x = np.cross(up, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return CameraView(view_index, np.stack([x, y, z]), np.asarray(look_at, float),
                      height, width, px_per_unit)


def axis_cameras(height: int, width: int, margin: float = DEFAULT_MARGIN,
                 look_at=(0.5, 0.5, 0.5), start_index: int = 0) -> list[CameraView]:
    """Six axis-aligned orthographic views (exact +-1 rotation entries)."""
    scale = default_px_scale(height, width, margin)
    specs = [
        ((-1, 0, 0), (0, 0, 1)),   # camera on +x
        ((1, 0, 0), (0, 0, 1)),    # camera on -x
        ((0, -1, 0), (0, 0, 1)),   # camera on +y
        ((0, 1, 0), (0, 0, 1)),    # camera on -y
        ((0, 0, -1), (0, 1, 0)),   # camera on +z
        ((0, 0, 1), (0, 1, 0)),    # camera on -z
    ]
    return [
        _camera_from_axes(start_index + i, d, u, height, width, scale, look_at)
        for i, (d, u) in enumerate(specs)
    ]


def rotation_from_quaternion(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_cameras(n: int, rng: np.random.Generator, height: int, width: int,
                   margin: float = DEFAULT_MARGIN, look_at=(0.5, 0.5, 0.5),
                   start_index: int = 0) -> list[CameraView]:
    """Uniformly random orientations (Shoemake quaternion sampling)."""
    scale = default_px_scale(height, width, margin)
    cams = []
    for i in range(n):
        u1, u2, u3 = rng.random(3)
        q = np.array([
            math.sqrt(1 - u1) * math.sin(2 * math.pi * u2),
            math.sqrt(1 - u1) * math.cos(2 * math.pi * u2),
            math.sqrt(u1) * math.sin(2 * math.pi * u3),
            math.sqrt(u1) * math.cos(2 * math.pi * u3),
        ])
        cams.append(CameraView(start_index + i, rotation_from_quaternion(q),
                               np.asarray(look_at, float), height, width, scale))
    return cams


def render_points(points_xyz: np.ndarray, labels: np.ndarray, camera: CameraView,
                  splat_radius_px: float | None = None) -> PositionMap:
    """Core splatter over a raw point array (world coordinates, any dtype)."""
    h, w = camera.height, camera.width
    if splat_radius_px is None:
        splat_radius_px = default_splat_radius(h, w)
    data = np.zeros((h, w, 4), dtype=np.float32)
    lab = np.full((h, w), -1, dtype=np.int32)
    pidx = np.full((h, w), -1, dtype=np.int32)
    pts32 = np.ascontiguousarray(points_xyz, dtype=np.float32)
    n = pts32.shape[0]
    if n == 0:
        return PositionMap(data, lab, pidx)

    cam = (pts32.astype(np.float64) - camera.look_at) @ camera.rotation.T
    u = (w - 1) / 2.0 + camera.px_per_unit * cam[:, 0]
    v = (h - 1) / 2.0 + camera.px_per_unit * cam[:, 1]
    depth = cam[:, 2]

    reach = int(math.ceil(splat_radius_px)) + 1
    base_j = np.floor(u).astype(np.int64)
    base_i = np.floor(v).astype(np.int64)
    r2 = splat_radius_px * splat_radius_px

    pix_list, depth_list, idx_list = [], [], []
    point_ids = np.arange(n, dtype=np.int64)
    for di in range(-reach, reach + 1):
        for dj in range(-reach, reach + 1):
            i = base_i + di
            j = base_j + dj
            cover = ((j - u) ** 2 + (i - v) ** 2 <= r2) & \
                    (i >= 0) & (i < h) & (j >= 0) & (j < w)
            if not np.any(cover):
                continue
            pix_list.append(i[cover] * w + j[cover])
            depth_list.append(depth[cover])
            idx_list.append(point_ids[cover])
    if not pix_list:
        return PositionMap(data, lab, pidx)

    pix = np.concatenate(pix_list)
    dep = np.concatenate(depth_list)
    ids = np.concatenate(idx_list)
    order = np.lexsort((ids, dep, pix))  # by pixel, then depth, then point index
    pix, ids = pix[order], ids[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    win_pix = pix[first]
    win_ids = ids[first]

    ii = (win_pix // w).astype(np.intp)
    jj = (win_pix % w).astype(np.intp)
    data[ii, jj, 0:3] = pts32[win_ids]
    data[ii, jj, 3] = 1.0
    lab[ii, jj] = np.asarray(labels, dtype=np.int32)[win_ids]
    pidx[ii, jj] = win_ids.astype(np.int32)
    return PositionMap(data, lab, pidx)


def render_view(instance, camera: CameraView, splat_radius_px: float | None = None) -> PositionMap:
    """Render an ObjectInstance's sampled surface points into a position map."""
    return render_points(instance.points[:, 0:3], instance.point_label, camera, splat_radius_px)
