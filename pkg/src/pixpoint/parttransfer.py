"""Click-to-region part transfer at inference time.

A click in one rendered view turns into a 3D surface region through a fixed
pipeline: ground-truth part mask lookup (the synthetic stand-in for an
interactive segmenter), patch activation, per-patch top-1 token matching
with dedup and a similarity floor, DBSCAN over the matched token centers,
seed-face projection, breadth-first flood fill over face adjacency bounded
by a radius around the cluster, and largest-connected-component retention.

No stage involves training; everything runs on frozen descriptors.
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .dataset import ObjectRecord
from .features2d import compute_view_context, extract_patch_features
from .model import AlignmentModel
from .render import CameraView, PositionMap, default_splat_radius, render_points
from .shapes import ObjectInstance

COVERAGE_FRAC = 0.3
SIM_MIN = 0.5
DBSCAN_EPS = 0.08
DBSCAN_MIN_PTS = 3
SEED_RADIUS = 0.05
FLOOD_RADIUS = 0.10


class TransferError(ValueError):
    """A stage precondition is violated (bad click, malformed mask)."""


@dataclass(frozen=True)
class TransferThresholds:
    coverage_frac: float = COVERAGE_FRAC
    sim_min: float = SIM_MIN
    eps: float = DBSCAN_EPS
    min_pts: int = DBSCAN_MIN_PTS
    seed_radius: float = SEED_RADIUS
    flood_radius: float = FLOOD_RADIUS

    def __post_init__(self):
        if not 0.0 < self.coverage_frac <= 1.0:
            raise ValueError("coverage_frac must be in (0, 1]")
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")
        if self.min_pts < 1:
            raise ValueError("min_pts must be at least 1")
        if self.seed_radius <= 0.0 or self.flood_radius <= 0.0:
            raise ValueError("radii must be positive")


@dataclass
class PartMask2D:
    mask: np.ndarray          # (H, W) bool
    view_index: int
    click: tuple              # (y, x)
    part_label: int           # -1 for externally supplied masks


@dataclass
class MatchSet:
    tokens: np.ndarray        # (K,) int, strictly increasing
    sims: np.ndarray          # (K,) float in [-1, 1]
    patches: np.ndarray       # (K,) int row into the query descriptors

    @property
    def empty(self) -> bool:
        return self.tokens.size == 0


@dataclass
class Region3D:
    faces: np.ndarray         # sorted face indices, one connected component
    seed_faces: np.ndarray
    cluster_label: int


@dataclass
class TransferResult:
    region: Region3D | None   # None <=> the pipeline lost confidence
    mask: PartMask2D
    matches: MatchSet
    cluster_labels: np.ndarray
    failed_stage: str | None  # "match" | "cluster" | "seed" when region is None
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# stage 1: 2D part masks
# ---------------------------------------------------------------------------


def part_footprint(instance: ObjectInstance, camera: CameraView, label: int,
                   splat_radius_px: float) -> np.ndarray:
    """Pixels the given part covers when rendered alone (no occluders)."""
    sel = instance.point_label == label
    pm = render_points(instance.points[sel, 0:3], instance.point_label[sel],
                       camera, splat_radius_px)
    return pm.alpha == 1.0


def select_mask(instance: ObjectInstance, camera: CameraView, pmap: PositionMap,
                click, splat_radius_px: float) -> PartMask2D:
    """Smallest part footprint containing the click.

    Footprints are computed per part without occlusion, so a click on a part
    that sits in front of a larger one is contained in both; the smaller
    footprint (ties: lower label) wins.  The visible part at the click always
    qualifies, so the candidate set is never empty.
    """
    y, x = int(click[0]), int(click[1])
    if not (0 <= y < pmap.height and 0 <= x < pmap.width):
        raise TransferError(f"click ({y}, {x}) outside the image")
    if pmap.labels[y, x] < 0:
        raise TransferError(f"click ({y}, {x}) is on the background")
    best = None
    for label in np.unique(instance.point_label):
        fp = part_footprint(instance, camera, int(label), splat_radius_px)
        if fp[y, x]:
            key = (int(fp.sum()), int(label))
            if best is None or key < best[0]:
                best = (key, int(label), fp)
    if best is None:
        # Only possible when the footprints use a smaller splat radius than
        # the position map was rendered with.
        raise TransferError("no part footprint contains the click; pass the "
                            "splat radius the view was rendered with")
    _, label, fp = best
    return PartMask2D(mask=fp, view_index=camera.view_index, click=(y, x),
                      part_label=label)


def validate_external_mask(mask: np.ndarray, pmap: PositionMap,
                           click, view_index: int) -> PartMask2D:
    """Adapt a user-supplied boolean mask to the PartMask2D contract."""
    mask = np.asarray(mask)
    if mask.shape != (pmap.height, pmap.width):
        raise TransferError(f"mask shape {mask.shape} does not match the "
                            f"view ({pmap.height}, {pmap.width})")
    mask = mask.astype(bool)
    y, x = int(click[0]), int(click[1])
    if not (0 <= y < pmap.height and 0 <= x < pmap.width) or not mask[y, x]:
        raise TransferError("click point must lie inside the mask")
    if np.any(mask & (pmap.alpha != 1.0)):
        raise TransferError("mask covers background pixels")
    return PartMask2D(mask=mask, view_index=view_index, click=(y, x),
                      part_label=-1)


# ---------------------------------------------------------------------------
# stage 2: patch activation
# ---------------------------------------------------------------------------


def activate_patches(mask: np.ndarray, patch: int,
                     coverage_frac: float = COVERAGE_FRAC) -> np.ndarray:
    """(G, G) bool: cells where the mask covers >= coverage_frac of the area."""
    if not 0.0 < coverage_frac <= 1.0:
        raise ValueError("coverage_frac must be in (0, 1]")
    h, w = mask.shape
    if h % patch or w % patch:
        raise ValueError(f"mask size {h}x{w} not divisible by patch {patch}")
    g_r, g_c = h // patch, w // patch
    frac = (mask.astype(np.float64)
            .reshape(g_r, patch, g_c, patch).mean(axis=(1, 3)))
    return frac >= coverage_frac


# ---------------------------------------------------------------------------
# stage 3: matching
# ---------------------------------------------------------------------------


def match_and_filter(desc2d: np.ndarray, desc3d: np.ndarray,
                     sim_min: float = SIM_MIN) -> MatchSet:
    """Top-1 token per query row, deduplicated and floored.

    Per token only the highest-similarity query survives (ties: lowest query
    row); matches below sim_min are dropped.  An empty result is the
    no-confident-region signal, not an error.
    """
    if desc2d.shape[0] == 0:
        return MatchSet(tokens=np.zeros(0, dtype=np.int64),
                        sims=np.zeros(0), patches=np.zeros(0, dtype=np.int64))
    sims = desc2d @ desc3d.T
    top = sims.argmax(axis=1)                 # first max -> lowest token index
    top_sim = sims[np.arange(sims.shape[0]), top]
    best: dict[int, tuple[float, int]] = {}
    for row in range(top.shape[0]):
        tok = int(top[row])
        if tok not in best or top_sim[row] > best[tok][0]:
            best[tok] = (float(top_sim[row]), row)
    kept = sorted((tok, s, row) for tok, (s, row) in best.items()
                  if s >= sim_min)
    return MatchSet(
        tokens=np.array([t for t, _, _ in kept], dtype=np.int64),
        sims=np.array([s for _, s, _ in kept], dtype=np.float64),
        patches=np.array([r for _, _, r in kept], dtype=np.int64))


# ---------------------------------------------------------------------------
# stage 4: spatial clustering
# ---------------------------------------------------------------------------


def dbscan(points: np.ndarray, eps: float = DBSCAN_EPS,
           min_pts: int = DBSCAN_MIN_PTS) -> np.ndarray:
    """Classic DBSCAN labels (-1 = noise), deterministic in point order.

    Neighborhoods are closed balls (<= eps) and include the point itself, so
    an isolated point is noise whenever min_pts >= 2.
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be at least 1")
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    neigh = [np.flatnonzero(d2[i] <= eps * eps) for i in range(n)]
    core = np.array([len(neigh[i]) >= min_pts for i in range(n)])
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for i in range(n):
        if visited[i] or not core[i]:
            continue
        visited[i] = True
        labels[i] = cluster
        queue = deque(int(j) for j in neigh[i] if j != i)
        while queue:
            j = queue.popleft()
            if labels[j] == -1:
                labels[j] = cluster        # border or rescued noise
            if not visited[j]:
                visited[j] = True
                if core[j]:
                    queue.extend(int(m) for m in neigh[j] if labels[m] == -1
                                 or not visited[m])
        cluster += 1
    return labels


def dominant_cluster(labels: np.ndarray):
    """Largest cluster label, ties to the lowest label; None if all noise."""
    members = labels[labels >= 0]
    if members.size == 0:
        return None
    counts = np.bincount(members)
    return int(counts.argmax())            # argmax keeps the lowest on ties


# ---------------------------------------------------------------------------
# stage 5: surface flood fill
# ---------------------------------------------------------------------------


def faces_within(instance: ObjectInstance, centers: np.ndarray,
                 radius: float) -> np.ndarray:
    """(F,) bool: face centroid within radius of any of the centers."""
    centroids = instance.face_centroids()
    d2 = ((centroids[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return d2.min(axis=1) <= radius * radius


def flood_fill(seeds, adj_indptr: np.ndarray, adj_indices: np.ndarray,
               allowed: np.ndarray):
    """Multi-source BFS closure of the seeds inside the allowed set, then the
    largest connected component (ties: the component seeded earliest).

    Returns (sorted face array, per-face component id of the closure) or
    (None, None) when no seed is allowed.
    """
    n_faces = adj_indptr.shape[0] - 1
    seeds = [int(s) for s in seeds if allowed[int(s)]]
    if not seeds:
        return None, None
    visited = np.full(n_faces, -1, dtype=np.int64)
    comp = 0
    for seed in seeds:
        if visited[seed] >= 0:
            continue
        visited[seed] = comp
        queue = deque([seed])
        while queue:
            f = queue.popleft()
            for g in adj_indices[adj_indptr[f]:adj_indptr[f + 1]]:
                g = int(g)
                if allowed[g] and visited[g] < 0:
                    visited[g] = comp
                    queue.append(g)
        comp += 1
    sizes = np.bincount(visited[visited >= 0], minlength=comp)
    best = int(sizes.argmax())
    return np.flatnonzero(visited == best).astype(np.int64), visited


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------


def _active_cell_descriptors(model: AlignmentModel, grid, context,
                             active: np.ndarray):
    """Local descriptors of active AND feature-valid cells, plus the cells."""
    usable = active & grid.valid
    cells = np.argwhere(usable)
    if cells.shape[0] == 0:
        return np.zeros((0, model.config.dloc)), cells
    rows = np.concatenate(
        [grid.features[usable],
         np.broadcast_to(context, (cells.shape[0], context.size))], axis=1)
    with no_grad():
        desc = model.head_2d(model.encoder_2d(Tensor(rows)))
    return desc.data.copy(), cells


def transfer(model: AlignmentModel, record: ObjectRecord, view_id: int, click,
             thresholds: TransferThresholds = TransferThresholds(),
             resolution: int | None = None,
             external_mask: np.ndarray | None = None,
             splat_radius_px: float | None = None) -> TransferResult:
    """Run the whole click-to-region pipeline on one view of one object."""
    instance = record.instance
    base = record.maps[0].height
    resolution = base if resolution is None else resolution
    camera = record.cameras_at(resolution)[view_id]
    pmap = record.maps_at(resolution, [view_id])[0]
    if splat_radius_px is None:
        splat_radius_px = default_splat_radius(resolution, resolution)

    if external_mask is not None:
        mask = validate_external_mask(external_mask, pmap, click, view_id)
    else:
        mask = select_mask(instance, camera, pmap, click, splat_radius_px)

    grid = extract_patch_features(pmap, camera, model.backbone)
    context = compute_view_context(grid, model.backbone)
    active = activate_patches(mask.mask, model.backbone.patch,
                              thresholds.coverage_frac)
    desc2d, cells = _active_cell_descriptors(model, grid, context, active)

    field3d = model.token_field(record)
    with no_grad():
        _, d3d = model.local_3d(field3d)
    matches = match_and_filter(desc2d, d3d.data, thresholds.sim_min)

    diagnostics = {
        "part_label": mask.part_label,
        "mask_pixels": int(mask.mask.sum()),
        "active_patches": int(active.sum()),
        "usable_patches": int(cells.shape[0]),
        "matched_tokens": int(matches.tokens.size),
    }
    labels = np.full(matches.tokens.size, -1, dtype=np.int64)
    if matches.empty:
        return TransferResult(region=None, mask=mask, matches=matches,
                              cluster_labels=labels, failed_stage="match",
                              diagnostics=diagnostics)

    coords = field3d.centers[matches.tokens]
    labels = dbscan(coords, thresholds.eps, thresholds.min_pts)
    dom = dominant_cluster(labels)
    diagnostics["cluster_sizes"] = np.bincount(
        labels[labels >= 0]).tolist() if (labels >= 0).any() else []
    if dom is None:
        return TransferResult(region=None, mask=mask, matches=matches,
                              cluster_labels=labels, failed_stage="cluster",
                              diagnostics=diagnostics)
    members = coords[labels == dom]
    diagnostics["dominant_cluster"] = dom
    diagnostics["dominant_size"] = int(members.shape[0])

    seed_mask = faces_within(instance, members, thresholds.seed_radius)
    seeds = np.flatnonzero(seed_mask)
    diagnostics["seed_faces"] = int(seeds.size)
    if seeds.size == 0:
        return TransferResult(region=None, mask=mask, matches=matches,
                              cluster_labels=labels, failed_stage="seed",
                              diagnostics=diagnostics)

    allowed = faces_within(instance, members, thresholds.flood_radius)
    diagnostics["allowed_faces"] = int(allowed.sum())
    faces, _ = flood_fill(seeds, instance.adj_indptr, instance.adj_indices,
                          allowed)
    if faces is None:          # seeds outside allowed: radii inverted by hand
        return TransferResult(region=None, mask=mask, matches=matches,
                              cluster_labels=labels, failed_stage="seed",
                              diagnostics=diagnostics)
    diagnostics["region_faces"] = int(faces.size)
    region = Region3D(faces=faces, seed_faces=seeds, cluster_label=dom)
    return TransferResult(region=region, mask=mask, matches=matches,
                          cluster_labels=labels, failed_stage=None,
                          diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# scoring helpers
# ---------------------------------------------------------------------------


def part_faces(instance: ObjectInstance, label: int) -> np.ndarray:
    return np.flatnonzero(instance.face_label == label).astype(np.int64)


def face_iou(region: Region3D, instance: ObjectInstance, label: int) -> float:
    """Intersection-over-union of the region against one part's face set."""
    a = set(region.faces.tolist())
    b = set(part_faces(instance, label).tolist())
    union = len(a | b)
    return len(a & b) / union if union else 0.0
