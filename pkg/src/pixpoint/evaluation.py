"""Localization accuracy, retrieval metrics, and query-direction tools.

Everything here ranks by exhaustive cosine similarity — no approximate
index — with stable lowest-index tie-breaks, and never mutates the model:
forwards run under no_grad and results are plain arrays.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .dataset import Dataset, ObjectRecord
from .features2d import (
    PATCH_SIZE, compute_view_context, extract_patch_features,
    feature_from_stats, pixel_window_statistics,
)
from .model import AlignmentModel
from .render import CameraView, PositionMap

K_LIST_DEFAULT = (1, 2, 3, 5, 10)
MAX_EVAL_PIXELS = 20
WORLD_EDGE = 1.0
PROTOCOLS = ("s1-random", "s4-random", "s4-ortho")
_SPAWN_EVAL = 5


class QueryError(ValueError):
    """A query violates its preconditions (background pixel, no queries)."""


# ---------------------------------------------------------------------------
# core metrics
# ---------------------------------------------------------------------------


@dataclass
class LocAccResult:
    k_list: tuple
    scores: dict                 # k -> mean score over queries
    top: np.ndarray              # (M, max k) token indices, best first
    d_star: np.ndarray           # (M, len(k_list))
    per_query: np.ndarray        # (M, len(k_list)) clamped scores
    gt: np.ndarray               # (M, 3)
    meta: list = field(default_factory=list)   # optional per-query context

    @property
    def n_queries(self) -> int:
        return self.per_query.shape[0]


@dataclass
class RetrievalResult:
    k_list: tuple
    recall: dict                 # k -> percentage
    mrr: float                   # percentage
    order: np.ndarray            # (M, N) full ranked gallery per query
    first_correct: np.ndarray    # (M,) 1-based rank of first hit, 0 = none


def _stable_order(sims: np.ndarray) -> np.ndarray:
    """Descending-similarity order; equal scores keep lowest index first."""
    return np.argsort(-sims, axis=1, kind="stable")


def loc_acc(desc2d: np.ndarray, gt: np.ndarray, desc3d: np.ndarray,
            centers: np.ndarray, k_list=K_LIST_DEFAULT,
            length: float = WORLD_EDGE, meta=None) -> LocAccResult:
    """Mean retrieval-distance score per k over a batch of pixel queries.

    For each query the top-k tokens by cosine are collected; the score is
    (1 - d*/ (sqrt(3) * length)) * 100 clamped to [0, 100], where d* is the
    distance from the ground-truth coordinate to the nearest of the k token
    centers.
    """
    desc2d = np.asarray(desc2d)
    if desc2d.shape[0] == 0:
        raise QueryError("localization needs at least one query")
    if length <= 0:
        raise ValueError("normalization length must be positive")
    k_list = tuple(k_list)
    kmax = max(k_list)
    sims = desc2d @ np.asarray(desc3d).T
    top = _stable_order(sims)[:, :kmax]
    diff = np.asarray(gt)[:, None, :] - np.asarray(centers)[top]
    dists = np.sqrt((diff ** 2).sum(axis=2))
    d_norm = math.sqrt(3.0) * length
    d_star = np.stack([dists[:, :k].min(axis=1) for k in k_list], axis=1)
    per_query = np.clip((1.0 - d_star / d_norm) * 100.0, 0.0, 100.0)
    scores = {k: float(per_query[:, i].mean()) for i, k in enumerate(k_list)}
    return LocAccResult(k_list=k_list, scores=scores, top=top, d_star=d_star,
                        per_query=per_query, gt=np.asarray(gt, dtype=np.float64),
                        meta=list(meta) if meta is not None else [])


def merge_loc_acc(results) -> LocAccResult:
    """Pool per-query records of several results (same k_list)."""
    results = [r for r in results if r.n_queries]
    if not results:
        raise QueryError("localization needs at least one query")
    k_list = results[0].k_list
    if any(r.k_list != k_list for r in results):
        raise ValueError("cannot merge results with different k lists")
    kmax = max(k_list)
    per_query = np.concatenate([r.per_query for r in results])
    d_star = np.concatenate([r.d_star for r in results])
    top = np.concatenate([r.top[:, :kmax] for r in results])
    gt = np.concatenate([r.gt for r in results])
    meta = [m for r in results for m in r.meta]
    scores = {k: float(per_query[:, i].mean()) for i, k in enumerate(k_list)}
    return LocAccResult(k_list=k_list, scores=scores, top=top, d_star=d_star,
                        per_query=per_query, gt=gt, meta=meta)


def retrieval_eval(query_desc: np.ndarray, query_labels, gallery_desc: np.ndarray,
                   gallery_labels, k_list=K_LIST_DEFAULT) -> RetrievalResult:
    """Category-level recall@k and mean reciprocal rank, both in percent."""
    gallery_desc = np.asarray(gallery_desc)
    if gallery_desc.shape[0] == 0:
        raise ValueError("retrieval needs a nonempty gallery")
    query_labels = np.asarray(query_labels)
    gallery_labels = np.asarray(gallery_labels)
    sims = np.asarray(query_desc) @ gallery_desc.T
    order = _stable_order(sims)
    correct = gallery_labels[order] == query_labels[:, None]
    m, n = correct.shape
    first = np.where(correct.any(axis=1), correct.argmax(axis=1) + 1, 0)
    k_list = tuple(k_list)
    recall = {k: float(correct[:, :min(k, n)].any(axis=1).mean() * 100.0)
              for k in k_list}
    rr = np.where(first > 0, 1.0 / np.maximum(first, 1), 0.0)
    return RetrievalResult(k_list=k_list, recall=recall,
                           mrr=float(rr.mean() * 100.0), order=order,
                           first_correct=first)


# ---------------------------------------------------------------------------
# oracle-style reference rankings
# ---------------------------------------------------------------------------


def random_token_baseline(gt: np.ndarray, centers: np.ndarray, k_list,
                          length: float, rng: np.random.Generator) -> dict:
    """Scores of a ranking that ignores descriptors entirely."""
    k_list = tuple(k_list)
    n = centers.shape[0]
    out = np.zeros((gt.shape[0], len(k_list)))
    for i in range(gt.shape[0]):
        perm = rng.permutation(n)
        d = np.linalg.norm(centers[perm] - gt[i], axis=1)
        for j, k in enumerate(k_list):
            out[i, j] = d[:k].min()
    scores = np.clip((1.0 - out / (math.sqrt(3.0) * length)) * 100.0, 0, 100)
    return {k: float(scores[:, j].mean()) for j, k in enumerate(k_list)}


def nearest_token_ceiling(gt: np.ndarray, centers: np.ndarray, k_list,
                          length: float) -> dict:
    """Best achievable scores: an oracle that always ranks the true nearest
    token first (identical for every k)."""
    d_nn = np.sqrt(((gt[:, None, :] - centers[None, :, :]) ** 2).sum(2)).min(1)
    score = float(np.clip((1.0 - d_nn / (math.sqrt(3.0) * length)) * 100.0,
                          0, 100).mean())
    return {k: score for k in tuple(k_list)}


# ---------------------------------------------------------------------------
# pixel-level descriptor extraction
# ---------------------------------------------------------------------------


def valid_window_mask(pmap: PositionMap, patch: int = PATCH_SIZE) -> np.ndarray:
    """(H, W) bool: pixels whose centered window passes the validity rule.

    Matches pixel_window_statistics' ok flag for every pixel, computed with
    an integral image instead of a per-pixel loop.
    """
    alpha = np.asarray(pmap.data[:, :, 3], dtype=np.float64)
    h, w = alpha.shape
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = alpha.cumsum(axis=0).cumsum(axis=1)
    c = patch // 2
    mask = np.zeros((h, w), dtype=bool)
    y0 = np.arange(h) - c
    x0 = np.arange(w) - c
    ok_y = (y0 >= 0) & (y0 + patch <= h)
    ok_x = (x0 >= 0) & (x0 + patch <= w)
    ys = np.flatnonzero(ok_y)
    xs = np.flatnonzero(ok_x)
    if ys.size == 0 or xs.size == 0:
        return mask
    top, left = y0[ys][:, None], x0[xs][None, :]
    counts = (integral[top + patch, left + patch] - integral[top, left + patch]
              - integral[top + patch, left] + integral[top, left])
    coverage = counts / float(patch * patch)
    fg = alpha[np.ix_(ys, xs)] == 1.0
    mask[np.ix_(ys, xs)] = (coverage >= 0.5) & fg
    return mask


def sample_eval_pixels(pmap: PositionMap, rng: np.random.Generator,
                       max_pixels: int = MAX_EVAL_PIXELS,
                       patch: int = PATCH_SIZE) -> np.ndarray:
    """Up to max_pixels foreground pixels with usable centered windows."""
    candidates = np.argwhere(valid_window_mask(pmap, patch))
    if candidates.shape[0] > max_pixels:
        keep = rng.choice(candidates.shape[0], size=max_pixels, replace=False)
        candidates = candidates[np.sort(keep)]
    return candidates


def pixel_descriptors(model: AlignmentModel, pmap: PositionMap,
                      camera: CameraView, context: np.ndarray,
                      pixels) -> np.ndarray:
    """Local descriptors for pixel-centered windows of one view."""
    stats = []
    for y, x in pixels:
        row, ok = pixel_window_statistics(pmap, camera, int(y), int(x),
                                          model.backbone.patch)
        if not ok:
            raise QueryError(f"pixel ({y}, {x}) has no usable window")
        stats.append(row)
    feats = feature_from_stats(np.stack(stats), model.backbone)
    rows = np.concatenate(
        [feats, np.broadcast_to(context, (feats.shape[0], context.size))],
        axis=1)
    with no_grad():
        desc = model.head_2d(model.encoder_2d(Tensor(rows)))
    return desc.data.copy()


def token_descriptors(model: AlignmentModel, record: ObjectRecord):
    """Token field plus its local descriptors as plain arrays."""
    field3d = model.token_field(record)
    with no_grad():
        h3d, d3d = model.local_3d(field3d)
    return field3d, h3d, d3d.data.copy()


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------


def eval_rng(seed: int, protocol: str, object_id: int) -> np.random.Generator:
    ss = np.random.SeedSequence(
        seed, spawn_key=(_SPAWN_EVAL, PROTOCOLS.index(protocol), object_id))
    return np.random.default_rng(ss)


def protocol_views(protocol: str, n_views: int,
                   rng: np.random.Generator) -> list:
    """View indices for one object under a named protocol.

    The first six views of every record are the axis-aligned cameras, which
    is what the "ortho" protocol draws from.
    """
    if protocol == "s1-random":
        return [int(rng.integers(n_views))]
    if protocol == "s4-random":
        return [int(v) for v in rng.choice(n_views, size=4, replace=False)]
    if protocol == "s4-ortho":
        return [int(v) for v in rng.choice(6, size=4, replace=False)]
    raise ValueError(f"unknown protocol '{protocol}'; "
                     f"expected one of {PROTOCOLS}")


# ---------------------------------------------------------------------------
# dataset-level evaluation
# ---------------------------------------------------------------------------


def localization_eval(model: AlignmentModel, dataset: Dataset, ids, protocol: str,
                      seed: int, resolution: int, k_list=K_LIST_DEFAULT,
                      max_pixels: int = MAX_EVAL_PIXELS) -> LocAccResult:
    """LocAcc over all sampled pixels of the given objects."""
    results = []
    for oid in ids:
        record = dataset.records[oid]
        rng = eval_rng(seed, protocol, oid)
        views = protocol_views(protocol, len(record.cameras), rng)
        data = model.view_data(record, views, resolution)
        field3d, _, d3d = token_descriptors(model, record)
        desc_rows, gt_rows, meta = [], [], []
        for local_idx, (pmap, camera) in enumerate(zip(data.maps, data.cameras)):
            pixels = sample_eval_pixels(pmap, rng, max_pixels,
                                        model.backbone.patch)
            if pixels.shape[0] == 0:
                continue
            desc_rows.append(pixel_descriptors(
                model, pmap, camera, data.contexts[local_idx], pixels))
            gt_rows.append(pmap.data[pixels[:, 0], pixels[:, 1], 0:3]
                           .astype(np.float64))
            meta.extend({"object": oid, "view": views[local_idx],
                         "pixel": (int(y), int(x))} for y, x in pixels)
        if not desc_rows:
            continue
        results.append(loc_acc(np.concatenate(desc_rows),
                               np.concatenate(gt_rows), d3d, field3d.centers,
                               k_list, WORLD_EDGE, meta=meta))
    return merge_loc_acc(results)


def localization_reference(model: AlignmentModel, dataset: Dataset, ids,
                           protocol: str, seed: int, resolution: int,
                           k_list=K_LIST_DEFAULT,
                           max_pixels: int = MAX_EVAL_PIXELS,
                           baseline_seed: int = 0) -> tuple:
    """(random-ranking baseline, nearest-token ceiling) on the same queries."""
    baseline_rng = np.random.default_rng(baseline_seed)
    base_rows, ceil_rows = [], []
    for oid in ids:
        record = dataset.records[oid]
        rng = eval_rng(seed, protocol, oid)
        views = protocol_views(protocol, len(record.cameras), rng)
        field3d = model.token_field(record)
        gt_rows = []
        for pmap in record.maps_at(resolution, views):
            pixels = sample_eval_pixels(pmap, rng, max_pixels,
                                        model.backbone.patch)
            if pixels.shape[0]:
                gt_rows.append(pmap.data[pixels[:, 0], pixels[:, 1], 0:3]
                               .astype(np.float64))
        if not gt_rows:
            continue
        gt = np.concatenate(gt_rows)
        weight = gt.shape[0]
        base_rows.append((random_token_baseline(gt, field3d.centers, k_list,
                                                WORLD_EDGE, baseline_rng), weight))
        ceil_rows.append((nearest_token_ceiling(gt, field3d.centers, k_list,
                                                WORLD_EDGE), weight))

    def pooled(rows):
        total = sum(w for _, w in rows)
        return {k: sum(s[k] * w for s, w in rows) / total for k in tuple(k_list)}

    return pooled(base_rows), pooled(ceil_rows)


def global_embeddings(model: AlignmentModel, dataset: Dataset, ids, protocol: str,
                      seed: int, resolution: int):
    """(2D descriptors, 3D descriptors, category labels) for the objects."""
    g2d, g3d, labels = [], [], []
    for oid in ids:
        record = dataset.records[oid]
        rng = eval_rng(seed, protocol, oid)
        views = protocol_views(protocol, len(record.cameras), rng)
        data = model.view_data(record, views, resolution)
        with no_grad():
            tokens = model.view_tokens(data)
            g2d.append(model.global_descriptor_2d(tokens).data[0].copy())
            h3d, _ = model.local_3d(model.token_field(record))
            g3d.append(model.global_descriptor_3d(h3d).data[0].copy())
        labels.append(record.instance.category_id)
    return np.stack(g2d), np.stack(g3d), np.asarray(labels)


def retrieval_protocol_eval(model: AlignmentModel, dataset: Dataset, ids,
                            protocol: str, seed: int, resolution: int,
                            k_list=K_LIST_DEFAULT) -> RetrievalResult:
    """Image-side descriptors queried against the 3D gallery of the same ids."""
    g2d, g3d, labels = global_embeddings(model, dataset, ids, protocol, seed,
                                         resolution)
    return retrieval_eval(g2d, labels, g3d, labels, k_list)


# ---------------------------------------------------------------------------
# query directions
# ---------------------------------------------------------------------------


@dataclass
class RankedTokens:
    indices: np.ndarray      # token ids, best match first
    sims: np.ndarray
    centers: np.ndarray      # (N, 3), aligned with indices


@dataclass
class RankedPixels:
    pixels: np.ndarray       # (P, 2) int (y, x), best match first
    views: np.ndarray        # (P,) view id per candidate
    sims: np.ndarray
    coords: np.ndarray       # (P, 3) ground-truth world coordinates


def _view_state(model: AlignmentModel, record: ObjectRecord, view_id: int,
                resolution: int):
    camera = record.cameras_at(resolution)[view_id]
    pmap = record.maps_at(resolution, [view_id])[0]
    grid = extract_patch_features(pmap, camera, model.backbone)
    context = compute_view_context(grid, model.backbone)
    return pmap, camera, context


def query_2d_to_3d(model: AlignmentModel, record: ObjectRecord, view_id: int,
                   pixel, resolution: int) -> RankedTokens:
    """Rank all 3D tokens against one foreground pixel's descriptor."""
    y, x = int(pixel[0]), int(pixel[1])
    pmap, camera, context = _view_state(model, record, view_id, resolution)
    if not (0 <= y < pmap.height and 0 <= x < pmap.width):
        raise QueryError(f"pixel ({y}, {x}) outside the image")
    if pmap.data[y, x, 3] != 1.0:
        raise QueryError(f"pixel ({y}, {x}) is background")
    desc = pixel_descriptors(model, pmap, camera, context, [(y, x)])[0]
    field3d, _, d3d = token_descriptors(model, record)
    sims = d3d @ desc
    order = _stable_order(sims[None, :])[0]
    return RankedTokens(indices=order, sims=sims[order],
                        centers=field3d.centers[order])


def query_3d_to_2d(model: AlignmentModel, record: ObjectRecord, token_index: int,
                   view_ids, resolution: int) -> RankedPixels:
    """Rank every usable pixel of the given views against one 3D token."""
    field3d, _, d3d = token_descriptors(model, record)
    if not 0 <= token_index < field3d.n_tokens:
        raise QueryError(f"token {token_index} out of range")
    target = d3d[token_index]
    pix_rows, view_rows, sim_rows, coord_rows = [], [], [], []
    for view_id in view_ids:
        pmap, camera, context = _view_state(model, record, view_id, resolution)
        pixels = np.argwhere(valid_window_mask(pmap, model.backbone.patch))
        if pixels.shape[0] == 0:
            continue
        desc = pixel_descriptors(model, pmap, camera, context, pixels)
        pix_rows.append(pixels)
        view_rows.append(np.full(pixels.shape[0], view_id, dtype=np.int32))
        sim_rows.append(desc @ target)
        coord_rows.append(pmap.data[pixels[:, 0], pixels[:, 1], 0:3]
                          .astype(np.float64))
    if not pix_rows:
        raise QueryError("no usable pixels in the requested views")
    sims = np.concatenate(sim_rows)
    order = _stable_order(sims[None, :])[0]
    return RankedPixels(pixels=np.concatenate(pix_rows)[order],
                        views=np.concatenate(view_rows)[order],
                        sims=sims[order],
                        coords=np.concatenate(coord_rows)[order])


def query_3d_to_3d(model: AlignmentModel, record: ObjectRecord, token_index: int,
                   other: ObjectRecord) -> RankedTokens:
    """Rank another instance's tokens against one token (cross-instance)."""
    field_a, _, d3d_a = token_descriptors(model, record)
    if not 0 <= token_index < field_a.n_tokens:
        raise QueryError(f"token {token_index} out of range")
    field_b, _, d3d_b = token_descriptors(model, other)
    sims = d3d_b @ d3d_a[token_index]
    order = _stable_order(sims[None, :])[0]
    return RankedTokens(indices=order, sims=sims[order],
                        centers=field_b.centers[order])
