"""Part-transfer pipeline stages against independent oracles."""

import numpy as np
import pytest

from pixpoint.dataset import DatasetConfig, build_dataset
from pixpoint.model import AlignmentModel, ModelConfig
from pixpoint.parttransfer import (
    MatchSet, PartMask2D, Region3D, TransferError, TransferThresholds,
    activate_patches, dbscan, dominant_cluster, face_iou, faces_within,
    flood_fill, match_and_filter, part_faces, part_footprint, select_mask,
    transfer, validate_external_mask,
)
from pixpoint.shapes import build_templates, instantiate

TINY_MODEL = ModelConfig(seed=11, f2d=24, dc=8, dt=8, dsh=16, dloc=8, dg=8,
                         dvae=8, vae_hidden=16, n3d=24, k_neighbors=8,
                         m_max=24)
TINY_RADIUS = 2.0


@pytest.fixture(scope="module")
def tiny_dataset():
    config = DatasetConfig(seed=77, n_train_per_category=2,
                           n_heldout_per_category=1, n_points=512,
                           n_random_views=2, resolution=32,
                           splat_radius_px=TINY_RADIUS)
    return build_dataset(config, templates=build_templates()[:2])


@pytest.fixture(scope="module")
def tiny_model():
    return AlignmentModel(TINY_MODEL)


def _record(ds, idx=0):
    return ds.records[ds.train_ids[idx]]


# ---------------------------------------------------------------------------
# mask selection
# ---------------------------------------------------------------------------


def test_select_mask_is_the_clicked_parts_footprint(tiny_dataset):
    record = _record(tiny_dataset)
    pmap, camera = record.maps[0], record.cameras[0]
    fg = np.argwhere(pmap.alpha == 1.0)
    y, x = int(fg[len(fg) // 2][0]), int(fg[len(fg) // 2][1])
    mask = select_mask(record.instance, camera, pmap, (y, x), TINY_RADIUS)
    assert mask.mask[y, x]
    assert not np.any(mask.mask & (pmap.alpha != 1.0))
    assert mask.part_label in record.instance.point_label
    fp = part_footprint(record.instance, camera, mask.part_label, TINY_RADIUS)
    assert np.array_equal(mask.mask, fp)


def test_select_mask_prefers_smallest_containing_footprint(tiny_dataset):
    """Wherever several part footprints overlap, the smallest one wins."""
    record = _record(tiny_dataset)
    pmap, camera = record.maps[0], record.cameras[0]
    instance = record.instance
    labels = np.unique(instance.point_label)
    prints = {int(l): part_footprint(instance, camera, int(l), TINY_RADIUS)
              for l in labels}
    sizes = {l: int(fp.sum()) for l, fp in prints.items()}
    stack = np.stack([prints[int(l)] for l in labels])
    overlap = np.argwhere(stack.sum(axis=0) >= 2)
    checked = 0
    for y, x in overlap[:10]:
        if pmap.labels[y, x] < 0:
            continue
        mask = select_mask(instance, camera, pmap, (int(y), int(x)),
                           TINY_RADIUS)
        containing = [(sizes[int(l)], int(l)) for l in labels
                      if prints[int(l)][y, x]]
        assert (sizes[mask.part_label], mask.part_label) == min(containing)
        checked += 1
    assert checked > 0


def test_select_mask_rejects_background_and_out_of_bounds(tiny_dataset):
    record = _record(tiny_dataset)
    pmap, camera = record.maps[0], record.cameras[0]
    bg = np.argwhere(pmap.alpha == 0.0)[0]
    with pytest.raises(TransferError):
        select_mask(record.instance, camera, pmap,
                    (int(bg[0]), int(bg[1])), TINY_RADIUS)
    with pytest.raises(TransferError):
        select_mask(record.instance, camera, pmap, (-3, 0), TINY_RADIUS)


def test_external_mask_seam(tiny_dataset):
    record = _record(tiny_dataset)
    pmap = record.maps[0]
    fg = np.argwhere(pmap.alpha == 1.0)
    y, x = int(fg[0][0]), int(fg[0][1])
    good = pmap.alpha == 1.0
    adapted = validate_external_mask(good, pmap, (y, x), view_index=0)
    assert adapted.part_label == -1 and adapted.mask[y, x]

    with pytest.raises(TransferError):           # click outside the mask
        bad_click = np.argwhere(~good)[0]
        validate_external_mask(good, pmap,
                               (int(bad_click[0]), int(bad_click[1])), 0)
    with pytest.raises(TransferError):           # mask spilling onto background
        validate_external_mask(np.ones_like(good), pmap, (y, x), 0)
    with pytest.raises(TransferError):           # wrong shape
        validate_external_mask(good[:-1], pmap, (y, x), 0)


# ---------------------------------------------------------------------------
# patch activation
# ---------------------------------------------------------------------------


def test_activate_patches_thresholds():
    mask = np.zeros((16, 16), dtype=bool)
    mask[0:4, 0:4] = True              # cell (0,0) fully covered
    mask[0, 4:6] = True                # cell (0,1): 2/16 = 12.5%
    active = activate_patches(mask, patch=4, coverage_frac=0.3)
    assert active.shape == (4, 4)
    assert active[0, 0] and not active[0, 1]
    assert activate_patches(mask, 4, 0.125)[0, 1]
    assert not activate_patches(mask, 4, 0.126)[0, 1]


def test_activate_patches_monotone_in_threshold():
    rng = np.random.default_rng(4)
    mask = rng.random((32, 32)) < 0.4
    prev = None
    for frac in (0.05, 0.2, 0.5, 0.8, 1.0):
        act = activate_patches(mask, 8, frac)
        if prev is not None:
            assert np.all(act <= prev)
        prev = act
    full = np.ones((32, 32), dtype=bool)
    assert activate_patches(full, 8, 1.0).all()
    with pytest.raises(ValueError):
        activate_patches(mask, 8, 0.0)
    with pytest.raises(ValueError):
        activate_patches(mask[:, :30], 8, 0.5)


def test_activate_patches_matches_blockwise_oracle():
    rng = np.random.default_rng(7)
    mask = rng.random((24, 24)) < 0.5
    act = activate_patches(mask, 8, 0.4)
    for u in range(3):
        for v in range(3):
            frac = mask[u * 8:(u + 1) * 8, v * 8:(v + 1) * 8].mean()
            assert act[u, v] == (frac >= 0.4)


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------


def test_match_and_filter_dedup_rule():
    d3 = np.eye(3)
    queries = np.array([
        [0.9, 0.1, 0.0],
        [0.7, 0.2, 0.0],    # same best token 0, weaker
        [0.0, 0.0, 0.8],
    ])
    ms = match_and_filter(queries, d3, sim_min=0.5)
    assert ms.tokens.tolist() == [0, 2]
    assert ms.sims == pytest.approx([0.9, 0.8])
    assert ms.patches.tolist() == [0, 2]
    assert not ms.empty


def test_match_and_filter_no_confidence_signal():
    d3 = np.eye(2)
    queries = np.array([[0.3, 0.1], [0.2, 0.4]])
    ms = match_and_filter(queries, d3, sim_min=0.5)
    assert ms.empty and ms.tokens.size == 0
    empty_in = match_and_filter(np.zeros((0, 2)), d3, sim_min=0.5)
    assert empty_in.empty


def test_match_and_filter_tie_breaks():
    d3 = np.eye(2)
    # Query 0's best similarity ties across both tokens -> token 0 (first max).
    # Queries 1 and 2 tie on token 1 -> patch 1 (earlier row) kept.
    queries = np.array([[0.8, 0.8], [0.1, 0.9], [0.0, 0.9]])
    ms = match_and_filter(queries, d3, sim_min=0.5)
    assert ms.tokens.tolist() == [0, 1]
    assert ms.patches.tolist() == [0, 1]


def test_match_and_filter_matches_brute_force():
    rng = np.random.default_rng(12)
    q = rng.normal(size=(50, 8))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    g = rng.normal(size=(30, 8))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    sim_min = 0.2
    ms = match_and_filter(q, g, sim_min)
    sims = q @ g.T
    expected = {}
    for row in range(50):
        tok = int(np.argmax(sims[row]))
        s = sims[row, tok]
        if tok not in expected or s > expected[tok][0]:
            expected[tok] = (s, row)
    kept = sorted((t, s, r) for t, (s, r) in expected.items() if s >= sim_min)
    assert ms.tokens.tolist() == [t for t, _, _ in kept]
    assert ms.patches.tolist() == [r for _, _, r in kept]
    np.testing.assert_allclose(ms.sims, [s for _, s, _ in kept])
    assert np.all(ms.sims >= -1.0 - 1e-12) and np.all(ms.sims <= 1.0 + 1e-12)
    assert len(set(ms.tokens.tolist())) == ms.tokens.size


# ---------------------------------------------------------------------------
# dbscan
# ---------------------------------------------------------------------------


def test_dbscan_closed_forms():
    tight = np.array([[0.0, 0, 0], [0.01, 0, 0], [0.0, 0.01, 0]])
    assert dbscan(tight, eps=0.08, min_pts=1).tolist() == [0, 0, 0]

    lonely = np.array([[0.0, 0, 0], [5.0, 0, 0]])
    assert dbscan(lonely, eps=0.08, min_pts=2).tolist() == [-1, -1]

    two = np.concatenate([tight, tight + np.array([3.0, 0, 0]),
                          tight + np.array([3.0, 0, 0.02])])
    labels = dbscan(two, eps=0.08, min_pts=3)
    assert labels.tolist() == [0, 0, 0, 1, 1, 1, 1, 1, 1]
    assert dominant_cluster(labels) == 1
    assert dominant_cluster(np.array([-1, -1])) is None
    assert dominant_cluster(np.array([0, 0, 1, 1])) == 0   # tie -> lowest


def _dbscan_oracle_check(points, labels, eps, min_pts):
    """Order-free density-reachability properties every labeling must obey."""
    n = len(points)
    d = np.sqrt(((points[:, None] - points[None]) ** 2).sum(2))
    neigh = [np.flatnonzero(d[i] <= eps) for i in range(n)]
    core = np.array([len(neigh[i]) >= min_pts for i in range(n)])

    # Core-point components via union-find over the eps-graph of cores.
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        if not core[i]:
            continue
        for j in neigh[i]:
            if core[j]:
                parent[find(int(j))] = find(i)
    for i in range(n):
        if core[i]:
            assert labels[i] >= 0
            for j in neigh[i]:
                if core[j]:
                    assert labels[i] == labels[j]   # same density component
        elif labels[i] >= 0:                         # border point
            owners = {labels[j] for j in neigh[i] if core[j]}
            assert labels[i] in owners
        else:                                        # noise
            assert not any(core[j] for j in neigh[i])
    # distinct core components get distinct labels
    roots = {find(i) for i in range(n) if core[i]}
    assert len({labels[find(i)] for i in range(n) if core[i]}) == len(roots)


@pytest.mark.parametrize("eps,min_pts", [(0.08, 3), (0.15, 2), (0.05, 4)])
def test_dbscan_matches_reachability_oracle(eps, min_pts):
    rng = np.random.default_rng(99)
    blobs = [rng.normal(c, 0.03, size=(rng.integers(5, 30), 3))
             for c in ([0, 0, 0], [0.5, 0.5, 0], [0.1, 0.9, 0.4])]
    noise = rng.uniform(-1, 2, size=(15, 3))
    points = np.concatenate(blobs + [noise])
    labels = dbscan(points, eps, min_pts)
    _dbscan_oracle_check(points, labels, eps, min_pts)
    again = dbscan(points, eps, min_pts)
    assert np.array_equal(labels, again)


# ---------------------------------------------------------------------------
# flood fill
# ---------------------------------------------------------------------------


def _chain_adjacency(n):
    indptr = [0]
    indices = []
    for i in range(n):
        ns = [j for j in (i - 1, i + 1) if 0 <= j < n]
        indices.extend(ns)
        indptr.append(len(indices))
    return np.array(indptr, dtype=np.int32), np.array(indices, dtype=np.int32)


def test_flood_fill_fills_a_strip():
    indptr, indices = _chain_adjacency(10)
    faces, comp = flood_fill([4], indptr, indices, np.ones(10, dtype=bool))
    assert faces.tolist() == list(range(10))
    assert np.all(comp >= 0)


def test_flood_fill_keeps_larger_island():
    indptr, indices = _chain_adjacency(10)
    allowed = np.ones(10, dtype=bool)
    allowed[3] = False                      # split: {0,1,2} and {4..9}
    faces, _ = flood_fill([1, 7], indptr, indices, allowed)
    assert faces.tolist() == [4, 5, 6, 7, 8, 9]

    # Equal sizes: the component of the earliest seed wins.
    allowed = np.ones(10, dtype=bool)
    allowed[4:6] = False                    # {0..3} and {6..9}
    faces, _ = flood_fill([7, 2], indptr, indices, allowed)
    assert faces.tolist() == [6, 7, 8, 9]

    none, comp = flood_fill([3], indptr, indices, ~np.ones(10, dtype=bool))
    assert none is None and comp is None


def _union_find_components(n, indptr, indices, allowed):
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        if not allowed[i]:
            continue
        for j in indices[indptr[i]:indptr[i + 1]]:
            if allowed[j]:
                parent[find(int(j))] = find(i)
    return find


def test_flood_fill_matches_union_find_oracle(tiny_dataset):
    instance = _record(tiny_dataset).instance
    n = len(instance.faces)
    rng = np.random.default_rng(17)
    for trial in range(5):
        allowed = rng.random(n) < 0.6
        seeds = rng.choice(n, size=8, replace=False)
        faces, _ = flood_fill(seeds, instance.adj_indptr,
                              instance.adj_indices, allowed)
        find = _union_find_components(n, instance.adj_indptr,
                                      instance.adj_indices, allowed)
        seed_roots = []
        for s in seeds:
            if allowed[s] and find(int(s)) not in seed_roots:
                seed_roots.append(find(int(s)))
        if not seed_roots:
            assert faces is None
            continue
        comps = [np.flatnonzero([allowed[i] and find(i) == r
                                 for i in range(n)]) for r in seed_roots]
        best = max(comps, key=lambda c: (len(c), -min(c)))
        # oracle tie-break: earliest seed == component with that seed's root;
        # sizes differing makes the comparison unambiguous in these trials
        sizes = sorted((len(c) for c in comps), reverse=True)
        if len(sizes) > 1 and sizes[0] == sizes[1]:
            continue
        assert faces.tolist() == sorted(best.tolist())


def test_region_is_single_component(tiny_dataset, tiny_model):
    record = _record(tiny_dataset)
    thresholds = TransferThresholds(sim_min=-1.0, eps=10.0, min_pts=1,
                                    seed_radius=10.0, flood_radius=10.0)
    pmap = record.maps[0]
    fg = np.argwhere(pmap.alpha == 1.0)
    res = transfer(tiny_model, record, 0, (int(fg[0][0]), int(fg[0][1])),
                   thresholds, splat_radius_px=TINY_RADIUS)
    assert res.region is not None
    instance = record.instance
    allowed = np.zeros(len(instance.faces), dtype=bool)
    allowed[res.region.faces] = True
    find = _union_find_components(len(instance.faces), instance.adj_indptr,
                                  instance.adj_indices, allowed)
    roots = {find(int(f)) for f in res.region.faces}
    assert len(roots) == 1


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------


def test_transfer_permissive_thresholds_cover_sphere(tiny_model):
    """With every gate wide open the flooded region is the whole mesh for a
    single-part, connected object."""
    from pixpoint.dataset import ObjectRecord
    from pixpoint.render import axis_cameras, render_view
    from pixpoint.shapes import PartSpec, ShapeTemplate

    ball = ShapeTemplate(category_id=0, name="ball", parts=[
        PartSpec(primitive="sphere", part_label=0, semantic=0,
                 center=(0.0, 0.0, 0.0), size_lo=(0.4, 0.4, 0.4),
                 size_hi=(0.4, 0.4, 0.4)),
    ])
    instance = instantiate(ball, np.random.SeedSequence(3), n_points=512,
                           object_id=0)
    cams = axis_cameras(32, 32)
    maps = [render_view(instance, c, TINY_RADIUS) for c in cams]
    sphere = ObjectRecord(instance, cams, maps, "train")

    thresholds = TransferThresholds(sim_min=-1.0, eps=10.0, min_pts=1,
                                    seed_radius=10.0, flood_radius=10.0)
    pmap = sphere.maps[0]
    fg = np.argwhere(pmap.alpha == 1.0)
    res = transfer(tiny_model, sphere, 0, (int(fg[0][0]), int(fg[0][1])),
                   thresholds, splat_radius_px=TINY_RADIUS)
    assert res.failed_stage is None
    assert res.region.faces.size == len(sphere.instance.faces)
    assert face_iou(res.region, sphere.instance, 0) == 1.0


def test_transfer_no_confidence_is_a_signal_not_an_error(tiny_dataset,
                                                         tiny_model):
    record = _record(tiny_dataset)
    pmap = record.maps[0]
    fg = np.argwhere(pmap.alpha == 1.0)
    click = (int(fg[0][0]), int(fg[0][1]))
    strict = TransferThresholds(sim_min=1.5)      # nothing can pass
    res = transfer(tiny_model, record, 0, click, strict,
                   splat_radius_px=TINY_RADIUS)
    assert res.region is None and res.failed_stage == "match"
    assert res.matches.empty
    assert res.diagnostics["matched_tokens"] == 0

    with pytest.raises(TransferError):
        bg = np.argwhere(pmap.alpha == 0.0)[0]
        transfer(tiny_model, record, 0, (int(bg[0]), int(bg[1])),
                 splat_radius_px=TINY_RADIUS)


def test_transfer_deterministic_and_monotone(tiny_dataset, tiny_model):
    record = _record(tiny_dataset)
    pmap = record.maps[0]
    fg = np.argwhere(pmap.alpha == 1.0)
    click = (int(fg[len(fg) // 3][0]), int(fg[len(fg) // 3][1]))
    loose = TransferThresholds(sim_min=-1.0, eps=1.0, min_pts=1)
    res_a = transfer(tiny_model, record, 0, click, loose,
                     splat_radius_px=TINY_RADIUS)
    res_b = transfer(tiny_model, record, 0, click, loose,
                     splat_radius_px=TINY_RADIUS)
    assert np.array_equal(res_a.matches.tokens, res_b.matches.tokens)
    if res_a.region is not None:
        assert np.array_equal(res_a.region.faces, res_b.region.faces)
    assert res_a.diagnostics == res_b.diagnostics

    tighter = transfer(tiny_model, record, 0, click,
                       TransferThresholds(sim_min=0.2, eps=1.0, min_pts=1),
                       splat_radius_px=TINY_RADIUS)
    assert set(tighter.matches.tokens.tolist()) <= \
        set(res_a.matches.tokens.tolist())

    # external mask reproduces the internal GT mask's result
    gt = select_mask(record.instance, record.cameras[0], pmap, click,
                     TINY_RADIUS)
    ext = transfer(tiny_model, record, 0, click, loose,
                   external_mask=gt.mask, splat_radius_px=TINY_RADIUS)
    assert np.array_equal(ext.matches.tokens, res_a.matches.tokens)


def test_part_faces_and_iou(tiny_dataset):
    instance = _record(tiny_dataset).instance
    labels = np.unique(instance.face_label)
    total = sum(part_faces(instance, int(l)).size for l in labels)
    assert total == len(instance.faces)
    region = Region3D(faces=part_faces(instance, int(labels[0])),
                      seed_faces=np.zeros(0, dtype=np.int64), cluster_label=0)
    assert face_iou(region, instance, int(labels[0])) == 1.0
    if len(labels) > 1:
        assert face_iou(region, instance, int(labels[1])) == 0.0


def test_faces_within_radius(tiny_dataset):
    instance = _record(tiny_dataset).instance
    centroids = instance.face_centroids()
    center = centroids[5][None, :]
    near = faces_within(instance, center, radius=0.05)
    assert near[5]
    d = np.linalg.norm(centroids - center, axis=1)
    assert np.array_equal(near, d <= 0.05)
    assert faces_within(instance, center, radius=10.0).all()
