"""Procedural multi-part objects: primitives, category templates, sampling.

Every object is assembled from posed primitives (box, sphere, cylinder, cone,
plus a C-shaped prism used for mug handles), merged into one triangle mesh
with per-face part labels, normalized to the unit cube (longest bbox edge
becomes 1), and sampled into an oriented point cloud.

Faces remember the analytic surface they came from (`face_kind` + a geometry
record), so sampled normals are exact for curved primitives rather than
per-triangle constants.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

# face provenance kinds
FLAT = 0
SPHERE = 1
CYL_SIDE = 2
CONE_SIDE = 3

GEOM_COLS = 8  # [cx, cy, cz, ax, ay, az, radius, height]

MIN_SIZE = 1e-4
MAX_SIZE_RETRIES = 8


class DegenerateShapeError(RuntimeError):
    """Size draws kept producing a degenerate (near-zero-volume) primitive."""


class ZeroAreaMeshError(RuntimeError):
    """Surface sampling requires at least one face with positive area."""


# ---------------------------------------------------------------------------
# primitive meshes (canonical frame, centered at the origin)
# ---------------------------------------------------------------------------


def _orient_convex(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Flip triangle winding so normals point away from the origin
    (valid for convex primitives containing the origin)."""
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    n = np.cross(v1 - v0, v2 - v0)
    centroid = (v0 + v1 + v2) / 3.0
    flip = np.einsum("ij,ij->i", n, centroid) < 0
    out = faces.copy()
    out[flip] = out[flip][:, [0, 2, 1]]
    return out


def box_mesh(sx: float, sy: float, sz: float, subdiv: int = 2):
    """Axis-aligned box with each side split into subdiv×subdiv quads."""
    half = np.array([sx, sy, sz]) / 2.0
    vert_ids: dict[tuple, int] = {}
    verts: list[np.ndarray] = []

    def vid(i: int, j: int, k: int) -> int:
        key = (i, j, k)
        if key not in vert_ids:
            vert_ids[key] = len(verts)
            verts.append((np.array([i, j, k]) / subdiv * 2.0 - 1.0) * half)
        return vert_ids[key]

    faces = []
    n = subdiv
    for axis in range(3):
        for side in (0, n):
            for a in range(n):
                for b in range(n):
                    corners = []
                    for da, db in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        coord = [0, 0, 0]
                        coord[axis] = side
                        coord[(axis + 1) % 3] = a + da
                        coord[(axis + 2) % 3] = b + db
                        corners.append(vid(*coord))
                    faces.append([corners[0], corners[1], corners[2]])
                    faces.append([corners[0], corners[2], corners[3]])
    v = np.array(verts)
    f = _orient_convex(v, np.array(faces, dtype=np.int32))
    return v, f, np.full(len(f), FLAT, dtype=np.int32)


def sphere_mesh(r: float, stacks: int = 12, sectors: int = 16):
    verts = [np.array([0.0, 0.0, r])]
    for i in range(1, stacks):
        phi = math.pi * i / stacks
        z = r * math.cos(phi)
        rr = r * math.sin(phi)
        for j in range(sectors):
            th = 2.0 * math.pi * j / sectors
            verts.append(np.array([rr * math.cos(th), rr * math.sin(th), z]))
    verts.append(np.array([0.0, 0.0, -r]))
    bottom = len(verts) - 1

    def ring(i: int, j: int) -> int:
        return 1 + (i - 1) * sectors + (j % sectors)

    faces = []
    for j in range(sectors):
        faces.append([0, ring(1, j), ring(1, j + 1)])
        faces.append([bottom, ring(stacks - 1, j + 1), ring(stacks - 1, j)])
    for i in range(1, stacks - 1):
        for j in range(sectors):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append([a, b, d])
            faces.append([a, d, c])
    v = np.array(verts)
    f = _orient_convex(v, np.array(faces, dtype=np.int32))
    return v, f, np.full(len(f), SPHERE, dtype=np.int32)


def cylinder_mesh(r: float, h: float, sectors: int = 24, bands: int = 2):
    verts = []
    for i in range(bands + 1):
        z = -h / 2.0 + h * i / bands
        for j in range(sectors):
            th = 2.0 * math.pi * j / sectors
            verts.append(np.array([r * math.cos(th), r * math.sin(th), z]))
    lo_center = len(verts)
    verts.append(np.array([0.0, 0.0, -h / 2.0]))
    hi_center = len(verts)
    verts.append(np.array([0.0, 0.0, h / 2.0]))

    def ring(i: int, j: int) -> int:
        return i * sectors + (j % sectors)

    faces, kinds = [], []
    for i in range(bands):
        for j in range(sectors):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces += [[a, b, d], [a, d, c]]
            kinds += [CYL_SIDE, CYL_SIDE]
    for j in range(sectors):
        faces.append([lo_center, ring(0, j + 1), ring(0, j)])
        kinds.append(FLAT)
        faces.append([hi_center, ring(bands, j), ring(bands, j + 1)])
        kinds.append(FLAT)
    v = np.array(verts)
    f = _orient_convex(v, np.array(faces, dtype=np.int32))
    return v, f, np.array(kinds, dtype=np.int32)


def cone_mesh(r: float, h: float, sectors: int = 24, bands: int = 3):
    """Cone with base at z=-h/2 and apex at z=+h/2, side split into bands."""
    verts = []
    for i in range(bands):
        z = -h / 2.0 + h * i / bands
        rr = r * (1.0 - i / bands)
        for j in range(sectors):
            th = 2.0 * math.pi * j / sectors
            verts.append(np.array([rr * math.cos(th), rr * math.sin(th), z]))
    apex = len(verts)
    verts.append(np.array([0.0, 0.0, h / 2.0]))
    base_center = len(verts)
    verts.append(np.array([0.0, 0.0, -h / 2.0]))

    def ring(i: int, j: int) -> int:
        return i * sectors + (j % sectors)

    faces, kinds = [], []
    for i in range(bands - 1):
        for j in range(sectors):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces += [[a, b, d], [a, d, c]]
            kinds += [CONE_SIDE, CONE_SIDE]
    for j in range(sectors):
        faces.append([ring(bands - 1, j), ring(bands - 1, j + 1), apex])
        kinds.append(CONE_SIDE)
        faces.append([base_center, ring(0, j + 1), ring(0, j)])
        kinds.append(FLAT)
    v = np.array(verts)
    f = _orient_convex(v, np.array(faces, dtype=np.int32))
    return v, f, np.array(kinds, dtype=np.int32)


def c_prism_mesh(w: float, depth: float, h: float, t: float | None = None):
    """C-shaped prism (a squared-off torus segment): the mug-handle part.

    The profile lives in the xz plane and is extruded along y.  All three
    bars share boundary vertices, so the part is a single welded component.
    """
    if t is None:
        t = 0.3 * min(w, h)
    # profile boundary, counter-clockwise, opening toward -x
    profile = np.array([
        [0.0, 0.0], [w, 0.0], [w, h], [0.0, h],
        [0.0, h - t], [w - t, h - t], [w - t, t], [0.0, t],
    ])
    profile -= [w / 2.0, h / 2.0]
    # outward normal of each boundary edge i -> i+1, in the xz plane
    edge_out = np.array([
        [0.0, -1.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0],
        [0.0, -1.0], [-1.0, 0.0], [0.0, 1.0], [-1.0, 0.0],
    ])
    cap_tris = [(0, 1, 6), (0, 6, 7), (6, 1, 2), (6, 2, 5), (4, 5, 2), (4, 2, 3)]

    verts = []
    for y in (-depth / 2.0, depth / 2.0):
        for px, pz in profile:
            verts.append(np.array([px, y, pz]))
    verts = np.array(verts)
    faces = []
    targets = []  # desired outward normal per face, for winding fixup
    for j, (a, b, c) in enumerate(cap_tris):
        faces.append([a, b, c])
        targets.append(np.array([0.0, -1.0, 0.0]))
        faces.append([8 + a, 8 + b, 8 + c])
        targets.append(np.array([0.0, 1.0, 0.0]))
    for e in range(8):
        a, b = e, (e + 1) % 8
        n3 = np.array([edge_out[e][0], 0.0, edge_out[e][1]])
        faces += [[a, b, 8 + b], [a, 8 + b, 8 + a]]
        targets += [n3, n3]
    faces = np.array(faces, dtype=np.int32)
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    n = np.cross(v1 - v0, v2 - v0)
    flip = np.einsum("ij,ij->i", n, np.array(targets)) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return verts, faces, np.full(len(faces), FLAT, dtype=np.int32)


# ---------------------------------------------------------------------------
# templates
# ---------------------------------------------------------------------------


@dataclass
class PartSpec:
    primitive: str                 # box | sphere | cylinder | cone | c_prism
    part_label: int
    semantic: int                  # category-local semantic slot (legs share one)
    center: tuple[float, float, float]
    size_lo: tuple[float, float, float]
    size_hi: tuple[float, float, float]
    size_group: int = -1           # parts with the same group share a size draw
    rotation: np.ndarray | None = None


@dataclass
class ShapeTemplate:
    category_id: int
    name: str
    parts: list[PartSpec]
    semantic_names: tuple[str, ...] = ()

    def validate(self) -> None:
        if not self.parts:
            raise ValueError("template needs at least one part")
        labels = [p.part_label for p in self.parts]
        if sorted(labels) != list(range(len(self.parts))):
            raise ValueError("part labels must be 0..P-1")
        for p in self.parts:
            for lo, hi in zip(p.size_lo, p.size_hi):
                if lo > hi:
                    raise ValueError("size range min > max")


def _legs(primitive: str, label0: int, semantic: int, positions, lo, hi):
    # Each leg draws its own size: repeated parts differ slightly in radius and
    # height, so their local geometry stays distinguishable.
    return [
        PartSpec(primitive, label0 + i, semantic, pos, lo, hi)
        for i, pos in enumerate(positions)
    ]


def build_templates() -> list[ShapeTemplate]:
    """The eight built-in categories."""
    leg4 = [(0.28, 0.22, -0.28), (-0.28, 0.22, -0.28), (0.28, -0.22, -0.28), (-0.28, -0.22, -0.28)]
    t_leg4 = [(0.38, 0.24, -0.06), (-0.38, 0.24, -0.06), (0.38, -0.24, -0.06), (-0.38, -0.24, -0.06)]
    s_leg3 = [(0.0, 0.20, -0.10), (-0.173, -0.10, -0.10), (0.173, -0.10, -0.10)]

    templates = [
        ShapeTemplate(0, "chair", [
            PartSpec("box", 0, 0, (0, 0, 0), (0.70, 0.60, 0.08), (0.90, 0.80, 0.14)),
            PartSpec("box", 1, 1, (0, -0.36, 0.33), (0.64, 0.06, 0.55), (0.84, 0.10, 0.70)),
            *_legs("cylinder", 2, 2, leg4, (0.032, 0.42, 0.0), (0.058, 0.58, 0.0)),
        ], ("seat", "back", "leg")),
        ShapeTemplate(1, "table", [
            PartSpec("box", 0, 0, (0, 0, 0.25), (0.90, 0.60, 0.06), (1.10, 0.80, 0.10)),
            *_legs("cylinder", 1, 1, t_leg4, (0.030, 0.50, 0.0), (0.055, 0.62, 0.0)),
        ], ("top", "leg")),
        ShapeTemplate(2, "stool", [
            PartSpec("cylinder", 0, 0, (0, 0, 0.22), (0.26, 0.06, 0.0), (0.34, 0.10, 0.0)),
            *_legs("cylinder", 1, 1, s_leg3, (0.030, 0.48, 0.0), (0.055, 0.60, 0.0)),
        ], ("seat", "leg")),
        ShapeTemplate(3, "mug", [
            PartSpec("cylinder", 0, 0, (0, 0, 0), (0.26, 0.55, 0.0), (0.33, 0.70, 0.0)),
            PartSpec("c_prism", 1, 1, (0.40, 0, 0.02), (0.16, 0.06, 0.30), (0.22, 0.09, 0.40)),
        ], ("body", "handle")),
        ShapeTemplate(4, "lamp", [
            PartSpec("cylinder", 0, 0, (0, 0, -0.40), (0.22, 0.06, 0.0), (0.30, 0.10, 0.0)),
            PartSpec("cylinder", 1, 1, (0, 0, -0.05), (0.025, 0.60, 0.0), (0.040, 0.72, 0.0)),
            PartSpec("cone", 2, 2, (0, 0, 0.38), (0.20, 0.22, 0.0), (0.30, 0.30, 0.0)),
        ], ("base", "pole", "shade")),
        ShapeTemplate(5, "bottle", [
            PartSpec("cylinder", 0, 0, (0, 0, -0.10), (0.16, 0.55, 0.0), (0.22, 0.70, 0.0)),
            PartSpec("cylinder", 1, 1, (0, 0, 0.32), (0.05, 0.18, 0.0), (0.08, 0.26, 0.0)),
            PartSpec("sphere", 2, 2, (0, 0, 0.47), (0.06, 0.0, 0.0), (0.09, 0.0, 0.0)),
        ], ("body", "neck", "cap")),
        ShapeTemplate(6, "plane", [
            PartSpec("box", 0, 0, (0, 0, 0), (0.90, 0.14, 0.14), (1.10, 0.20, 0.20)),
            PartSpec("box", 1, 1, (0.05, 0.26, 0.02), (0.22, 0.44, 0.04), (0.30, 0.56, 0.07)),
            PartSpec("box", 2, 1, (0.05, -0.26, 0.02), (0.22, 0.44, 0.04), (0.30, 0.56, 0.07)),
            PartSpec("box", 3, 2, (-0.45, 0, 0.15), (0.16, 0.05, 0.20), (0.22, 0.08, 0.30)),
        ], ("fuselage", "wing", "tail")),
        ShapeTemplate(7, "tree", [
            PartSpec("cylinder", 0, 0, (0, 0, -0.32), (0.05, 0.28, 0.0), (0.09, 0.40, 0.0)),
            PartSpec("cone", 1, 1, (0, 0, 0.10), (0.30, 0.50, 0.0), (0.40, 0.65, 0.0)),
        ], ("trunk", "canopy")),
    ]
    for t in templates:
        t.validate()
    return templates


# ---------------------------------------------------------------------------
# object instances
# ---------------------------------------------------------------------------


@dataclass
class ObjectInstance:
    object_id: int
    category_id: int
    points: np.ndarray        # (N, 6) float32: xyz in [0,1]^3 + unit normal
    point_label: np.ndarray   # (N,) int32 part label
    point_face: np.ndarray    # (N,) int32 source face
    vertices: np.ndarray      # (V, 3) float32
    faces: np.ndarray         # (F, 3) int32
    face_label: np.ndarray    # (F,) int32
    face_kind: np.ndarray     # (F,) int32
    face_geom: np.ndarray     # (F,) int32 row into geom arrays
    geom_kind: np.ndarray     # (P,) int32
    geom_params: np.ndarray   # (P, GEOM_COLS) float32
    adj_indptr: np.ndarray    # (F+1,) int32 CSR over shared-edge neighbors
    adj_indices: np.ndarray   # int32
    sem_of_label: np.ndarray  # (P,) int32 part label -> semantic slot
    bbox_edge: float = 1.0

    def face_neighbors(self, f: int) -> np.ndarray:
        return self.adj_indices[self.adj_indptr[f]:self.adj_indptr[f + 1]]

    def face_centroids(self) -> np.ndarray:
        v = self.vertices.astype(np.float64)
        return v[self.faces].mean(axis=1)


def _primitive_mesh(primitive: str, size: np.ndarray):
    if primitive == "box":
        return box_mesh(size[0], size[1], size[2])
    if primitive == "sphere":
        return sphere_mesh(size[0])
    if primitive == "cylinder":
        return cylinder_mesh(size[0], size[1])
    if primitive == "cone":
        return cone_mesh(size[0], size[1])
    if primitive == "c_prism":
        return c_prism_mesh(size[0], size[1], size[2])
    raise ValueError(f"unknown primitive '{primitive}'")


_USED_COMPONENTS = {"box": 3, "sphere": 1, "cylinder": 2, "cone": 2, "c_prism": 3}


def _geom_record(primitive: str, size: np.ndarray, rot: np.ndarray, center: np.ndarray):
    params = np.zeros(GEOM_COLS)
    if primitive == "sphere":
        params[0:3] = center
        params[6] = size[0]
        return SPHERE, params
    if primitive in ("cylinder", "cone"):
        axis = rot @ np.array([0.0, 0.0, 1.0])
        base = center + rot @ np.array([0.0, 0.0, -size[1] / 2.0])
        params[0:3] = base
        params[3:6] = axis
        params[6] = size[0]
        params[7] = size[1]
        return CYL_SIDE if primitive == "cylinder" else CONE_SIDE, params
    return FLAT, params


def build_face_adjacency(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """CSR adjacency: faces are neighbors iff they share an (undirected) edge."""
    edge_faces: dict[tuple[int, int], list[int]] = {}
    for fi, (a, b, c) in enumerate(faces):
        for u, v in ((a, b), (b, c), (c, a)):
            key = (u, v) if u < v else (v, u)
            edge_faces.setdefault(key, []).append(fi)
    neighbors: list[set[int]] = [set() for _ in range(len(faces))]
    for flist in edge_faces.values():
        for i in flist:
            for j in flist:
                if i != j:
                    neighbors[i].add(j)
    indptr = np.zeros(len(faces) + 1, dtype=np.int32)
    chunks = []
    for fi, ns in enumerate(neighbors):
        ordered = np.array(sorted(ns), dtype=np.int32)
        chunks.append(ordered)
        indptr[fi + 1] = indptr[fi] + len(ordered)
    indices = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int32)
    return indptr, indices.astype(np.int32)


def _sample_on_faces(vertices: np.ndarray, faces: np.ndarray, face_kind: np.ndarray,
                     face_geom: np.ndarray, geom_kind: np.ndarray, geom_params: np.ndarray,
                     n_points: int, rng: np.random.Generator):
    """Area-proportional surface sampling with analytic normals."""
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    cross = np.cross(v1 - v0, v2 - v0)
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total = areas.sum()
    if total <= 0.0:
        raise ZeroAreaMeshError("mesh has no positive-area faces")
    probs = areas / total
    face_idx = rng.choice(len(faces), size=n_points, p=probs)
    uv = rng.random((n_points, 2))
    over = uv.sum(axis=1) > 1.0
    uv[over] = 1.0 - uv[over]
    pts = (v0[face_idx]
           + uv[:, :1] * (v1[face_idx] - v0[face_idx])
           + uv[:, 1:] * (v2[face_idx] - v0[face_idx]))

    # curved faces: snap the chord samples onto the exact analytic surface so
    # positions and normals agree to machine precision (the tessellation is
    # only a sampling scaffold; the mesh itself stays triangulated)
    normals = np.zeros_like(pts)
    kinds = face_kind[face_idx]
    flat = kinds == FLAT
    if np.any(flat):
        fn = cross[face_idx[flat]]
        normals[flat] = fn / np.linalg.norm(fn, axis=1, keepdims=True)
    geom = geom_params[face_geom[face_idx]]
    sph = kinds == SPHERE
    if np.any(sph):
        center = geom[sph, 0:3]
        d = pts[sph] - center
        n = d / np.linalg.norm(d, axis=1, keepdims=True)
        normals[sph] = n
        pts[sph] = center + geom[sph, 6:7] * n
    cyl = kinds == CYL_SIDE
    if np.any(cyl):
        base = geom[cyl, 0:3]
        axis = geom[cyl, 3:6]
        w = pts[cyl] - base
        t = np.einsum("ij,ij->i", w, axis)[:, None]
        radial = w - t * axis
        n = radial / np.linalg.norm(radial, axis=1, keepdims=True)
        normals[cyl] = n
        pts[cyl] = base + t * axis + geom[cyl, 6:7] * n
    con = kinds == CONE_SIDE
    if np.any(con):
        base = geom[con, 0:3]
        axis = geom[con, 3:6]
        w = pts[con] - base
        t = np.einsum("ij,ij->i", w, axis)[:, None]
        radial = w - t * axis
        rn = np.linalg.norm(radial, axis=1, keepdims=True)
        safe = np.where(rn < 1e-12, 1.0, rn)
        u = radial / safe
        r, h = geom[con, 6:7], geom[con, 7:8]
        n = (h * u + r * axis) / np.sqrt(h * h + r * r)
        n = np.where(rn < 1e-12, axis, n)
        normals[con] = n / np.linalg.norm(n, axis=1, keepdims=True)
        pts[con] = base + t * axis + np.maximum(r * (1.0 - t / h), 0.0) * u
    return pts, normals, face_idx.astype(np.int32)


def sample_surface(instance: ObjectInstance, n_points: int, seed: int) -> np.ndarray:
    """Resample an instance's surface: (n_points, 6) xyz+normal, float32."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    pts, normals, _ = _sample_on_faces(
        instance.vertices.astype(np.float64), instance.faces, instance.face_kind,
        instance.face_geom, instance.geom_kind, instance.geom_params.astype(np.float64),
        n_points, rng)
    return np.concatenate([pts, normals], axis=1).astype(np.float32)


def instantiate(template: ShapeTemplate, seed: int, n_points: int = 2048,
                object_id: int = 0) -> ObjectInstance:
    """Draw part sizes, assemble and normalize the mesh, sample the surface."""
    template.validate()
    root = np.random.SeedSequence(seed) if isinstance(seed, (int, np.integer)) else seed
    size_ss, sample_ss = root.spawn(2)
    rng = np.random.default_rng(size_ss)

    sizes = None
    for _ in range(MAX_SIZE_RETRIES + 1):
        group_draws: dict[int, np.ndarray] = {}
        drawn = []
        for part in template.parts:
            lo = np.asarray(part.size_lo, dtype=np.float64)
            hi = np.asarray(part.size_hi, dtype=np.float64)
            if part.size_group >= 0 and part.size_group in group_draws:
                s = group_draws[part.size_group]
            else:
                s = rng.uniform(lo, hi)
                if part.size_group >= 0:
                    group_draws[part.size_group] = s
            drawn.append(s)
        ok = all(
            np.all(s[:_USED_COMPONENTS[p.primitive]] >= MIN_SIZE)
            for p, s in zip(template.parts, drawn)
        )
        if ok:
            sizes = drawn
            break
    if sizes is None:
        raise DegenerateShapeError(f"template '{template.name}' kept drawing degenerate sizes")

    all_verts, all_faces = [], []
    face_label, face_kind, face_geom = [], [], []
    geom_kinds, geom_rows = [], []
    offset = 0
    for part, size in zip(template.parts, sizes):
        v, f, kinds = _primitive_mesh(part.primitive, size)
        rot = np.eye(3) if part.rotation is None else np.asarray(part.rotation, dtype=np.float64)
        center = np.asarray(part.center, dtype=np.float64)
        v = v @ rot.T + center
        gk, gp = _geom_record(part.primitive, size, rot, center)
        geom_kinds.append(gk)
        geom_rows.append(gp)
        all_verts.append(v)
        all_faces.append(f + offset)
        face_label.append(np.full(len(f), part.part_label, dtype=np.int32))
        face_kind.append(kinds)
        face_geom.append(np.full(len(f), part.part_label, dtype=np.int32))
        offset += len(v)

    vertices = np.concatenate(all_verts)
    faces = np.concatenate(all_faces).astype(np.int32)
    face_label = np.concatenate(face_label)
    face_kind = np.concatenate(face_kind)
    face_geom = np.concatenate(face_geom)
    geom_kind = np.array(geom_kinds, dtype=np.int32)
    geom_params = np.stack(geom_rows)

    # normalize: longest bbox edge -> 1, bbox center -> (0.5, 0.5, 0.5)
    lo = vertices.min(axis=0)
    hi = vertices.max(axis=0)
    scale = 1.0 / float((hi - lo).max())
    center = (lo + hi) / 2.0
    vertices = (vertices - center) * scale + 0.5
    geom_params[:, 0:3] = (geom_params[:, 0:3] - center) * scale + 0.5
    geom_params[:, 6:8] *= scale

    sample_rng = np.random.default_rng(sample_ss)
    pts, normals, point_face = _sample_on_faces(
        vertices, faces, face_kind, face_geom, geom_kind, geom_params, n_points, sample_rng)
    indptr, indices = build_face_adjacency(faces)

    sem = np.zeros(len(template.parts), dtype=np.int32)
    for part in template.parts:
        sem[part.part_label] = part.semantic

    return ObjectInstance(
        object_id=object_id,
        category_id=template.category_id,
        points=np.concatenate([pts, normals], axis=1).astype(np.float32),
        point_label=face_label[point_face].astype(np.int32),
        point_face=point_face,
        vertices=vertices.astype(np.float32),
        faces=faces,
        face_label=face_label,
        face_kind=face_kind,
        face_geom=face_geom,
        geom_kind=geom_kind,
        geom_params=geom_params.astype(np.float32),
        adj_indptr=indptr,
        adj_indices=indices,
        sem_of_label=sem,
    )


def instance_meta_json(instance: ObjectInstance) -> bytes:
    meta = {
        "object_id": int(instance.object_id),
        "category_id": int(instance.category_id),
        "bbox_edge": float(instance.bbox_edge),
    }
    return json.dumps(meta, sort_keys=True).encode("utf-8")
