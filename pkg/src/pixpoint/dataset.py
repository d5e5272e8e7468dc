"""Dataset assembly and persistence.

A dataset is 8 categories x (train + held-out) objects, each with a sampled
surface cloud and 16 rendered views (6 axis-aligned + 10 random) at the base
resolution.  Everything is a pure function of the dataset seed: object seeds
are spawned from a `SeedSequence` keyed by (purpose, category, index), so any
object can be regenerated independently.

On disk: a JSON manifest plus one sectioned binary blob per object (see
`binaryio`).  Maps at a higher resolution tier are *not* persisted -- they
are re-rendered on demand from the stored points and camera rotations, which
reproduces them exactly.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import binaryio
from .render import CameraView, PositionMap, axis_cameras, default_px_scale, \
    default_splat_radius, random_cameras
from .shapes import ObjectInstance, ShapeTemplate, build_templates, instantiate

MAGIC = b"PXOB"
FORMAT_VERSION = 1

_SPAWN_OBJECT = 1
_SPAWN_VIEWS = 2

TRAIN_SPLIT = "train"
HELDOUT_SPLIT = "heldout"


class DatasetError(RuntimeError):
    pass


@dataclass
class DatasetConfig:
    seed: int = 1234
    n_train_per_category: int = 25
    n_heldout_per_category: int = 5
    n_points: int = 2048
    n_random_views: int = 10
    resolution: int = 64
    margin: float = 0.05
    splat_radius_px: float | None = None  # None -> resolution-scaled default

    @property
    def n_views(self) -> int:
        return 6 + self.n_random_views


@dataclass
class ObjectRecord:
    instance: ObjectInstance
    cameras: list[CameraView]
    maps: list[PositionMap]
    split: str

    def cameras_at(self, resolution: int, margin: float = 0.05) -> list[CameraView]:
        """Same orientations re-scaled for another resolution tier."""
        scale = default_px_scale(resolution, resolution, margin)
        return [
            CameraView(c.view_index, c.rotation, c.look_at, resolution, resolution, scale)
            for c in self.cameras
        ]

    def maps_at(self, resolution: int, view_ids, margin: float = 0.05,
                splat_radius_px: float | None = None) -> list[PositionMap]:
        """Maps for selected views at an arbitrary tier (re-rendered if needed)."""
        from .render import render_view

        base = self.maps[0].height
        if resolution == base:
            return [self.maps[v] for v in view_ids]
        cams = self.cameras_at(resolution, margin)
        radius = default_splat_radius(resolution, resolution) \
            if splat_radius_px is None else splat_radius_px
        return [render_view(self.instance, cams[v], radius) for v in view_ids]


@dataclass
class Dataset:
    config: DatasetConfig
    records: dict[int, ObjectRecord]
    train_ids: list[int]
    heldout_ids: list[int]
    category_names: dict[int, str]
    content_hash: str = ""

    def ids_of_category(self, category_id: int, split: str) -> list[int]:
        pool = self.train_ids if split == TRAIN_SPLIT else self.heldout_ids
        return [i for i in pool if self.records[i].instance.category_id == category_id]


def object_seed_sequence(dataset_seed: int, category_id: int, index: int,
                         split: str) -> np.random.SeedSequence:
    offset = 0 if split == TRAIN_SPLIT else 10_000
    return np.random.SeedSequence(entropy=dataset_seed,
                                  spawn_key=(_SPAWN_OBJECT, category_id, offset + index))


def build_object(template: ShapeTemplate, config: DatasetConfig, object_id: int,
                 index: int, split: str) -> ObjectRecord:
    ss = object_seed_sequence(config.seed, template.category_id, index, split)
    inst_ss, view_ss = ss.spawn(2)
    instance = instantiate(template, inst_ss, n_points=config.n_points, object_id=object_id)
    res = config.resolution
    cams = axis_cameras(res, res, config.margin)
    cams += random_cameras(config.n_random_views, np.random.default_rng(view_ss),
                           res, res, config.margin, start_index=6)
    radius = config.splat_radius_px
    if radius is None:
        radius = default_splat_radius(res, res)
    from .render import render_view

    maps = [render_view(instance, c, radius) for c in cams]
    return ObjectRecord(instance, cams, maps, split)


def build_dataset(config: DatasetConfig, templates: list[ShapeTemplate] | None = None,
                  progress=None) -> Dataset:
    templates = build_templates() if templates is None else templates
    records: dict[int, ObjectRecord] = {}
    train_ids, heldout_ids = [], []
    names = {t.category_id: t.name for t in templates}
    next_id = 0
    for template in templates:
        for split, count in ((TRAIN_SPLIT, config.n_train_per_category),
                             (HELDOUT_SPLIT, config.n_heldout_per_category)):
            for idx in range(count):
                rec = build_object(template, config, next_id, idx, split)
                records[next_id] = rec
                (train_ids if split == TRAIN_SPLIT else heldout_ids).append(next_id)
                if progress is not None:
                    progress(next_id, rec)
                next_id += 1
    ds = Dataset(config, records, train_ids, heldout_ids, names)
    ds.content_hash = _hash_manifest(_manifest_dict(ds))
    return ds


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _object_sections(rec: ObjectRecord) -> dict:
    inst = rec.instance
    meta = {
        "object_id": int(inst.object_id),
        "category_id": int(inst.category_id),
        "split": rec.split,
        "bbox_edge": float(inst.bbox_edge),
    }
    return {
        "meta": json.dumps(meta, sort_keys=True).encode("utf-8"),
        "points": inst.points,
        "point_label": inst.point_label,
        "point_face": inst.point_face,
        "vertices": inst.vertices,
        "faces": inst.faces,
        "face_label": inst.face_label,
        "face_kind": inst.face_kind,
        "face_geom": inst.face_geom,
        "geom_kind": inst.geom_kind,
        "geom_params": inst.geom_params,
        "adj_indptr": inst.adj_indptr,
        "adj_indices": inst.adj_indices,
        "sem_of_label": inst.sem_of_label,
        "cam_rot": np.stack([c.rotation for c in rec.cameras]),
        "map_data": np.stack([m.data for m in rec.maps]),
        "map_labels": np.stack([m.labels for m in rec.maps]),
        "map_pidx": np.stack([m.point_index for m in rec.maps]),
    }


def _record_from_sections(sections: dict, config: DatasetConfig) -> ObjectRecord:
    meta = json.loads(sections["meta"].decode("utf-8"))
    inst = ObjectInstance(
        object_id=meta["object_id"],
        category_id=meta["category_id"],
        points=sections["points"],
        point_label=sections["point_label"],
        point_face=sections["point_face"],
        vertices=sections["vertices"],
        faces=sections["faces"],
        face_label=sections["face_label"],
        face_kind=sections["face_kind"],
        face_geom=sections["face_geom"],
        geom_kind=sections["geom_kind"],
        geom_params=sections["geom_params"],
        adj_indptr=sections["adj_indptr"],
        adj_indices=sections["adj_indices"],
        sem_of_label=sections["sem_of_label"],
        bbox_edge=meta["bbox_edge"],
    )
    res = config.resolution
    scale = default_px_scale(res, res, config.margin)
    cameras = [
        CameraView(i, rot, np.array([0.5, 0.5, 0.5]), res, res, scale)
        for i, rot in enumerate(sections["cam_rot"])
    ]
    maps = [
        PositionMap(sections["map_data"][i], sections["map_labels"][i],
                    sections["map_pidx"][i])
        for i in range(len(cameras))
    ]
    return ObjectRecord(inst, cameras, maps, meta["split"])


def _manifest_dict(ds: Dataset) -> dict:
    cfg = ds.config
    return {
        "format_version": FORMAT_VERSION,
        "seed": cfg.seed,
        "n_train_per_category": cfg.n_train_per_category,
        "n_heldout_per_category": cfg.n_heldout_per_category,
        "n_points": cfg.n_points,
        "n_random_views": cfg.n_random_views,
        "resolution": cfg.resolution,
        "margin": cfg.margin,
        "splat_radius_px": cfg.splat_radius_px,
        "categories": {str(k): v for k, v in sorted(ds.category_names.items())},
        "objects": [
            {
                "id": oid,
                "category_id": ds.records[oid].instance.category_id,
                "split": ds.records[oid].split,
                "file": f"obj_{oid:05d}.bin",
            }
            for oid in sorted(ds.records)
        ],
    }


def _hash_manifest(manifest: dict) -> str:
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def write_dataset(ds: Dataset, path: str) -> dict:
    """Persist the dataset; returns the manifest dict."""
    os.makedirs(path, exist_ok=True)
    manifest = _manifest_dict(ds)
    for obj in manifest["objects"]:
        rec = ds.records[obj["id"]]
        binaryio.write_container(os.path.join(path, obj["file"]), MAGIC,
                                 FORMAT_VERSION, _object_sections(rec))
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_dataset(path: str) -> Dataset:
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DatasetError(f"no manifest.json under '{path}'")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise binaryio.VersionMismatchError(
            f"manifest format {manifest.get('format_version')}, expected {FORMAT_VERSION}")
    config = DatasetConfig(
        seed=manifest["seed"],
        n_train_per_category=manifest["n_train_per_category"],
        n_heldout_per_category=manifest["n_heldout_per_category"],
        n_points=manifest["n_points"],
        n_random_views=manifest["n_random_views"],
        resolution=manifest["resolution"],
        margin=manifest["margin"],
        splat_radius_px=manifest["splat_radius_px"],
    )
    records: dict[int, ObjectRecord] = {}
    train_ids, heldout_ids = [], []
    for obj in manifest["objects"]:
        sections = binaryio.read_container(os.path.join(path, obj["file"]),
                                           MAGIC, FORMAT_VERSION)
        rec = _record_from_sections(sections, config)
        if rec.instance.object_id != obj["id"]:
            raise DatasetError(f"object id mismatch in {obj['file']}")
        records[obj["id"]] = rec
        (train_ids if rec.split == TRAIN_SPLIT else heldout_ids).append(obj["id"])
    names = {int(k): v for k, v in manifest["categories"].items()}
    ds = Dataset(config, records, train_ids, heldout_ids, names)
    ds.content_hash = _hash_manifest(_manifest_dict(ds))
    return ds
