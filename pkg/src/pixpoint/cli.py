"""Command-line orchestration: data, training, evaluation, queries.

Every run appends structured records to ``manifest.jsonl`` in the output
directory (seeds, dataset path, config hash, stage-boundary metric
snapshots), and exits with a per-error-class code:

  0  success
  2  bad configuration or bad request arguments
  3  missing or incompatible checkpoint
  4  dataset missing or mismatched with the checkpoint
  5  numerical abort during training
"""

import argparse
import json
import math
import os
import sys

import numpy as np

from . import autodiff as ad
from .autodiff import NumericsError, Tensor
from .config import (Config, ConfigError, canonical_json, config_hash,
                     load_config)
from .dataset import Dataset, DatasetError, build_dataset, read_dataset, \
    write_dataset
from .evaluation import (PROTOCOLS, QueryError, loc_acc, localization_eval,
                         query_2d_to_3d, query_3d_to_2d, query_3d_to_3d,
                         retrieval_eval, retrieval_protocol_eval)
from .finitediff import max_relative_error
from .geometry import farthest_point_indices
from .layers import AttentionBlock, Linear, ResidualBlock, l2_normalize
from .model import AlignmentModel
from .parttransfer import TransferError, dbscan, flood_fill, transfer
from .training import (Checkpoint, StageOrderError, Trainer, TrainingAbort,
                       load_checkpoint, load_into_model)

EXIT_OK = 0
EXIT_BAD_CONFIG = 2
EXIT_MISSING_CHECKPOINT = 3
EXIT_DATASET_MISMATCH = 4
EXIT_NUMERICS = 5


class DatasetMismatch(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------


def _append_manifest(out_dir: str, record: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.jsonl"), "a",
              encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _open_run(out_dir: str, command: str, cfg: Config, args) -> None:
    _append_manifest(out_dir, {
        "kind": "run",
        "command": command,
        "config_hash": config_hash(cfg),
        "seeds": {
            "dataset": cfg.dataset.seed,
            "model": cfg.model.seed,
            "training": cfg.training.seed,
            "eval": cfg.eval.seed,
        },
        "dataset_path": getattr(args, "data", None),
        "overrides": list(args.overrides),
    })


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _read_dataset(path: str) -> Dataset:
    return read_dataset(path)


def _read_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise StageOrderError(f"missing checkpoint '{path}'")
    return load_checkpoint(path)


def _check_dataset_hash(ck: Checkpoint, ds: Dataset) -> None:
    if ck.dataset_hash and ds.content_hash and \
            ck.dataset_hash != ds.content_hash:
        raise DatasetMismatch(
            "checkpoint was trained on a different dataset "
            f"({ck.dataset_hash[:12]} != {ds.content_hash[:12]})")


def _model_from_checkpoint(cfg: Config, ck: Checkpoint,
                           ds: Dataset) -> AlignmentModel:
    _check_dataset_hash(ck, ds)
    model = AlignmentModel(cfg.model)
    load_into_model(ck, model)
    return model


def _stage_resolution(ck: Checkpoint, cfg: Config, ds: Dataset) -> int:
    """The resolution tier the checkpointed stage trained at."""
    try:
        stored = json.loads(ck.config_json.decode("utf-8"))
        return int(stored["stages"][ck.stage - 1]["resolution"])
    except (KeyError, IndexError, ValueError, TypeError):
        return cfg.stages[ck.stage - 1].resolution if cfg.stages \
            else ds.config.resolution


def _parse_pair(text: str, flag: str) -> tuple:
    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError(f"{flag} expects 'row,col', got '{text}'")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise ConfigError(f"{flag} expects integers: {exc}") from exc


def _split_ids(ds: Dataset, split: str) -> list:
    return ds.train_ids if split == "train" else ds.heldout_ids


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg: Config) -> int:
    ds = build_dataset(cfg.dataset)
    manifest = write_dataset(ds, args.data)
    print(f"dataset written to {args.data}: "
          f"{len(ds.train_ids)} train / {len(ds.heldout_ids)} held-out "
          f"objects, {ds.config.n_views} views at "
          f"{ds.config.resolution}x{ds.config.resolution}")
    print(f"content hash {ds.content_hash}")
    _append_manifest(args.out, {
        "kind": "result", "command": "gen-data",
        "content_hash": ds.content_hash,
        "objects": len(manifest["objects"]),
    })
    return EXIT_OK


def _stage_snapshot(model: AlignmentModel, ds: Dataset, cfg: Config,
                    stage: int) -> dict:
    resolution = cfg.stages[stage - 1].resolution
    ids = ds.heldout_ids
    loc = localization_eval(model, ds, ids, "s4-random", cfg.eval.seed,
                            resolution, cfg.eval.k_list, cfg.eval.max_pixels)
    ret = retrieval_protocol_eval(model, ds, ids, "s4-random", cfg.eval.seed,
                                  resolution, cfg.eval.k_list)
    return {
        "kind": "stage", "stage": stage, "resolution": resolution,
        "loc_acc": {str(k): loc.scores[k] for k in loc.k_list},
        "recall": {str(k): ret.recall[k] for k in ret.k_list},
        "mrr": ret.mrr, "n_queries": loc.n_queries,
    }


def cmd_train(args, cfg: Config) -> int:
    ds = _read_dataset(args.data)
    model = AlignmentModel(cfg.model)
    trainer = Trainer(model, ds, out_dir=args.out, seed=cfg.training.seed,
                      epoch_multiplier=cfg.training.epoch_multiplier,
                      metrics_path=os.path.join(args.out, "metrics.jsonl"),
                      config_json=canonical_json(cfg).encode("utf-8"))
    stages = [args.stage] if args.stage else [1, 2, 3]
    prev = None
    for stage in stages:
        stage_cfg = cfg.stages[stage - 1]
        if stage > 1 and prev is None:
            prev = _read_checkpoint(trainer.checkpoint_path(stage - 1, True))
            _check_dataset_hash(prev, ds)
        resume = None
        if args.resume:
            partial = trainer.checkpoint_path(stage, False)
            if os.path.exists(partial):
                resume = load_checkpoint(partial)
                _check_dataset_hash(resume, ds)
        ck = trainer.run_stage(stage_cfg, prev=prev, resume=resume)
        print(f"stage {stage} complete: {ck.global_step} steps total, "
              f"checkpoint {trainer.checkpoint_path(stage, True)}")
        if not args.no_stage_eval:
            snap = _stage_snapshot(model, ds, cfg, stage)
            _append_manifest(args.out, snap)
            loc1 = snap["loc_acc"].get("1")
            print(f"stage {stage} held-out: LocAcc@1={loc1:.2f} "
                  f"R@1={snap['recall'].get('1', 0.0):.2f} "
                  f"MRR={snap['mrr']:.2f}")
        prev = ck
    _append_manifest(args.out, {
        "kind": "result", "command": "train", "stages": stages,
        "final_stage": stages[-1],
    })
    return EXIT_OK


def cmd_eval_local(args, cfg: Config) -> int:
    ds = _read_dataset(args.data)
    ck = _read_checkpoint(args.checkpoint)
    model = _model_from_checkpoint(cfg, ck, ds)
    resolution = args.resolution or _stage_resolution(ck, cfg, ds)
    ids = _split_ids(ds, args.split)
    res = localization_eval(model, ds, ids, args.protocol, cfg.eval.seed,
                            resolution, cfg.eval.k_list, cfg.eval.max_pixels)
    record = {
        "kind": "eval-local", "protocol": args.protocol, "split": args.split,
        "resolution": resolution, "stage": ck.stage,
        "n_queries": res.n_queries,
        "loc_acc": {str(k): res.scores[k] for k in res.k_list},
    }
    for k in res.k_list:
        print(f"LocAcc@{k} = {res.scores[k]:.4f}")
    print(f"({res.n_queries} queries, protocol {args.protocol}, "
          f"split {args.split}, {resolution}x{resolution})")
    _append_manifest(args.out, record)
    return EXIT_OK


def cmd_eval_retrieval(args, cfg: Config) -> int:
    ds = _read_dataset(args.data)
    ck = _read_checkpoint(args.checkpoint)
    model = _model_from_checkpoint(cfg, ck, ds)
    resolution = args.resolution or _stage_resolution(ck, cfg, ds)
    ids = _split_ids(ds, args.split)
    res = retrieval_protocol_eval(model, ds, ids, args.protocol,
                                  cfg.eval.seed, resolution, cfg.eval.k_list)
    for k in res.k_list:
        print(f"R@{k} = {res.recall[k]:.4f}")
    print(f"MRR = {res.mrr:.4f}")
    print(f"({len(ids)} objects, protocol {args.protocol}, "
          f"split {args.split}, {resolution}x{resolution})")
    _append_manifest(args.out, {
        "kind": "eval-retrieval", "protocol": args.protocol,
        "split": args.split, "resolution": resolution, "stage": ck.stage,
        "recall": {str(k): res.recall[k] for k in res.k_list},
        "mrr": res.mrr,
    })
    return EXIT_OK


def cmd_query(args, cfg: Config) -> int:
    ds = _read_dataset(args.data)
    ck = _read_checkpoint(args.checkpoint)
    model = _model_from_checkpoint(cfg, ck, ds)
    resolution = args.resolution or _stage_resolution(ck, cfg, ds)
    if args.object not in ds.records:
        raise QueryError(f"no object with id {args.object}")
    record = ds.records[args.object]

    if args.mode == "2d3d":
        if args.pixel is None:
            raise ConfigError("--pixel is required for mode 2d3d")
        pixel = _parse_pair(args.pixel, "--pixel")
        res = query_2d_to_3d(model, record, args.view, pixel, resolution)
        print(f"top {args.top} tokens for pixel {pixel} of view {args.view}:")
        for rank in range(min(args.top, res.indices.size)):
            c = res.centers[rank]
            print(f"  {rank + 1:2d}. token {res.indices[rank]:3d} "
                  f"sim {res.sims[rank]:+.4f} "
                  f"center ({c[0]:.3f}, {c[1]:.3f}, {c[2]:.3f})")
        payload = {"tokens": res.indices[:args.top].tolist(),
                   "sims": [float(s) for s in res.sims[:args.top]]}
    elif args.mode == "3d2d":
        if args.token is None:
            raise ConfigError("--token is required for mode 3d2d")
        res = query_3d_to_2d(model, record, args.token, [args.view],
                             resolution)
        print(f"top {args.top} pixels for token {args.token} "
              f"in view {args.view}:")
        for rank in range(min(args.top, res.pixels.shape[0])):
            y, x = res.pixels[rank]
            print(f"  {rank + 1:2d}. pixel ({y:3d}, {x:3d}) "
                  f"sim {res.sims[rank]:+.4f}")
        payload = {"pixels": res.pixels[:args.top].tolist(),
                   "sims": [float(s) for s in res.sims[:args.top]]}
    else:  # 3d3d
        if args.token is None or args.other is None:
            raise ConfigError("--token and --other are required for 3d3d")
        if args.other not in ds.records:
            raise QueryError(f"no object with id {args.other}")
        res = query_3d_to_3d(model, record, args.token,
                             ds.records[args.other])
        print(f"top {args.top} tokens of object {args.other} for "
              f"token {args.token} of object {args.object}:")
        for rank in range(min(args.top, res.indices.size)):
            print(f"  {rank + 1:2d}. token {res.indices[rank]:3d} "
                  f"sim {res.sims[rank]:+.4f}")
        payload = {"tokens": res.indices[:args.top].tolist(),
                   "sims": [float(s) for s in res.sims[:args.top]]}
    _append_manifest(args.out, {
        "kind": "query", "mode": args.mode, "object": args.object,
        "resolution": resolution, **payload,
    })
    return EXIT_OK


def _write_region_ply(path: str, instance, region_faces: np.ndarray) -> None:
    """ASCII mesh dump with the transferred region tinted for inspection."""
    in_region = np.zeros(len(instance.faces), dtype=bool)
    in_region[region_faces] = True
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(instance.vertices)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {len(instance.faces)}\n")
        fh.write("property list uchar int vertex_indices\n")
        fh.write("property uchar red\nproperty uchar green\n"
                 "property uchar blue\n")
        fh.write("end_header\n")
        for v in instance.vertices:
            fh.write(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for fi, (a, b, c) in enumerate(instance.faces):
            color = "220 70 70" if in_region[fi] else "170 170 170"
            fh.write(f"3 {a} {b} {c} {color}\n")


def cmd_part_transfer(args, cfg: Config) -> int:
    ds = _read_dataset(args.data)
    ck = _read_checkpoint(args.checkpoint)
    model = _model_from_checkpoint(cfg, ck, ds)
    if args.object not in ds.records:
        raise TransferError(f"no object with id {args.object}")
    record = ds.records[args.object]
    click = _parse_pair(args.click, "--click")
    external = None
    if args.mask is not None:
        try:
            external = np.load(args.mask)
        except (OSError, ValueError) as exc:
            raise TransferError(f"cannot read mask '{args.mask}': {exc}") \
                from exc
    radius = ds.config.splat_radius_px
    res = transfer(model, record, args.view, click, cfg.transfer,
                   external_mask=external, splat_radius_px=radius)
    for key, value in sorted(res.diagnostics.items()):
        print(f"{key}: {value}")
    if res.region is None:
        print(f"no confident region (stage: {res.failed_stage})")
    else:
        faces = res.region.faces
        print(f"region: {faces.size} faces from cluster "
              f"{res.region.cluster_label}")
        print("faces: " + " ".join(str(int(f)) for f in faces))
        if args.mesh_out:
            _write_region_ply(args.mesh_out, record.instance, faces)
            print(f"mesh written to {args.mesh_out}")
    _append_manifest(args.out, {
        "kind": "part-transfer", "object": args.object, "view": args.view,
        "click": list(click), "failed_stage": res.failed_stage,
        "region_faces": 0 if res.region is None else int(res.region.faces.size),
        "diagnostics": res.diagnostics,
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# verification subcommands
# ---------------------------------------------------------------------------


def gradient_check_trial(seed: int) -> float:
    """Finite-difference error of a random composite graph over the op set."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    d_in = int(rng.integers(3, 7))
    d_mid = 2 * int(rng.integers(2, 5))
    lin = Linear(rng, d_in, d_mid)
    block = ResidualBlock(rng, d_mid)
    attn = AttentionBlock(rng, d_mid, n_heads=2)
    x = rng.normal(size=(n, d_in))
    eye = np.eye(n)

    def build_loss():
        h = attn(block(lin(Tensor(x))))
        d = l2_normalize(h)
        sims = ad.matmul(d, ad.transpose(d)) * (1.0 / 0.07)
        nce = ad.tsum(ad.logsumexp(sims, axis=1)
                      - ad.tsum(sims * Tensor(eye), axis=1))
        gate = ad.tsum(ad.sigmoid(ad.tanh(h)))
        return nce * (1.0 / n) + gate * 0.1

    params = [p for _, p in lin.named_params() + block.named_params()
              + attn.named_params()]
    return max_relative_error(build_loss, params)


def cmd_grad_check(args, cfg: Config) -> int:
    worst = 0.0
    for trial in range(args.trials):
        err = gradient_check_trial(1000 + trial)
        worst = max(worst, err)
        print(f"trial {trial}: max relative error {err:.3e}")
    ok = worst <= args.tolerance
    print(f"worst {worst:.3e} vs tolerance {args.tolerance:.1e}: "
          f"{'ok' if ok else 'FAIL'}")
    _append_manifest(args.out, {
        "kind": "grad-check", "trials": args.trials,
        "worst": worst, "tolerance": args.tolerance, "passed": bool(ok),
    })
    return EXIT_OK if ok else 1


def _selftest_checks():
    """(name, callable) pairs; each raises AssertionError on failure."""

    def check_gradients():
        for seed in (7, 8):
            err = gradient_check_trial(seed)
            assert err <= 1e-4, f"finite differences disagree: {err:.2e}"

    def check_local_loss():
        from .alignment import LocalLossConfig, assign, local_loss
        from .features2d import QuerySet
        centers = np.array([[0.2, 0.2, 0.2], [0.8, 0.8, 0.8]])
        queries = QuerySet(q=centers.copy(), x=np.zeros((2, 4)),
                           view_index=np.zeros(2, dtype=np.int32),
                           cell=np.zeros((2, 2), dtype=np.int32))
        cfg = LocalLossConfig(tau_local=1.0)
        assignment = assign(queries, centers, cfg)
        loss, _ = local_loss(Tensor(np.eye(2)), Tensor(np.eye(2)),
                             assignment, cfg)
        expected = math.log(1.0 + math.exp(-1.0))
        assert abs(loss.data - expected) < 1e-9, loss.data

    def check_global_losses():
        from .globaldesc import distill_loss, global_loss
        one = Tensor(np.array([[1.0, 0.0]]))
        assert global_loss(one, one, Tensor(np.array(0.07))).data == 0.0
        t = np.random.default_rng(0).normal(size=(3, 4))
        g = t / np.linalg.norm(t, axis=1, keepdims=True)
        matched = distill_loss(g, Tensor(g), Tensor(g), 0.07)
        assert abs(matched.data) < 1e-10, matched.data

    def check_fps():
        rng = np.random.default_rng(5)
        pts = rng.uniform(size=(40, 3))
        picks = farthest_point_indices(pts, 8)
        centroid = pts.mean(axis=0)
        assert picks[0] == np.argmin(np.linalg.norm(pts - centroid, axis=1))
        chosen = [picks[0]]
        for expected in picks[1:]:
            d = np.min(np.linalg.norm(
                pts[:, None, :] - pts[chosen][None, :, :], axis=2), axis=1)
            assert expected == np.argmax(d)
            chosen.append(expected)

    def check_dbscan():
        tight = np.array([[0.0, 0, 0], [0.01, 0, 0], [0.0, 0.01, 0]])
        two = np.concatenate([tight, tight + np.array([3.0, 0, 0])])
        labels = dbscan(two, eps=0.08, min_pts=3)
        assert labels.tolist() == [0, 0, 0, 1, 1, 1], labels

    def check_flood_fill():
        indptr = np.array([0, 1, 3, 5, 6], dtype=np.int32)
        indices = np.array([1, 0, 2, 1, 3, 2], dtype=np.int32)  # chain of 4
        allowed = np.array([True, True, False, True])
        faces, _ = flood_fill([0], indptr, indices, allowed)
        assert faces.tolist() == [0, 1], faces

    def check_metrics():
        desc2d = np.array([[1.0, 0.0]])
        desc3d = np.array([[1.0, 0.0], [0.8, 0.6]])
        centers = np.array([[0.3, 0.0, 0.0], [0.1, 0.0, 0.0]])
        res = loc_acc(desc2d, np.zeros((1, 3)), desc3d, centers,
                      k_list=(1, 2))
        assert abs(res.scores[1] - 82.6795) < 5e-5
        assert abs(res.scores[2] - 94.2265) < 5e-5
        gal = np.eye(4)
        ret = retrieval_eval(np.tile([1.0, 0.9, 0.8, 0.7], (3, 1)),
                             np.array([0, 1, 2]), gal,
                             np.array([0, 1, 9, 2]), k_list=(1,))
        assert abs(ret.mrr - (1 + 0.5 + 0.25) / 3 * 100) < 1e-9

    return [
        ("gradient finite differences", check_gradients),
        ("local loss closed form", check_local_loss),
        ("global and distill losses", check_global_losses),
        ("farthest point sampling", check_fps),
        ("dbscan clustering", check_dbscan),
        ("flood fill", check_flood_fill),
        ("evaluation metrics", check_metrics),
    ]


def cmd_selftest(args, cfg: Config) -> int:
    failures = 0
    for name, check in _selftest_checks():
        try:
            check()
        except AssertionError as exc:
            failures += 1
            print(f"FAIL - {name}: {exc}")
        else:
            print(f"ok - {name}")
    _append_manifest(args.out, {
        "kind": "selftest", "failures": failures,
        "checks": len(_selftest_checks()),
    })
    if failures:
        print(f"{failures} check(s) failed")
        return 1
    print("all checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pixpoint",
        description="pixel-to-point alignment: data, training, evaluation")
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--set", action="append", dest="overrides",
                        default=[], metavar="KEY=VALUE",
                        help="override one config key (dotted path)")
    parser.add_argument("--out", default="runs",
                        help="output directory for artifacts and manifests")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate and save a dataset")
    gen.add_argument("--data", required=True, help="output dataset directory")

    train = sub.add_parser("train", help="run the staged training schedule")
    train.add_argument("--data", required=True)
    train.add_argument("--stage", type=int, choices=(1, 2, 3),
                       help="run one stage (default: all three in order)")
    train.add_argument("--resume", action="store_true",
                       help="continue from a partial checkpoint if present")
    train.add_argument("--no-stage-eval", action="store_true",
                       help="skip held-out metric snapshots between stages")

    for name in ("eval-local", "eval-retrieval"):
        ev = sub.add_parser(name, help=f"{name.split('-')[1]} evaluation")
        ev.add_argument("--data", required=True)
        ev.add_argument("--checkpoint", required=True)
        ev.add_argument("--protocol", default="s4-random", choices=PROTOCOLS)
        ev.add_argument("--split", default="heldout",
                        choices=("train", "heldout"))
        ev.add_argument("--resolution", type=int)

    query = sub.add_parser("query", help="rank tokens or pixels for a query")
    query.add_argument("--data", required=True)
    query.add_argument("--checkpoint", required=True)
    query.add_argument("--object", type=int, required=True)
    query.add_argument("--mode", required=True,
                       choices=("2d3d", "3d2d", "3d3d"))
    query.add_argument("--view", type=int, default=0)
    query.add_argument("--pixel", help="'row,col' for mode 2d3d")
    query.add_argument("--token", type=int, help="token id for 3d modes")
    query.add_argument("--other", type=int,
                       help="second object id for mode 3d3d")
    query.add_argument("--resolution", type=int)
    query.add_argument("--top", type=int, default=10)

    pt = sub.add_parser("part-transfer",
                        help="click-to-region part transfer")
    pt.add_argument("--data", required=True)
    pt.add_argument("--checkpoint", required=True)
    pt.add_argument("--object", type=int, required=True)
    pt.add_argument("--view", type=int, required=True)
    pt.add_argument("--click", required=True, help="'row,col' pixel")
    pt.add_argument("--mask", help=".npy boolean mask instead of the "
                                   "ground-truth part mask")
    pt.add_argument("--mesh-out", help="write a colored .ply mesh dump")

    gc = sub.add_parser("grad-check",
                        help="finite-difference check of the gradient engine")
    gc.add_argument("--trials", type=int, default=5)
    gc.add_argument("--tolerance", type=float, default=1e-4)

    sub.add_parser("selftest", help="fast oracle suite")
    return parser


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-local": cmd_eval_local,
    "eval-retrieval": cmd_eval_retrieval,
    "query": cmd_query,
    "part-transfer": cmd_part_transfer,
    "grad-check": cmd_grad_check,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    try:
        _open_run(args.out, args.command, cfg, args)
        return _HANDLERS[args.command](args, cfg)
    except (ConfigError, QueryError, TransferError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _append_manifest(args.out, {"kind": "error", "class": "request",
                                    "message": str(exc)})
        return EXIT_BAD_CONFIG
    except StageOrderError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        _append_manifest(args.out, {"kind": "error", "class": "checkpoint",
                                    "message": str(exc)})
        return EXIT_MISSING_CHECKPOINT
    except (DatasetError, DatasetMismatch) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        _append_manifest(args.out, {"kind": "error", "class": "dataset",
                                    "message": str(exc)})
        return EXIT_DATASET_MISMATCH
    except (TrainingAbort, NumericsError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        _append_manifest(args.out, {"kind": "error", "class": "numerics",
                                    "message": str(exc)})
        return EXIT_NUMERICS


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
