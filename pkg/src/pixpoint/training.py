"""Three-stage training loop: scheduling, checkpoints, and metric logs.

All randomness is keyed by (seed, stage, epoch, step) counters, never by a
mutable generator carried across steps, so a run can be interrupted at any
optimizer step and resumed bit-exactly from its checkpoint.
"""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import binaryio
from .alignment import LocalLossConfig, assign, local_loss
from .autodiff import NumericsError, Tensor
from .dataset import Dataset
from .features2d import mean_teacher, sample_queries
from .globaldesc import (
    clamp_global_temperature, distill_loss, draw_strict_subset, global_loss,
    subset_loss,
)
from .model import AlignmentModel
from .optim import AdamW

_SPAWN_TRAIN = 4
CLIP_NORM = 1.0
CHECKPOINT_MAGIC = b"PXCK"
CHECKPOINT_VERSION = 1
DEFAULT_EPOCH_MULTIPLIER = 16

LOSS_KEYS = ("loss_local", "loss_global", "loss_subset", "loss_distill")


class StageOrderError(RuntimeError):
    """Raised when stages are run out of their required order."""


class TrainingAbort(RuntimeError):
    """Raised when a step produced a non-finite loss; diagnostics on disk."""

    def __init__(self, message: str, snapshot_path: str):
        super().__init__(message)
        self.snapshot_path = snapshot_path


@dataclass(frozen=True)
class StageConfig:
    stage: int
    enable_global: bool
    enable_teacher_fusion: bool
    lambda_local: float
    lambda_global: float
    lambda_subset: float
    lambda_distill: float
    hard_k: int
    hard_weight: float
    delta: float
    tau_distill: float
    base_lr: float
    lr_scales: dict
    batch_size: int
    epochs: int
    resolution: int

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError("stage must be 1, 2, or 3")
        for name in ("lambda_local", "lambda_global", "lambda_subset",
                     "lambda_distill"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.stage == 1:
            if self.enable_global or self.lambda_global or self.lambda_subset \
                    or self.lambda_distill:
                raise ValueError("the first stage trains the local branch only")
            if self.hard_k or self.hard_weight:
                raise ValueError("the first stage uses the soft local loss only")
        missing = {"vae3d", "shared", "local", "global"} - set(self.lr_scales)
        if missing:
            raise ValueError(f"lr_scales missing groups: {sorted(missing)}")

    def local_config(self) -> LocalLossConfig:
        return LocalLossConfig(delta=self.delta, hard_k=self.hard_k,
                               hard_weight=self.hard_weight)


def default_stage_configs(base_resolution: int = 64) -> list[StageConfig]:
    """The schedule used throughout: local warm-up, global joint training,
    then high-resolution fine-tuning with stronger hard negatives."""
    ones = {"vae3d": 1.0, "shared": 1.0, "local": 1.0, "global": 1.0}
    return [
        StageConfig(stage=1, enable_global=False, enable_teacher_fusion=False,
                    lambda_local=1.0, lambda_global=0.0, lambda_subset=0.0,
                    lambda_distill=0.0, hard_k=0, hard_weight=0.0, delta=0.020,
                    tau_distill=0.0, base_lr=1e-4, lr_scales=dict(ones),
                    batch_size=30, epochs=5, resolution=base_resolution),
        StageConfig(stage=2, enable_global=True, enable_teacher_fusion=True,
                    lambda_local=0.25, lambda_global=1.0, lambda_subset=0.05,
                    lambda_distill=0.10, hard_k=64, hard_weight=0.25,
                    delta=0.020, tau_distill=0.07, base_lr=6e-5,
                    lr_scales={"vae3d": 1.0, "shared": 0.10, "local": 0.30,
                               "global": 1.0},
                    batch_size=25, epochs=3, resolution=base_resolution),
        StageConfig(stage=3, enable_global=True, enable_teacher_fusion=True,
                    lambda_local=0.50, lambda_global=0.80, lambda_subset=0.05,
                    lambda_distill=0.20, hard_k=96, hard_weight=0.50,
                    delta=0.015, tau_distill=0.05, base_lr=3e-5,
                    lr_scales={"vae3d": 1.0, "shared": 0.05, "local": 0.50,
                               "global": 1.0},
                    batch_size=7, epochs=3, resolution=2 * base_resolution),
    ]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    stage: int
    completed: bool
    epoch: int             # epochs fully finished within the stage
    step_in_epoch: int     # optimizer steps finished within the current epoch
    global_step: int       # optimizer steps across the whole run
    opt_step: int          # optimizer's own step counter within the stage
    seed: int
    params: dict = field(repr=False, default_factory=dict)
    moments: dict = field(repr=False, default_factory=dict)
    config_json: bytes = b"{}"
    dataset_hash: str = ""


def save_checkpoint(ck: Checkpoint, path: str) -> None:
    sections: dict = {
        "meta/counters": np.array(
            [ck.stage, int(ck.completed), ck.epoch, ck.step_in_epoch,
             ck.global_step, ck.opt_step, ck.seed], dtype=np.int64),
        "meta/config": ck.config_json,
        "meta/dataset_hash": ck.dataset_hash.encode(),
    }
    sections.update(ck.params)
    sections.update(ck.moments)
    binaryio.write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                             sections)


def load_checkpoint(path: str) -> Checkpoint:
    sections = binaryio.read_container(path, CHECKPOINT_MAGIC,
                                       CHECKPOINT_VERSION)
    counters = sections.pop("meta/counters")
    config_json = sections.pop("meta/config")
    dataset_hash = sections.pop("meta/dataset_hash").decode()
    params = {k: v for k, v in sections.items() if k.startswith("param/")}
    moments = {k: v for k, v in sections.items() if k.startswith("adam_")}
    return Checkpoint(
        stage=int(counters[0]), completed=bool(counters[1]),
        epoch=int(counters[2]), step_in_epoch=int(counters[3]),
        global_step=int(counters[4]), opt_step=int(counters[5]),
        seed=int(counters[6]), params=params, moments=moments,
        config_json=config_json, dataset_hash=dataset_hash)


def load_into_model(ck: Checkpoint, model: AlignmentModel) -> None:
    """Install checkpoint parameters; absent groups keep their fresh init.

    A checkpoint written before the global branch existed simply lacks those
    sections, so the model retains the seed-determined initialization.
    """
    model.reinit_global()
    for name, p in model.named_params():
        stored = ck.params.get("param/" + name)
        if stored is None:
            continue
        if stored.size != p.data.size:
            raise ValueError(f"shape mismatch for parameter '{name}'")
        # the container stores scalars as length-1 vectors
        p.data = np.array(stored, dtype=np.float64).reshape(p.data.shape)


# ---------------------------------------------------------------------------
# the trainer
# ---------------------------------------------------------------------------


def _step_seed(seed: int, stage: int, epoch: int, step: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(_SPAWN_TRAIN, stage, epoch,
                                                 1 + step))
    return np.random.default_rng(ss)


def _epoch_order(seed: int, stage: int, epoch: int, train_ids: list[int],
                 multiplier: int) -> np.ndarray:
    ss = np.random.SeedSequence(seed, spawn_key=(_SPAWN_TRAIN, stage, epoch))
    rng = np.random.default_rng(ss)
    return rng.permutation(np.repeat(np.asarray(train_ids), multiplier))


class Trainer:
    def __init__(self, model: AlignmentModel, dataset: Dataset, out_dir: str,
                 seed: int = 0, epoch_multiplier: int = DEFAULT_EPOCH_MULTIPLIER,
                 metrics_path: str | None = None, config_json: bytes = b"{}"):
        self.model = model
        self.dataset = dataset
        self.out_dir = out_dir
        self.seed = seed
        self.epoch_multiplier = epoch_multiplier
        self.metrics: list[dict] = []
        self.metrics_path = metrics_path
        self.config_json = config_json
        os.makedirs(out_dir, exist_ok=True)

    def steps_per_epoch(self, cfg: StageConfig) -> int:
        inventory = len(self.dataset.train_ids) * self.epoch_multiplier
        return inventory // cfg.batch_size

    def checkpoint_path(self, stage: int, completed: bool) -> str:
        tag = "" if completed else "_partial"
        return os.path.join(self.out_dir, f"stage{stage}{tag}.ckpt")

    # -- single step ---------------------------------------------------------

    def _instance_terms(self, record, cfg: StageConfig,
                        rng: np.random.Generator):
        """Forward one instance; returns its per-loss Tensor contributions."""
        n_views = len(record.cameras)
        s = int(rng.integers(1, 5))
        view_ids = [int(v) for v in rng.choice(n_views, size=s, replace=False)]
        data = self.model.view_data(record, view_ids, cfg.resolution)
        field3d = self.model.token_field(record)
        h3d, d3d = self.model.local_3d(field3d)

        out = {"local": None, "g2d": None, "g3d": None, "subset": None,
               "teacher": None}
        queries = sample_queries(data.grids, data.maps, self.model.config.m_max)
        if len(queries):
            _, d2d = self.model.local_2d(queries, data.contexts)
            assignment = assign(queries, field3d.centers, cfg.local_config())
            total, _ = local_loss(d2d, d3d, assignment, cfg.local_config())
            out["local"] = total

        if cfg.enable_global:
            views = self.model.view_tokens(
                data, use_teacher=cfg.enable_teacher_fusion)
            # an instance whose sampled views are all degenerate contributes
            # no global terms this step, mirroring the empty-query local case
            if np.any(views.valid):
                g2d = self.model.global_descriptor_2d(views)
                out["g2d"] = g2d
                out["g3d"] = self.model.global_descriptor_3d(h3d)
                out["teacher"] = mean_teacher(data.teachers)
                mask = draw_strict_subset(views.valid, rng)
                if mask is not None:
                    g_sub = self.model.global_descriptor_2d(views, view_mask=mask)
                    out["subset"] = subset_loss(g_sub, g2d.data)
        return out

    def _batch_losses(self, records, cfg: StageConfig,
                      rng: np.random.Generator) -> dict:
        from . import autodiff as ad

        zero = Tensor(np.asarray(0.0))
        inst = [self._instance_terms(r, cfg, rng) for r in records]

        locals_ = [t["local"] for t in inst if t["local"] is not None]
        losses = {"local": zero if not locals_ else
                  sum(locals_[1:], locals_[0]) * (1.0 / len(locals_))}

        paired = [t for t in inst if t["g2d"] is not None]
        if cfg.enable_global and paired:
            g2d = ad.concat([t["g2d"] for t in paired], axis=0)
            g3d = ad.concat([t["g3d"] for t in paired], axis=0)
            teachers = np.stack([t["teacher"] for t in paired])
            losses["global"] = global_loss(g2d, g3d, self.model.tau_g)
            losses["distill"] = distill_loss(teachers, g2d, g3d,
                                             cfg.tau_distill)
            subsets = [t["subset"] for t in inst if t["subset"] is not None]
            losses["subset"] = zero if not subsets else \
                sum(subsets[1:], subsets[0]) * (1.0 / len(subsets))
        else:
            losses["global"] = zero
            losses["subset"] = zero
            losses["distill"] = zero
        return losses

    def _run_step(self, optimizer: AdamW, records, cfg: StageConfig,
                  rng: np.random.Generator) -> dict:
        losses = self._batch_losses(records, cfg, rng)
        contributions = {
            "loss_local": losses["local"] * cfg.lambda_local,
            "loss_global": losses["global"] * cfg.lambda_global,
            "loss_subset": losses["subset"] * cfg.lambda_subset,
            "loss_distill": losses["distill"] * cfg.lambda_distill,
        }
        total = (contributions["loss_local"] + contributions["loss_global"]
                 + contributions["loss_subset"] + contributions["loss_distill"])
        optimizer.zero_grad()
        total.backward()
        grad_norm = optimizer.clip_global_norm(CLIP_NORM)
        optimizer.step()
        clamp_global_temperature(self.model.tau_g)
        record = {key: float(t.data) for key, t in contributions.items()}
        record["loss_total"] = float(total.data)
        record["grad_norm"] = grad_norm
        record["tau_g"] = float(self.model.tau_g.data)
        return record

    # -- stage driver ----------------------------------------------------------

    def _make_optimizer(self, cfg: StageConfig) -> AdamW:
        groups = self.model.param_groups()
        if not cfg.enable_global:
            groups.pop("global")
        return AdamW(groups, base_lr=cfg.base_lr, lr_scales=cfg.lr_scales)

    def _write_metric(self, rec: dict) -> None:
        self.metrics.append(rec)
        if self.metrics_path:
            with open(self.metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")

    def _snapshot(self, ck: Checkpoint, cfg: StageConfig, error: Exception,
                  last_record: dict | None) -> str:
        path = os.path.join(self.out_dir, f"abort_stage{cfg.stage}.json")
        state_path = os.path.join(self.out_dir, f"abort_stage{cfg.stage}.ckpt")
        save_checkpoint(ck, state_path)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"stage": cfg.stage, "error": str(error),
                       "last_record": last_record, "state": state_path,
                       "stage_config": asdict(cfg)}, fh, indent=2)
        return path

    def _checkpoint_now(self, cfg: StageConfig, completed: bool, epoch: int,
                        step_in_epoch: int, global_step: int,
                        optimizer: AdamW) -> Checkpoint:
        return Checkpoint(
            stage=cfg.stage, completed=completed, epoch=epoch,
            step_in_epoch=step_in_epoch, global_step=global_step,
            opt_step=optimizer.step_count, seed=self.seed,
            params={k: v.copy() for k, v in self.model.state_arrays().items()},
            moments={k: v.copy() for k, v in optimizer.state_arrays().items()},
            config_json=self.config_json,
            dataset_hash=self.dataset.content_hash)

    def run_stage(self, cfg: StageConfig, prev: Checkpoint | None = None,
                  resume: Checkpoint | None = None,
                  stop_after_steps: int | None = None) -> Checkpoint:
        """Train one stage; returns the checkpoint written at the end.

        ``prev`` is the completed checkpoint of the previous stage (required
        for stages 2 and 3); ``resume`` is a partial checkpoint of *this*
        stage.  ``stop_after_steps`` ends the stage early with a partial
        checkpoint after that many optimizer steps (used for resume tests
        and manual splits).
        """
        if resume is not None:
            if resume.stage != cfg.stage or resume.completed:
                raise StageOrderError(
                    "resume checkpoint does not belong to an unfinished run "
                    f"of stage {cfg.stage}")
            if resume.dataset_hash and self.dataset.content_hash and \
                    resume.dataset_hash != self.dataset.content_hash:
                raise StageOrderError("resume checkpoint was trained on a "
                                      "different dataset")
            load_into_model(resume, self.model)
        elif cfg.stage == 1:
            if prev is not None:
                raise StageOrderError("stage 1 starts from scratch")
        else:
            if prev is None:
                raise StageOrderError(
                    f"stage {cfg.stage} requires the completed checkpoint of "
                    f"stage {cfg.stage - 1}")
            if prev.stage != cfg.stage - 1 or not prev.completed:
                raise StageOrderError(
                    f"stage {cfg.stage} must follow a completed stage "
                    f"{cfg.stage - 1} checkpoint, got stage {prev.stage} "
                    f"(completed={prev.completed})")
            load_into_model(prev, self.model)

        optimizer = self._make_optimizer(cfg)
        start_epoch, start_step, global_step = 0, 0, 0
        if resume is not None:
            optimizer.load_state_arrays(resume.moments, resume.opt_step)
            start_epoch, start_step = resume.epoch, resume.step_in_epoch
            global_step = resume.global_step
        elif prev is not None:
            global_step = prev.global_step

        spe = self.steps_per_epoch(cfg)
        done_now = 0
        last_record = None
        for epoch in range(start_epoch, cfg.epochs):
            order = _epoch_order(self.seed, cfg.stage, epoch,
                                 self.dataset.train_ids, self.epoch_multiplier)
            first = start_step if epoch == start_epoch else 0
            for step in range(first, spe):
                ids = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
                records = [self.dataset.records[int(i)] for i in ids]
                rng = _step_seed(self.seed, cfg.stage, epoch, step)
                try:
                    rec = self._run_step(optimizer, records, cfg, rng)
                except NumericsError as err:
                    ck = self._checkpoint_now(cfg, False, epoch, step,
                                              global_step, optimizer)
                    snap = self._snapshot(ck, cfg, err, last_record)
                    raise TrainingAbort(
                        f"non-finite loss at stage {cfg.stage} epoch {epoch} "
                        f"step {step}; diagnostics at {snap}", snap) from err
                global_step += 1
                done_now += 1
                rec.update(step=global_step, stage=cfg.stage, epoch=epoch)
                self._write_metric(rec)
                last_record = rec
                if stop_after_steps is not None and done_now >= stop_after_steps:
                    ck = self._checkpoint_now(cfg, False, epoch, step + 1,
                                              global_step, optimizer)
                    save_checkpoint(ck, self.checkpoint_path(cfg.stage, False))
                    return ck
        ck = self._checkpoint_now(cfg, True, cfg.epochs, 0, global_step,
                                  optimizer)
        save_checkpoint(ck, self.checkpoint_path(cfg.stage, True))
        return ck

    def run_all(self, configs: list[StageConfig],
                stage_end_hook=None) -> Checkpoint:
        """Run the full schedule in order, threading checkpoints through."""
        prev = None
        for cfg in configs:
            prev = self.run_stage(cfg, prev=prev)
            if stage_end_hook is not None:
                stage_end_hook(cfg, prev)
        return prev
