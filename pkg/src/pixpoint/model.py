"""Model assembly: trainable parameter groups around the frozen 2D stand-in.

Parameters live in four named groups so the optimizer can scale learning
rates per group:

* ``vae3d``  — the 3D neighborhood set encoder,
* ``shared`` — the two shared-space encoders,
* ``local``  — the two local descriptor heads,
* ``global`` — fusion maps, both global heads, and the learnable global
  temperature.

Each group draws its initial weights from its own seed stream, so the
global group can be re-initialized from the config seed alone (used when a
checkpoint from a stage without a global branch is loaded into one with).
"""

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .alignment import DLOC, DSH, LocalHead, make_encoder_2d, make_encoder_3d, \
    queries_encoder_input
from .autodiff import Tensor
from .dataset import ObjectRecord
from .features2d import (
    DC, DT, F2D, FrozenBackbone2D, PatchGrid, QuerySet, compute_view_context,
    extract_patch_features, make_backbone, teacher_token,
)
from .globaldesc import (
    GLOBAL_DIM, FusionParams, Global2DHead, Global3DHead, ViewTokens,
    encode_global_2d, encode_global_3d, fuse_views, make_global_temperature,
    pool_view,
)
from .render import CameraView, PositionMap
from .tokens3d import DVAE, K_NEIGHBORS, N3D, TokenField, build_token_field, \
    encode_tokens, make_set_encoder

_SPAWN_MODEL = 3
PARAM_GROUPS = ("vae3d", "shared", "local", "global")
M_MAX = 128


@dataclass(frozen=True)
class ModelConfig:
    seed: int = 0
    f2d: int = F2D
    dc: int = DC
    dt: int = DT
    dsh: int = DSH
    dloc: int = DLOC
    dg: int = GLOBAL_DIM
    dvae: int = DVAE
    vae_hidden: int = 64
    n3d: int = N3D
    k_neighbors: int = K_NEIGHBORS
    m_max: int = M_MAX


@dataclass
class ViewData:
    """Frozen-backbone outputs for one instance's sampled views."""

    view_ids: list[int]
    cameras: list[CameraView]
    maps: list[PositionMap]
    grids: list[PatchGrid]
    contexts: np.ndarray    # (S, Dc)
    teachers: np.ndarray    # (S, Dt)


def _group_rng(seed: int, group_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(_SPAWN_MODEL, group_index))
    return np.random.default_rng(ss)


class AlignmentModel:
    """Both branches plus the frozen backbone, ready for training or eval."""

    def __init__(self, config: ModelConfig = ModelConfig()):
        self.config = config
        self._field_cache: dict = {}
        self.backbone: FrozenBackbone2D = make_backbone(
            config.seed, f2d=config.f2d, dc=config.dc, dt=config.dt)
        self.set_encoder = make_set_encoder(
            _group_rng(config.seed, 0), d_hidden=config.vae_hidden,
            d_out=config.dvae)
        rng_shared = _group_rng(config.seed, 1)
        self.encoder_2d = make_encoder_2d(
            rng_shared, f2d=config.f2d, dc=config.dc, dsh=config.dsh)
        self.encoder_3d = make_encoder_3d(
            rng_shared, dvae=config.dvae, dsh=config.dsh)
        rng_local = _group_rng(config.seed, 2)
        self.head_2d = LocalHead(rng_local, dsh=config.dsh, dloc=config.dloc)
        self.head_3d = LocalHead(rng_local, dsh=config.dsh, dloc=config.dloc)
        self.reinit_global()

    def reinit_global(self) -> None:
        """Fresh global-group parameters drawn from the config seed."""
        rng = _group_rng(self.config.seed, 3)
        cfg = self.config
        self.fusion = FusionParams(rng, dsh=cfg.dsh, dc=cfg.dc, dt=cfg.dt)
        self.global_2d = Global2DHead(rng, dsh=cfg.dsh, dg=cfg.dg)
        self.global_3d = Global3DHead(rng, dsh=cfg.dsh, dg=cfg.dg)
        self.tau_g = make_global_temperature()

    # -- parameter bookkeeping ---------------------------------------------

    def param_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        return {
            "vae3d": self.set_encoder.named_params("vae3d.set_encoder"),
            "shared": (self.encoder_2d.named_params("shared.encoder_2d")
                       + self.encoder_3d.named_params("shared.encoder_3d")),
            "local": (self.head_2d.named_params("local.head_2d")
                      + self.head_3d.named_params("local.head_3d")),
            "global": (self.fusion.named_params("global.fusion")
                       + self.global_2d.named_params("global.head_2d")
                       + self.global_3d.named_params("global.head_3d")
                       + [("global.tau", self.tau_g)]),
        }

    def named_params(self) -> list[tuple[str, Tensor]]:
        groups = self.param_groups()
        return [pair for g in PARAM_GROUPS for pair in groups[g]]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"param/" + name: p.data for name, p in self.named_params()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.named_params():
            stored = arrays["param/" + name]
            if stored.size != p.data.size:
                raise ValueError(f"shape mismatch for parameter '{name}'")
            p.data = np.array(stored, dtype=np.float64).reshape(p.data.shape)

    # -- frozen-backbone side -------------------------------------------------

    def view_data(self, record: ObjectRecord, view_ids,
                  resolution: int) -> ViewData:
        """Run the frozen stand-in over the chosen views at one tier."""
        view_ids = list(view_ids)
        cams = record.cameras_at(resolution)
        cameras = [cams[v] for v in view_ids]
        maps = record.maps_at(resolution, view_ids)
        grids = [extract_patch_features(m, c, self.backbone)
                 for m, c in zip(maps, cameras)]
        contexts = np.stack([compute_view_context(g, self.backbone)
                             for g in grids]) if grids else np.zeros((0, self.config.dc))
        teachers = np.stack([teacher_token(record.instance, c, self.backbone)
                             for c in cameras]) if cameras else np.zeros((0, self.config.dt))
        return ViewData(view_ids=view_ids, cameras=cameras, maps=maps,
                        grids=grids, contexts=contexts, teachers=teachers)

    def token_field(self, record: ObjectRecord) -> TokenField:
        """Token field for a record, memoized on the record object.

        The field is a pure function of the record's frozen point set and
        the model dimensions, and records are never mutated after dataset
        construction, so recomputing it every training step would only
        repeat the same farthest-point and neighbor searches.  Entries pin
        their record, which keeps ``id`` keys from ever being recycled.
        """
        key = id(record)
        hit = self._field_cache.get(key)
        if hit is None:
            if len(self._field_cache) >= 4096:
                self._field_cache.clear()
            hit = (record, build_token_field(record.instance.points,
                                             self.config.n3d,
                                             self.config.k_neighbors))
            self._field_cache[key] = hit
        return hit[1]

    # -- trainable forward passes ----------------------------------------------

    def local_2d(self, queries: QuerySet, contexts) -> tuple[Tensor, Tensor]:
        """Shared tokens and local descriptors for a query set."""
        rows = queries_encoder_input(queries, contexts)
        h = self.encoder_2d(Tensor(rows))
        return h, self.head_2d(h)

    def local_3d(self, field: TokenField) -> tuple[Tensor, Tensor]:
        """Shared tokens and local descriptors for all 3D tokens."""
        z = encode_tokens(field, self.set_encoder)
        h = self.encoder_3d(z)
        return h, self.head_3d(h)

    def shared_view_tokens(self, grid: PatchGrid, context: np.ndarray) -> Tensor:
        """Shared tokens for every valid cell of one view (global pooling)."""
        feats = grid.features[grid.valid]
        rows = np.concatenate(
            [feats, np.broadcast_to(context, (feats.shape[0], context.size))],
            axis=1)
        return self.encoder_2d(Tensor(rows))

    def view_tokens(self, data: ViewData, use_teacher: bool = True) -> ViewTokens:
        """Pool each view's shared tokens and fuse in the side signals."""
        pooled_rows, valid = [], []
        for grid, context in zip(data.grids, data.contexts):
            tokens = self.shared_view_tokens(grid, context)
            row, ok = pool_view(tokens, np.ones(tokens.shape[0], dtype=bool))
            pooled_rows.append(row)
            valid.append(ok)
        pooled = ad.concat(pooled_rows, axis=0)
        teachers = data.teachers if use_teacher else np.zeros_like(data.teachers)
        return fuse_views(pooled, data.contexts, teachers,
                          np.array(valid, bool), self.fusion)

    def global_descriptor_2d(self, views: ViewTokens, view_mask=None) -> Tensor:
        return encode_global_2d(views, self.global_2d, view_mask=view_mask)

    def global_descriptor_3d(self, h3d: Tensor) -> Tensor:
        return encode_global_3d(h3d, self.global_3d)


def detached_copy(model: AlignmentModel) -> AlignmentModel:
    """A structurally identical model with copied parameter values."""
    clone = AlignmentModel(replace(model.config))
    clone.load_state_arrays({k: v.copy() for k, v in model.state_arrays().items()})
    return clone
