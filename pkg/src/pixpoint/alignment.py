"""Shared token space and the local correspondence loss.

Both modalities land in one embedding space: 2D queries through a residual
MLP over (patch feature ⊕ view context), 3D tokens through a residual MLP
over their latents.  Linear heads plus ℓ2 normalization produce the local
descriptors, and a bidirectional weighted InfoNCE — soft positives from
geometric nearest-neighbor assignment, spatially excluded negatives, and
optional hard-negative emphasis — ties them together.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features2d import DC, F2D, QuerySet
from .geometry import pairwise_sq_dists
from .layers import Linear, Module, ResidualMLPEncoder, l2_normalize
from .tokens3d import DVAE

DSH = 64
DLOC = 48
_MASK = -1e9


def make_encoder_2d(rng: np.random.Generator, f2d: int = F2D, dc: int = DC,
                    dsh: int = DSH) -> ResidualMLPEncoder:
    """f_2D: residual MLP over concat(patch feature, view context)."""
    return ResidualMLPEncoder(rng, f2d + dc, dsh)


def make_encoder_3d(rng: np.random.Generator, dvae: int = DVAE,
                    dsh: int = DSH) -> ResidualMLPEncoder:
    """f_3D: residual MLP over token latents, no context injection."""
    return ResidualMLPEncoder(rng, dvae, dsh)


def queries_encoder_input(queries: QuerySet, contexts: Sequence[np.ndarray]) -> np.ndarray:
    """(M, f2d + dc) rows: each query's feature joined with its view's context."""
    if len(queries) == 0:
        dc = contexts[0].shape[0] if len(contexts) else DC
        return np.zeros((0, queries.x.shape[1] + dc))
    ctx = np.stack([contexts[s] for s in queries.view_index])
    return np.concatenate([queries.x, ctx], axis=1)


class LocalHead(Module):
    """Bias-free linear head onto the unit sphere."""

    def __init__(self, rng: np.random.Generator, dsh: int = DSH, dloc: int = DLOC):
        self.proj = Linear(rng, dsh, dloc, bias=False)

    def __call__(self, h: Tensor) -> Tensor:
        return l2_normalize(self.proj(h))


def project_local(h: Tensor, head: LocalHead) -> Tensor:
    return head(h)


# ---------------------------------------------------------------------------
# geometric assignment
# ---------------------------------------------------------------------------


@dataclass
class LocalLossConfig:
    sigma: float = 0.05        # Gaussian confidence bandwidth (world units)
    tau_local: float = 0.07    # fixed local temperature
    delta: float = 0.02        # spatial negative-exclusion radius
    hard_k: int = 0
    hard_weight: float = 0.0

    def __post_init__(self):
        if self.sigma <= 0 or self.tau_local <= 0 or self.delta <= 0:
            raise ValueError("sigma, tau_local and delta must be positive")
        if self.hard_k < 0 or self.hard_weight < 0:
            raise ValueError("hard-negative settings must be non-negative")


@dataclass
class Assignment:
    positive: np.ndarray   # (M,) int32 nearest token per query
    weight: np.ndarray     # (M,) float64 Gaussian confidence in (0, 1]
    allowed: np.ndarray    # (M, N) bool: may appear in the denominator
    pos_dist: np.ndarray   # (M,) float64 distance to the positive


def assign(queries: QuerySet, centers: np.ndarray, cfg: LocalLossConfig) -> Assignment:
    """Nearest-token positives with confidence weights and δ-exclusion.

    A token is excluded from a query's negatives when it lies within δ of
    the query coordinate; the positive itself always stays in the pair.
    Ties break to the lowest token index.
    """
    if centers.shape[0] < 1:
        raise ValueError("need at least one 3D token")
    d2 = pairwise_sq_dists(queries.q, np.asarray(centers, dtype=np.float64))
    positive = np.argmin(d2, axis=1).astype(np.int32)
    pos_d2 = d2[np.arange(len(positive)), positive]
    weight = np.exp(-pos_d2 / (2.0 * cfg.sigma ** 2))
    allowed = d2 >= cfg.delta ** 2
    allowed[np.arange(len(positive)), positive] = True
    return Assignment(positive=positive, weight=weight, allowed=allowed,
                      pos_dist=np.sqrt(pos_d2))


# ---------------------------------------------------------------------------
# bidirectional weighted InfoNCE
# ---------------------------------------------------------------------------


def _top_hard_mask(scores: np.ndarray, eligible: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k boolean mask over eligible entries.

    Ranked by score descending with lowest-index tie-breaks (stable sort on
    the negated scores).
    """
    ranked = np.where(eligible, scores, -np.inf)
    order = np.argsort(-ranked, axis=1, kind="stable")
    mask = np.zeros(scores.shape, dtype=bool)
    rows = np.arange(scores.shape[0])[:, None]
    take = order[:, :k]
    mask[rows, take] = True
    return mask & eligible


def _nce(sims: Tensor, pos_mask: np.ndarray, cand_mask: np.ndarray,
         weights: np.ndarray, reduce_axis: int) -> Tensor:
    """Weighted multi-positive InfoNCE over the similarity matrix.

    loss_i = logsumexp(candidates_i) - logsumexp(positives_i), reduced along
    ``reduce_axis`` (1: per query, 0: per token) and averaged under the given
    weights.  Zero-weight anchors still flow through the graph but contribute
    nothing, value or gradient.
    """
    cand = sims + Tensor(np.where(cand_mask, 0.0, _MASK))
    pos = sims + Tensor(np.where(pos_mask, 0.0, _MASK))
    per = ad.logsumexp(cand, axis=reduce_axis) - ad.logsumexp(pos, axis=reduce_axis)
    total = float(weights.sum())
    return ad.tsum(per * Tensor(weights)) / max(total, np.finfo(np.float64).tiny)


def local_loss(desc2d: Tensor, desc3d: Tensor, assignment: Assignment,
               cfg: LocalLossConfig) -> tuple[Tensor | None, dict[str, float]]:
    """Total local loss and its per-direction decomposition.

    Returns (None, {"skip": 1.0}) for an empty query set — the step simply
    leaves this sample out of the batch average.
    """
    m = desc2d.shape[0]
    if m == 0:
        return None, {"skip": 1.0}
    n = desc3d.shape[0]
    sims = ad.matmul(desc2d, desc3d.T) * (1.0 / cfg.tau_local)

    rows = np.arange(m)
    pos_mask = np.zeros((m, n), dtype=bool)
    pos_mask[rows, assignment.positive] = True
    cand_fwd = assignment.allowed | pos_mask

    w_q = assignment.weight
    fwd = _nce(sims, pos_mask, cand_fwd, w_q, reduce_axis=1)

    # reverse direction: tokens with at least one assigned query act as
    # multi-positive anchors over every query of the instance
    counts = pos_mask.sum(axis=0)
    has = counts > 0
    w_tok = np.zeros(n)
    np.divide(pos_mask.T @ w_q, counts, out=w_tok, where=has)
    cand_rev = np.ones((m, n), dtype=bool)
    rev = _nce(sims, pos_mask, cand_rev, w_tok, reduce_axis=0)

    terms = {"forward": float(fwd.data), "reverse": float(rev.data)}
    total = (fwd + rev) * 0.5

    if cfg.hard_k > 0 and cfg.hard_weight > 0.0:
        neg_fwd = cand_fwd & ~pos_mask
        hard_fwd_mask = _top_hard_mask(sims.data, neg_fwd, cfg.hard_k) | pos_mask
        fwd_hard = _nce(sims, pos_mask, hard_fwd_mask, w_q, reduce_axis=1)

        neg_rev = ~pos_mask
        hard_rev_mask = _top_hard_mask(sims.data.T, neg_rev.T, cfg.hard_k).T | pos_mask
        rev_hard = _nce(sims, pos_mask, hard_rev_mask, w_tok, reduce_axis=0)

        total = total + (fwd_hard + rev_hard) * (0.5 * cfg.hard_weight)
        terms["forward_hard"] = float(fwd_hard.data)
        terms["reverse_hard"] = float(rev_hard.data)

    terms["total"] = float(total.data)
    return total, terms
