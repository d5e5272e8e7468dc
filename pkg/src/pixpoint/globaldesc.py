"""Global instance descriptors and the cross-modal global losses.

The 2D side pools shared tokens within each view, fuses in the per-view
context and teacher signals through a learned elementwise gate, refines the
result, and pools across views.  The 3D side mixes shared tokens with one
self-attention block.  Both paths end in a bias-free projection followed by
l2 normalization, so descriptors live on the unit sphere and cosine is a
plain dot product.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .alignment import DSH
from .features2d import DC, DT
from .layers import AttentionBlock, Linear, Module, ResidualBlock, l2_normalize

GLOBAL_DIM = 64
LAMBDA_CONTEXT = 0.5
LAMBDA_TEACHER = 1.0
TAU_GLOBAL_INIT = 0.07
TAU_GLOBAL_MIN = 0.005
TAU_GLOBAL_MAX = 1.0


class FusionParams(Module):
    """Learned maps for folding side signals into pooled view tokens.

    ``context_map`` and ``teacher_map`` are bias-free so that a zero side
    signal contributes exactly nothing; the gate is a two-layer perceptron
    whose zero-initialized state opens the gate halfway (sigmoid(0) = 0.5).
    """

    def __init__(self, rng: np.random.Generator, dsh: int = DSH,
                 dc: int = DC, dt: int = DT):
        self.context_map = Linear(rng, dc, dsh, bias=False)
        self.teacher_map = Linear(rng, dt, dsh, bias=False)
        self.gate_hidden = Linear(rng, 2 * dsh, dsh)
        self.gate_out = Linear(rng, dsh, dsh)


class Global2DHead(Module):
    """Per-view residual refinement plus the shared projection to Dg."""

    def __init__(self, rng: np.random.Generator, dsh: int = DSH,
                 dg: int = GLOBAL_DIM):
        self.refine = ResidualBlock(rng, dsh)
        self.proj = Linear(rng, dsh, dg, bias=False)


class Global3DHead(Module):
    """Self-attention mixing over shared 3D tokens plus the projection."""

    def __init__(self, rng: np.random.Generator, dsh: int = DSH,
                 dg: int = GLOBAL_DIM, n_heads: int = 4):
        self.attend = AttentionBlock(rng, dsh, n_heads=n_heads)
        self.proj = Linear(rng, dsh, dg, bias=False)


@dataclass
class ViewTokens:
    """Per-view pooled, fused, and gate activations for one instance."""

    pooled: Tensor          # (S, Dsh) masked means of shared 2D tokens
    fused: Tensor           # (S, Dsh) after gated fusion
    gate: Tensor            # (S, Dsh), elementwise in (0, 1)
    valid: np.ndarray       # (S,) bool, views that held at least one token


def make_global_temperature() -> Tensor:
    return Tensor(np.asarray(TAU_GLOBAL_INIT), requires_grad=True)


def clamp_global_temperature(tau: Tensor) -> None:
    """Project the learnable temperature back into its allowed interval."""
    tau.data = np.asarray(np.clip(tau.data, TAU_GLOBAL_MIN, TAU_GLOBAL_MAX))


def pool_view(tokens: Tensor, valid) -> tuple[Tensor, bool]:
    """Masked mean of one view's shared 2D tokens.

    Returns a (1, Dsh) row plus a flag saying whether the view held any
    valid token; a view with none pools to zero and is marked invalid.
    """
    valid = np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        return Tensor(np.zeros((1, tokens.shape[1]))), False
    weights = valid.astype(np.float64)[:, None] / count
    return ad.tsum(tokens * Tensor(weights), axis=0, keepdims=True), True


def fuse_views(pooled: Tensor, contexts, teachers, valid,
               params: FusionParams) -> ViewTokens:
    """Gated fusion of all views of one instance at once.

    ``pooled`` is (S, Dsh); ``contexts`` (S, Dc) and ``teachers`` (S, Dt)
    come from the frozen backbone and carry no gradient.  Each fused row is
    pooled + lambda_c * U c + lambda_d * gate(.) * W_d d.
    """
    ctx = params.context_map(Tensor(np.asarray(contexts, dtype=np.float64)))
    teach = params.teacher_map(Tensor(np.asarray(teachers, dtype=np.float64)))
    gate_in = ad.concat([pooled, teach], axis=1)
    gate = ad.sigmoid(params.gate_out(ad.tanh(params.gate_hidden(gate_in))))
    fused = pooled + ctx * LAMBDA_CONTEXT + gate * teach * LAMBDA_TEACHER
    return ViewTokens(pooled=pooled, fused=fused, gate=gate,
                      valid=np.asarray(valid, dtype=bool))


def encode_global_2d(views: ViewTokens, head: Global2DHead,
                     view_mask=None) -> Tensor:
    """Unit-norm 2D instance descriptor from fused view tokens.

    ``view_mask`` restricts pooling to a subset of the valid views (used by
    the subset-consistency loss); by default all valid views contribute.
    """
    mask = views.valid if view_mask is None else np.asarray(view_mask, bool)
    if view_mask is not None and np.any(mask & ~views.valid):
        raise ValueError("view subset includes an invalid view")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cannot build a 2D global descriptor with no valid views")
    refined = head.refine(views.fused)
    weights = mask.astype(np.float64)[:, None] / count
    pooled = ad.tsum(refined * Tensor(weights), axis=0, keepdims=True)
    return l2_normalize(head.proj(pooled))


def encode_global_3d(tokens: Tensor, head: Global3DHead) -> Tensor:
    """Unit-norm 3D instance descriptor from shared 3D tokens (N, Dsh)."""
    mixed = head.attend(tokens)
    pooled = ad.tmean(mixed, axis=0, keepdims=True)
    return l2_normalize(head.proj(pooled))


def global_loss(g2d: Tensor, g3d: Tensor, tau: Tensor) -> Tensor:
    """Symmetric InfoNCE between matched descriptor batches (B, Dg).

    Both softmax directions are averaged over all 2B terms; with a single
    pair each softmax covers one element and the loss is exactly zero.
    """
    b = g2d.shape[0]
    sims = ad.matmul(g2d, ad.transpose(g3d)) * ad.div(1.0, tau)
    diag = ad.tsum(sims * Tensor(np.eye(b)), axis=1)
    fwd = ad.tsum(ad.logsumexp(sims, axis=1) - diag)
    rev = ad.tsum(ad.logsumexp(sims, axis=0) - diag)
    return (fwd + rev) * (1.0 / (2 * b))


def draw_strict_subset(valid, rng: np.random.Generator):
    """One uniform draw over the nonempty strict subsets of the valid views.

    Returns a bool mask over all views, or None when fewer than two views
    are valid (no strict subset exists).
    """
    valid = np.asarray(valid, dtype=bool)
    members = np.flatnonzero(valid)
    n = members.size
    if n <= 1:
        return None
    code = int(rng.integers(1, 2 ** n - 1))
    mask = np.zeros(valid.size, dtype=bool)
    for bit, j in enumerate(members):
        if (code >> bit) & 1:
            mask[j] = True
    return mask


def subset_loss(g_subset: Tensor, g_full) -> Tensor:
    """1 - cosine between a subset descriptor and the stopped full target.

    The full-view descriptor is treated as a constant: pass its raw values
    (or a Tensor, which is detached here) so no gradient reaches that path.
    """
    target = g_full.data if isinstance(g_full, Tensor) else g_full
    target = np.asarray(target, dtype=np.float64).reshape(1, -1)
    return 1.0 - ad.tsum(g_subset * Tensor(target))


def distill_loss(teacher_tokens, g2d: Tensor, g3d: Tensor,
                 tau_distill: float) -> Tensor:
    """Row-wise KL from teacher token affinities to cross-modal affinities.

    The teacher side is a plain array, so it stays constant; the student
    similarity matrix receives gradient through both descriptor batches.
    """
    t = np.asarray(teacher_tokens, dtype=np.float64)
    b = t.shape[0]
    logits = t @ t.T / tau_distill
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    neg_entropy = float((p * np.log(np.maximum(p, 1e-300))).sum())
    student = ad.matmul(g2d, ad.transpose(g3d)) * (1.0 / tau_distill)
    log_q = student - ad.logsumexp(student, axis=1, keepdims=True)
    cross = ad.tsum(Tensor(p) * log_q)
    # log-sum-exp cannot resolve log(1 + x) below machine epsilon, so the
    # Gibbs bound can leak an underflow-scale negative; the clamp keeps the
    # divergence non-negative and is bit-identical whenever it is positive
    return ad.relu((neg_entropy - cross) * (1.0 / b))
