"""Neural building blocks on top of the autodiff engine.

Initialization convention: weights ~ N(0, 1/sqrt(fan_in)), biases zero,
LayerNorm gain 1 / bias 0.  Every module draws from the `numpy.random.Generator`
it is handed, so construction order fully determines the parameter values.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import NumericsError, Tensor

NORM_FLOOR = 1e-8


class Module:
    """Minimal parameter container; children discovered from attribute order."""

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for name, value in vars(self).items():
            key = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out.append((key, value))
            elif isinstance(value, Module):
                out.extend(value.named_params(key))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_params(f"{key}{i}"))
        return out

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 bias: bool = True, zero_init: bool = False):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, d_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = ad.tmean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = ad.tmean(centered * centered, axis=-1, keepdims=True)
        inv = ad.pow_const(var + self.eps, -0.5)
        return centered * inv * self.gain + self.bias


class ResidualBlock(Module):
    """LayerNorm -> Linear -> GELU -> Linear, added back to the input."""

    def __init__(self, rng: np.random.Generator, d: int, hidden: int | None = None):
        hidden = 2 * d if hidden is None else hidden
        self.norm = LayerNorm(d)
        self.fc1 = Linear(rng, d, hidden)
        self.fc2 = Linear(rng, hidden, d)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.fc2(ad.gelu(self.fc1(self.norm(x))))


class ResidualMLPEncoder(Module):
    """Input projection followed by two residual MLP blocks."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_model: int):
        self.proj = Linear(rng, d_in, d_model)
        self.blocks = [ResidualBlock(rng, d_model), ResidualBlock(rng, d_model)]

    def __call__(self, x: Tensor) -> Tensor:
        h = self.proj(x)
        for block in self.blocks:
            h = block(h)
        return h


class AttentionBlock(Module):
    """One pre-norm multi-head self-attention block with a feed-forward tail."""

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int = 4, ffn_mult: int = 2):
        if d % n_heads != 0:
            raise ValueError("model width must divide evenly across heads")
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.norm1 = LayerNorm(d)
        self.qkv = Linear(rng, d, 3 * d)
        self.out = Linear(rng, d, d)
        self.norm2 = LayerNorm(d)
        self.ffn1 = Linear(rng, d, ffn_mult * d)
        self.ffn2 = Linear(rng, ffn_mult * d, d)

    def __call__(self, x: Tensor) -> Tensor:
        n, d = x.shape
        qkv = self.qkv(self.norm1(x))
        q = ad.narrow(qkv, 1, 0, d)
        k = ad.narrow(qkv, 1, d, d)
        v = ad.narrow(qkv, 1, 2 * d, d)
        scale = 1.0 / math.sqrt(self.d_head)
        heads = []
        for h in range(self.n_heads):
            lo = h * self.d_head
            qh = ad.narrow(q, 1, lo, self.d_head)
            kh = ad.narrow(k, 1, lo, self.d_head)
            vh = ad.narrow(v, 1, lo, self.d_head)
            scores = ad.matmul(qh, kh.T) * scale
            attn = ad.softmax(scores, axis=-1)
            heads.append(ad.matmul(attn, vh))
        x = x + self.out(ad.concat(heads, axis=1))
        return x + self.ffn2(ad.gelu(self.ffn1(self.norm2(x))))


class SetEncoder(Module):
    """Permutation-invariant encoder for (n_sets, set_size, d_in) inputs.

    Per-element MLP, max+mean pooling over the set axis, then an output MLP.
    """

    def __init__(self, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int):
        self.phi1 = Linear(rng, d_in, d_hidden)
        self.phi2 = Linear(rng, d_hidden, d_hidden)
        self.rho1 = Linear(rng, 2 * d_hidden, d_hidden)
        self.rho2 = Linear(rng, d_hidden, d_out)
        self.d_hidden = d_hidden

    def __call__(self, x: Tensor) -> Tensor:
        n, k, d_in = x.shape
        flat = ad.reshape(x, (n * k, d_in))
        h = ad.gelu(self.phi2(ad.gelu(self.phi1(flat))))
        h = ad.reshape(h, (n, k, self.d_hidden))
        pooled = ad.concat([ad.amax(h, axis=1), ad.tmean(h, axis=1)], axis=1)
        return self.rho2(ad.gelu(self.rho1(pooled)))


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Unit-normalize rows; a norm below the 1e-8 floor means the upstream
    features collapsed, which is treated as a numerical failure, not masked."""
    sq = ad.tsum(x * x, axis=axis, keepdims=True)
    norms = ad.sqrt(sq)
    if np.any(norms.data < NORM_FLOOR):
        raise NumericsError("descriptor norm below %.0e floor" % NORM_FLOOR)
    return x / norms
