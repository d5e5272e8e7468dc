"""AdamW with decoupled weight decay and global gradient-norm clipping.

Semantics pinned down for reproducibility:

* decoupled decay multiplies the parameter by ``(1 - lr_eff * weight_decay)``
  *before* the Adam update;
* bias-corrected first/second moments, shared global step count;
* per-group effective learning rate ``lr_eff = base_lr * lr_scale[group]``;
* clipping rescales every gradient by exactly ``max_norm / norm`` (no epsilon)
  when the global norm exceeds ``max_norm``.
"""
from __future__ import annotations

import numpy as np

from .autodiff import NumericsError, Tensor

NamedParams = list[tuple[str, Tensor]]


class AdamW:
    def __init__(self, groups: dict[str, NamedParams], base_lr: float,
                 lr_scales: dict[str, float], betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        for gname in groups:
            if gname not in lr_scales:
                raise KeyError(f"no lr scale for parameter group '{gname}'")
        names = [n for named in groups.values() for n, _ in named]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names across groups")
        self.groups = groups
        self.base_lr = base_lr
        self.lr_scales = dict(lr_scales)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.moment1: dict[str, np.ndarray] = {}
        self.moment2: dict[str, np.ndarray] = {}
        for named in groups.values():
            for name, p in named:
                self.moment1[name] = np.zeros_like(p.data)
                self.moment2[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for named in self.groups.values():
            for _, p in named:
                p.grad = None

    def clip_global_norm(self, max_norm: float) -> float:
        """Scale all gradients so the joint L2 norm is at most ``max_norm``.

        Returns the pre-clip norm.
        """
        total = 0.0
        for named in self.groups.values():
            for _, p in named:
                if p.grad is not None:
                    total += float(np.sum(p.grad * p.grad))
        norm = float(np.sqrt(total))
        if norm > max_norm:
            scale = max_norm / norm
            for named in self.groups.values():
                for _, p in named:
                    if p.grad is not None:
                        p.grad *= scale
        return norm

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for gname, named in self.groups.items():
            lr = self.base_lr * self.lr_scales[gname]
            for name, p in named:
                g = p.grad
                if g is None:
                    raise RuntimeError(f"parameter '{name}' has no gradient at step()")
                m = self.moment1[name]
                v = self.moment2[name]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p.data *= 1.0 - lr * self.weight_decay
                p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                if not np.all(np.isfinite(p.data)):
                    raise NumericsError(f"non-finite parameter '{name}' after update")

    # -- checkpoint support ------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.moment1:
            out["adam_m/" + name] = self.moment1[name]
            out["adam_v/" + name] = self.moment2[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.moment1:
            self.moment1[name][...] = arrays["adam_m/" + name]
            self.moment2[name][...] = arrays["adam_v/" + name]
        self.step_count = step_count
