"""Adam with decoupled weight decay, and global-norm gradient clipping."""
from __future__ import annotations

import numpy as np

from ..diffmath import Param


class AdamW:
    def __init__(self, params: list[Param], lr: float = 1e-4, weight_decay: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 lr_scales: list[float] | None = None):
        self.params = list(params)
        self.lr = lr
        # per-parameter multipliers on the shared rate
        self.lr_scales = list(lr_scales) if lr_scales is not None else [1.0] * len(self.params)
        if len(self.lr_scales) != len(self.params):
            raise ValueError("lr_scales must match params")
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v, scale in zip(self.params, self.m, self.v, self.lr_scales):
            if p.grad is None:
                continue
            lr = self.lr * scale
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            dt = p.data.dtype
            # decay is applied to the weights directly, not through the gradient
            p.data *= dt.type(1 - lr * self.weight_decay)
            step = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * step).astype(dt, copy=False)


def clip_grad_norm(params: list[Param], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping. ``max_norm <= 0`` only measures.
    """
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = sq ** 0.5
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype, copy=False)
    return norm
