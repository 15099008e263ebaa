"""Differentiable layer primitives built on :mod:`anchorpose.diffmath.tensor`.

The heavier primitives (linear, conv2d, softmax, normalisation, bilinear
sampling) carry fused backward passes instead of being composed from
elementwise ops; the composite version would be correct but slower.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import kernels
from .tensor import Tensor, as_tensor, make_result, record_kink, relu


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; ``weight`` is ``[in, out]``."""
    _check(x.shape[-1] == weight.shape[0],
           f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out.reshape(lead + (weight.shape[1],)), parents, backward)


def mlp_forward(x: Tensor, layers: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """Stack of linear layers with ReLU between them (none after the last)."""
    for i, (w, b) in enumerate(layers):
        x = linear(x, w, b)
        if i < len(layers) - 1:
            x = relu(x)
    return x


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # in-place arithmetic: attention logits are the largest arrays in the model
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        gx = g * out
        s = gx.sum(axis=axis, keepdims=True)
        np.subtract(g, s, out=gx)
        gx *= out
        return (gx,)

    return make_result(out, (x,), backward)


def normalize(x: Tensor, axes: tuple[int, ...], eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance normalisation over ``axes`` (no affine)."""
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return make_result(xhat.astype(xd.dtype, copy=False), (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return normalize(x, (-1,), eps) * gamma + beta


def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None,
               beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Group normalisation for ``[B, C, H, W]`` input."""
    _check(x.ndim == 4, f"group_norm expects [B, C, H, W], got {x.shape}")
    b, c, h, w = x.shape
    _check(c % groups == 0, f"group_norm: channels {c} not divisible by groups {groups}")
    y = normalize(x.reshape(b, groups, c // groups, h, w), (2, 3, 4), eps).reshape(b, c, h, w)
    if gamma is not None:
        y = y * gamma.reshape(1, c, 1, 1)
    if beta is not None:
        y = y + beta.reshape(1, c, 1, 1)
    return y


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x``: ``[B, Cin, H, W]``; ``weight``: ``[Cout, Cin, kh, kw]``."""
    _check(x.ndim == 4 and weight.ndim == 4,
           f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    _check(x.shape[1] == weight.shape[1],
           f"conv2d: input shape {x.shape} incompatible with weight shape {weight.shape}")
    b, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    _check(ho > 0 and wo > 0, f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    if kh == kw == 1 and stride == 1:
        cols = xp.reshape(b, cin, ho * wo)
    else:
        cols = kernels.im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g3 = g.reshape(b, cout, ho * wo)
        gx = gw = None
        if weight.requires_grad:
            gw = np.einsum("bop,bkp->ok", g3, cols, optimize=True).reshape(weight.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g3)
            if kh == kw == 1 and stride == 1:
                gxp = gcols.reshape(b, cin, hp, wp)
            else:
                gxp = kernels.col2im(gcols, cin, hp, wp, kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    return make_result(out.reshape(b, cout, ho, wo), parents, backward)


def bilinear_sample_pixels(feature: Tensor, points: Tensor) -> Tensor:
    """Bilinear sampling with channels-last maps and pixel-space points.

    ``feature``: ``[N, H, W, C]``; ``points``: ``[N, Q, 2]`` as (x, y) with
    pixel ``i`` centred at ``i``. Returns ``[N, Q, C]``.
    """
    fd, pd = feature.data, points.data
    record_kink(np.floor(pd))

    def backward(g):
        gf, gp = kernels.bilinear_backward(fd, pd, g)
        return (gf if feature.requires_grad else None,
                gp if points.requires_grad else None)

    return make_result(kernels.bilinear_forward(fd, pd), (feature, points), backward)


def bilinear_sample(feature, points) -> Tensor:
    """Sample ``feature`` ``[..., C, H, W]`` at normalised ``points`` ``[..., Q, 2]``.

    Points are (x, y) in [0, 1] with the centre of cell ``(i, j)`` at
    ``((j + 0.5) / W, (i + 0.5) / H)``. Points off the map are allowed;
    out-of-range neighbours contribute zero. Returns ``[..., C, Q]``.
    """
    feature = as_tensor(feature)
    points = as_tensor(points, dtype=feature.dtype)
    if feature.ndim < 3 or feature.size == 0 or min(feature.shape[-3:]) < 1:
        raise ShapeError("degenerate feature")
    lead = feature.shape[:-3]
    c, h, w = feature.shape[-3:]
    _check(points.shape[-1] == 2 and points.shape[:-2] == lead,
           f"bilinear_sample: points shape {points.shape} incompatible with feature shape "
           f"{feature.shape}")
    q = points.shape[-2]
    n = int(np.prod(lead)) if lead else 1
    fmap = feature.reshape(n, c, h, w).transpose(0, 2, 3, 1)
    scale = np.array([w, h], dtype=feature.dtype)
    pix = points.reshape(n, q, 2) * scale - 0.5
    out = bilinear_sample_pixels(fmap, pix)
    return out.transpose(0, 2, 1).reshape(lead + (c, q))
