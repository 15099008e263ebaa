"""Hot inner loops: bilinear gather/scatter and im2col/col2im.

Two interchangeable backends exist for every kernel. The numba backend is
used when numba imports cleanly and ``ANCHORPOSE_KERNELS`` is not set to
``numpy``; otherwise the vectorised numpy fallback runs. Both backends are
sequential and therefore bit-reproducible run to run.

Layouts
-------
* bilinear kernels take channels-last feature maps ``[N, H, W, C]`` and
  pixel-space sample positions ``[N, Q, 2]`` (x, y), where pixel ``i`` has
  its centre at ``i``. Samples outside the map contribute zero.
* im2col returns ``[B, C*kh*kw, Ho*Wo]`` for a zero-padded ``[B, C, H, W]``.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f
        if args and callable(args[0]):
            return args[0]
        return wrap


def _select_backend() -> str:
    requested = os.environ.get("ANCHORPOSE_KERNELS", "numba").strip().lower()
    if requested not in ("numba", "numpy"):
        raise ValueError(f"ANCHORPOSE_KERNELS must be 'numba' or 'numpy', got {requested!r}")
    if requested == "numba" and not HAVE_NUMBA:
        return "numpy"
    return requested


BACKEND = _select_backend()


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _bilinear_forward_nb(feat, pts):
    n_maps, h, w, c = feat.shape
    q = pts.shape[1]
    out = np.zeros((n_maps, q, c), dtype=feat.dtype)
    for n in range(n_maps):
        for i in range(q):
            x = pts[n, i, 0]
            y = pts[n, i, 1]
            x0f = np.floor(x)
            y0f = np.floor(y)
            x0 = int(x0f)
            y0 = int(y0f)
            fx = x - x0f
            fy = y - y0f
            for dy in range(2):
                yy = y0 + dy
                if yy < 0 or yy >= h:
                    continue
                wy = fy if dy == 1 else 1.0 - fy
                for dx in range(2):
                    xx = x0 + dx
                    if xx < 0 or xx >= w:
                        continue
                    wgt = wy * (fx if dx == 1 else 1.0 - fx)
                    for k in range(c):
                        out[n, i, k] += wgt * feat[n, yy, xx, k]
    return out


@njit(cache=True, nogil=True)
def _bilinear_backward_nb(feat, pts, gout):
    n_maps, h, w, c = feat.shape
    q = pts.shape[1]
    gfeat = np.zeros_like(feat)
    gpts = np.zeros_like(pts)
    for n in range(n_maps):
        for i in range(q):
            x = pts[n, i, 0]
            y = pts[n, i, 1]
            x0f = np.floor(x)
            y0f = np.floor(y)
            x0 = int(x0f)
            y0 = int(y0f)
            fx = x - x0f
            fy = y - y0f
            gx = 0.0
            gy = 0.0
            for dy in range(2):
                yy = y0 + dy
                if yy < 0 or yy >= h:
                    continue
                wy = fy if dy == 1 else 1.0 - fy
                dwy = 1.0 if dy == 1 else -1.0
                for dx in range(2):
                    xx = x0 + dx
                    if xx < 0 or xx >= w:
                        continue
                    wx = fx if dx == 1 else 1.0 - fx
                    dwx = 1.0 if dx == 1 else -1.0
                    wgt = wy * wx
                    dot = 0.0
                    for k in range(c):
                        gk = gout[n, i, k]
                        gfeat[n, yy, xx, k] += wgt * gk
                        dot += gk * feat[n, yy, xx, k]
                    gx += dot * wy * dwx
                    gy += dot * wx * dwy
            gpts[n, i, 0] = gx
            gpts[n, i, 1] = gy
    return gfeat, gpts


@njit(cache=True, nogil=True)
def _col2im_nb(cols, c, hp, wp, kh, kw, stride, ho, wo):
    b = cols.shape[0]
    xp = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for n in range(b):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        iy = oy * stride + i
                        base = oy * wo
                        for ox in range(wo):
                            xp[n, ch, iy, ox * stride + j] += cols[n, row, base + ox]
    return xp


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------

def _corners(pts, h, w):
    x = pts[..., 0]
    y = pts[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = []
    for dy in (0, 1):
        for dx in (0, 1):
            xx = x0 + dx
            yy = y0 + dy
            valid = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            wx = fx if dx else 1.0 - fx
            wy = fy if dy else 1.0 - fy
            out.append((np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1), valid,
                        wx, wy, 1.0 if dx else -1.0, 1.0 if dy else -1.0))
    return out


def _bilinear_forward_np(feat, pts):
    n_maps, h, w, c = feat.shape
    nidx = np.arange(n_maps)[:, None]
    out = np.zeros((n_maps, pts.shape[1], c), dtype=feat.dtype)
    for yy, xx, valid, wx, wy, _, _ in _corners(pts, h, w):
        wgt = (wx * wy * valid).astype(feat.dtype)
        out += wgt[..., None] * feat[nidx, yy, xx]
    return out


def _bilinear_backward_np(feat, pts, gout):
    n_maps, h, w, c = feat.shape
    nidx = np.broadcast_to(np.arange(n_maps)[:, None], pts.shape[:2])
    gfeat = np.zeros_like(feat)
    gpts = np.zeros_like(pts)
    flat = gfeat.reshape(-1, c)
    for yy, xx, valid, wx, wy, dwx, dwy in _corners(pts, h, w):
        vmask = valid.astype(feat.dtype)
        wgt = wx * wy * vmask
        lin = ((nidx * h + yy) * w + xx).ravel()
        np.add.at(flat, lin, (wgt[..., None] * gout).reshape(-1, c))
        dot = np.einsum("nqc,nqc->nq", gout, feat[nidx, yy, xx]) * vmask
        gpts[..., 0] += dot * wy * dwx
        gpts[..., 1] += dot * wx * dwy
    return gfeat, gpts


def _im2col_np(xp, kh, kw, stride, ho, wo):
    b, c = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(b, c, kh, kw, ho, wo),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride), writeable=False)
    return view.reshape(b, c * kh * kw, ho * wo)


def _col2im_np(cols, c, hp, wp, kh, kw, stride, ho, wo):
    b = cols.shape[0]
    xp = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    blocks = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += blocks[:, :, i, j]
    return xp


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_IMPLS = {
    # im2col is a pure strided copy; numpy's C copy beats a jitted loop, so both share it
    "numba": (_bilinear_forward_nb, _bilinear_backward_nb, _im2col_np, _col2im_nb),
    "numpy": (_bilinear_forward_np, _bilinear_backward_np, _im2col_np, _col2im_np),
}


def get_kernels(backend: str | None = None):
    """Return ``(bilinear_forward, bilinear_backward, im2col, col2im)``."""
    name = backend or BACKEND
    if name not in _IMPLS:
        raise ValueError(f"unknown kernel backend {name!r}; expected one of {sorted(_IMPLS)}")
    return _IMPLS[name]


def bilinear_forward(feat, pts, backend: str | None = None):
    return get_kernels(backend)[0](np.ascontiguousarray(feat), np.ascontiguousarray(pts))


def bilinear_backward(feat, pts, gout, backend: str | None = None):
    return get_kernels(backend)[1](np.ascontiguousarray(feat), np.ascontiguousarray(pts),
                                         np.ascontiguousarray(gout))


def im2col(xp, kh, kw, stride, ho, wo, backend: str | None = None):
    return get_kernels(backend)[2](np.ascontiguousarray(xp), kh, kw, stride, ho, wo)


def col2im(cols, c, hp, wp, kh, kw, stride, ho, wo, backend: str | None = None):
    return get_kernels(backend)[3](np.ascontiguousarray(cols), c, hp, wp, kh, kw,
                                         stride, ho, wo)
