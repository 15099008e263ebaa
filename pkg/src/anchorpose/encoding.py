"""Sinusoidal positional encodings and the shared anchor-query MLP."""
from __future__ import annotations

import numpy as np

from .diffmath import MLP, Module, Tensor

TEMPERATURE = 10000.0
SCALE = 2 * np.pi


class EncodingConfigError(ValueError):
    pass


def pe_sinusoidal(coords, d_out: int, temperature: float = TEMPERATURE) -> np.ndarray:
    """Encode each coordinate into ``d_out / ncoord`` interleaved sin/cos features.

    ``coords`` is ``[..., ncoord]`` with values nominally in [0, 1]. Blocks are
    concatenated in coordinate order; within a block entry ``2k`` is
    ``sin(2*pi*c / T**(2k/n))`` and ``2k + 1`` the matching cosine.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 0:
        coords = coords[None]
    ncoord = coords.shape[-1]
    if ncoord == 0 or d_out % (2 * ncoord):
        raise EncodingConfigError(
            f"d_out={d_out} must be divisible by 2 x {ncoord} coordinates")
    n = d_out // ncoord
    dim_t = temperature ** (2 * (np.arange(n) // 2) / n)
    phase = coords[..., :, None] * SCALE / dim_t
    out = np.empty(phase.shape, dtype=np.float64)
    out[..., 0::2] = np.sin(phase[..., 0::2])
    out[..., 1::2] = np.cos(phase[..., 1::2])
    return out.reshape(coords.shape[:-1] + (d_out,))


def query_pe_width(d_model: int) -> int:
    """Width of the raw 3-coordinate query encoding fed to the shared MLP."""
    if d_model % 2:
        raise EncodingConfigError(f"d_model={d_model} must be even")
    return 3 * d_model // 2


class AnchorQueryEncoder(Module):
    """``P_q = MLP(PE(a_q))`` with one MLP shared by every query and layer."""

    def __init__(self, rng, d_model: int, hidden: int | None = None, dtype=np.float32):
        self.d_model = d_model
        self.mlp = MLP(rng, [query_pe_width(d_model), hidden or d_model, d_model], dtype)

    def __call__(self, anchor_queries: np.ndarray) -> Tensor:
        pe = pe_sinusoidal(anchor_queries, query_pe_width(self.d_model))
        return self.mlp(Tensor(pe.astype(self.mlp.layers[0].weight.dtype)))


def anchor_query_encoding(anchor_queries: np.ndarray, encoder: AnchorQueryEncoder) -> Tensor:
    return encoder(anchor_queries)
