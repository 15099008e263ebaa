"""Multi-scale deformable attention, the feature encoder and the anchor decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import PyramidFeatures
from .diffmath import LayerNorm, Linear, Module, Param, Tensor, concat, relu, softmax
from .diffmath.functional import ShapeError, bilinear_sample_pixels
from .encoding import pe_sinusoidal


@dataclass
class EncoderState:
    """Flattened pyramid tokens, level-major then row-major.

    ``tokens`` is ``[B, N_tok, d]``; ``token_xy`` holds each token's
    normalised cell centre and ``level_index`` its pyramid level.
    ``pos`` is the positional term added to queries (sinusoidal + level
    embedding), ``[1, N_tok, d]``.
    """

    tokens: Tensor
    spatial_shapes: list[tuple[int, int]]
    level_start: list[int]
    token_xy: np.ndarray
    level_index: np.ndarray
    pos: Tensor

    @property
    def num_levels(self) -> int:
        return len(self.spatial_shapes)

    def with_tokens(self, tokens: Tensor) -> "EncoderState":
        return EncoderState(tokens, self.spatial_shapes, self.level_start, self.token_xy,
                            self.level_index, self.pos)


def token_layout(spatial_shapes) -> tuple[np.ndarray, np.ndarray, list[int]]:
    xy, lvl, starts = [], [], []
    start = 0
    for li, (h, w) in enumerate(spatial_shapes):
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        xy.append(np.stack([xs.ravel(), ys.ravel()], axis=1))
        lvl.append(np.full(h * w, li))
        starts.append(start)
        start += h * w
    return np.concatenate(xy), np.concatenate(lvl), starts


def flatten_pyramid(pyramid: PyramidFeatures, level_embed: Param | None = None) -> EncoderState:
    shapes = pyramid.spatial_shapes
    b, d = pyramid.levels[0].shape[:2]
    toks = [lvl.reshape(b, d, -1).transpose(0, 2, 1) for lvl in pyramid.levels]
    tokens = concat(toks, axis=1)
    token_xy, level_index, starts = token_layout(shapes)
    dtype = pyramid.levels[0].dtype
    pos = Tensor(pe_sinusoidal(token_xy, d).astype(dtype)[None])
    if level_embed is not None:
        pos = pos + level_embed[level_index][None]
    return EncoderState(tokens, shapes, starts, token_xy, level_index, pos)


# ---------------------------------------------------------------------------
# attention blocks
# ---------------------------------------------------------------------------

class MSDeformAttn(Module):
    """Deformable attention over ``levels`` maps with ``heads`` x ``points`` samples."""

    def __init__(self, rng, d_model: int, heads: int, levels: int, points: int,
                 dtype=np.float32, radial_init: bool = True):
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        self.d_model, self.heads, self.levels, self.points = d_model, heads, levels, points
        self.value_proj = Linear(rng, d_model, d_model, dtype)
        self.sampling_offsets = Linear(rng, d_model, heads * levels * points * 2, dtype, init="zeros")
        self.attention_weights = Linear(rng, d_model, heads * levels * points, dtype, init="zeros")
        self.output_proj = Linear(rng, d_model, d_model, dtype)
        if not radial_init:
            return
        # initial offsets fan out radially, farther for later points
        theta = np.arange(heads) * (2 * np.pi / heads)
        grid = np.stack([np.cos(theta), np.sin(theta)], -1)
        grid = grid / np.abs(grid).max(-1, keepdims=True)
        grid = np.tile(grid[:, None, None, :], (1, levels, points, 1))
        grid *= np.arange(1, points + 1)[None, None, :, None]
        self.sampling_offsets.bias.data = grid.reshape(-1).astype(dtype)

    def __call__(self, queries: Tensor, reference_points: np.ndarray, value: EncoderState,
                 return_weights: bool = False):
        return msdam(queries, reference_points, value, self, return_weights)


def msdam(queries: Tensor, reference_points, value: EncoderState, params: MSDeformAttn,
          return_weights: bool = False):
    """Deformable attention of ``queries`` ``[B, Nq, d]`` into ``value`` tokens.

    ``reference_points`` are normalised (x, y), shaped ``[B or 1, Nq, L, 2]``.
    Sampling location = reference + offset / (W_l, H_l).
    """
    m, nl, k = params.heads, params.levels, params.points
    b, nq, d = queries.shape
    dh = d // m
    if value.num_levels != nl:
        raise ShapeError(f"msdam configured for {nl} levels, got {value.num_levels}")
    ref = np.asarray(reference_points.data if isinstance(reference_points, Tensor)
                     else reference_points, dtype=queries.dtype)
    if ref.shape[-3:] != (nq, nl, 2):
        raise ShapeError(f"reference points shape {ref.shape} incompatible with {nq} queries "
                         f"and {nl} levels")
    v = params.value_proj(value.tokens)
    offsets = params.sampling_offsets(queries).reshape(b, nq, m, nl, k, 2)
    attn = softmax(params.attention_weights(queries).reshape(b, nq, m, nl * k), -1)
    attn5 = attn.reshape(b, nq, m, nl, k)
    dims = np.array(value.spatial_shapes, dtype=queries.dtype)[:, ::-1].copy()  # (W, H)

    out = None
    for li, (h, w) in enumerate(value.spatial_shapes):
        s = value.level_start[li]
        v_l = v[:, s:s + h * w].reshape(b, h, w, m, dh).transpose(0, 3, 1, 2, 4).reshape(b * m, h, w, dh)
        # pixel-space sampling positions: (ref + off / (W, H)) * (W, H) - 0.5
        base = ref[:, :, None, li, None, :] * dims[li] - 0.5
        pix = offsets[:, :, :, li] + base
        pix = pix.transpose(0, 2, 1, 3, 4).reshape(b * m, nq * k, 2)
        samp = bilinear_sample_pixels(v_l, pix).reshape(b, m, nq, k, dh)
        w_l = attn5[:, :, :, li].transpose(0, 2, 1, 3).reshape(b, m, nq, k, 1)
        contrib = (samp * w_l).sum(axis=3)
        out = contrib if out is None else out + contrib
    out = out.transpose(0, 2, 1, 3).reshape(b, nq, d)
    result = params.output_proj(out)
    if return_weights:
        return result, attn5
    return result


class MultiheadAttention(Module):
    """Dense scaled dot-product attention with separate q/k/v/out projections."""

    def __init__(self, rng, d_model: int, heads: int, dtype=np.float32):
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        self.heads = heads
        self.q_proj = Linear(rng, d_model, d_model, dtype)
        self.k_proj = Linear(rng, d_model, d_model, dtype)
        self.v_proj = Linear(rng, d_model, d_model, dtype)
        self.out_proj = Linear(rng, d_model, d_model, dtype)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
        m = self.heads
        b, nq, d = q.shape
        nk = k.shape[1]
        dh = d // m
        qh = (self.q_proj(q) * (1.0 / np.sqrt(dh))).reshape(b, nq, m, dh).transpose(0, 2, 1, 3)
        kh = self.k_proj(k).reshape(k.shape[0], nk, m, dh).transpose(0, 2, 3, 1)
        vh = self.v_proj(v).reshape(v.shape[0], nk, m, dh).transpose(0, 2, 1, 3)
        weights = softmax(qh @ kh, -1)
        out = (weights @ vh).transpose(0, 2, 1, 3).reshape(b, nq, d)
        out = self.out_proj(out)
        if return_weights:
            return out, weights
        return out


class FeedForward(Module):
    def __init__(self, rng, d_model: int, hidden: int, dtype=np.float32):
        self.lin1 = Linear(rng, d_model, hidden, dtype, init="kaiming")
        self.lin2 = Linear(rng, hidden, d_model, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(relu(self.lin1(x)))


def _sublayer(x: Tensor, fn, norm: LayerNorm, post_norm: bool) -> Tensor:
    if post_norm:
        return norm(x + fn(x))
    return x + fn(norm(x))


class EncoderLayer(Module):
    """Deformable (or dense) self-attention over tokens, then FFN; post-norm by default."""

    def __init__(self, rng, d_model: int, ffn_dim: int, heads: int, levels: int, points: int,
                 use_msdam: bool = True, post_norm: bool = True, dtype=np.float32):
        self.use_msdam = use_msdam
        self.post_norm = post_norm
        if use_msdam:
            self.attn = MSDeformAttn(rng, d_model, heads, levels, points, dtype)
        else:
            self.attn = MultiheadAttention(rng, d_model, heads, dtype)
        self.norm1 = LayerNorm(d_model, dtype)
        self.ffn = FeedForward(rng, d_model, ffn_dim, dtype)
        self.norm2 = LayerNorm(d_model, dtype)

    def __call__(self, state: EncoderState) -> EncoderState:
        nl = state.num_levels
        ref = np.repeat(state.token_xy[None, :, None, :], nl, axis=2)

        def attend(x):
            q = x + state.pos
            if self.use_msdam:
                return self.attn(q, ref, state.with_tokens(x))
            return self.attn(q, q, x)

        x = _sublayer(state.tokens, attend, self.norm1, self.post_norm)
        x = _sublayer(x, self.ffn, self.norm2, self.post_norm)
        return state.with_tokens(x)


class Encoder(Module):
    def __init__(self, rng, num_layers: int, d_model: int, ffn_dim: int, heads: int,
                 levels: int, points: int, use_msdam: bool = True, post_norm: bool = True,
                 dtype=np.float32):
        self.level_embed = Param(rng.normal(size=(levels, d_model)).astype(dtype))
        self.layers = [EncoderLayer(rng, d_model, ffn_dim, heads, levels, points, use_msdam,
                                    post_norm, dtype) for _ in range(num_layers)]

    def __call__(self, pyramid: PyramidFeatures) -> EncoderState:
        return encoder_forward(pyramid, self)


def encoder_forward(pyramid: PyramidFeatures, params: Encoder) -> EncoderState:
    """Flatten the pyramid and run every encoder layer; zero layers returns the tokens as-is."""
    state = flatten_pyramid(pyramid, params.level_embed)
    for layer in params.layers:
        state = layer(state)
    return state


@dataclass
class DecoderState:
    embeddings: Tensor  # [B, N_anchor, d]


class DecoderLayer(Module):
    """Self-attention across anchors, cross-attention into the encoder output, FFN."""

    def __init__(self, rng, d_model: int, ffn_dim: int, heads: int, levels: int, points: int,
                 use_msdam: bool = True, post_norm: bool = True, dtype=np.float32):
        self.use_msdam = use_msdam
        self.post_norm = post_norm
        self.self_attn = MultiheadAttention(rng, d_model, heads, dtype)
        self.norm1 = LayerNorm(d_model, dtype)
        if use_msdam:
            self.cross_attn = MSDeformAttn(rng, d_model, heads, levels, points, dtype)
        else:
            self.cross_attn = MultiheadAttention(rng, d_model, heads, dtype)
        self.norm2 = LayerNorm(d_model, dtype)
        self.ffn = FeedForward(rng, d_model, ffn_dim, dtype)
        self.norm3 = LayerNorm(d_model, dtype)

    def __call__(self, state: DecoderState, pos_q: Tensor, anchor_xy: np.ndarray,
                 memory: EncoderState) -> DecoderState:
        return decoder_layer(state, pos_q, anchor_xy, memory, self)


def decoder_layer(state: DecoderState, pos_q: Tensor, anchor_xy: np.ndarray,
                  memory: EncoderState, params: DecoderLayer) -> DecoderState:
    """One anchor-interaction layer.

    Self-attention uses Q = K = D + P_q, V = D. Cross-attention uses
    Q = D + P_q with each anchor's normalised (x, y) as the reference point
    on every level and the encoder tokens as values.
    """
    nl = memory.num_levels
    ref = np.repeat(np.asarray(anchor_xy)[None, :, None, :], nl, axis=2)

    def self_attend(x):
        q = x + pos_q
        return params.self_attn(q, q, x)

    def cross_attend(x):
        q = x + pos_q
        if params.use_msdam:
            return params.cross_attn(q, ref, memory)
        return params.cross_attn(q, memory.tokens + memory.pos, memory.tokens)

    x = _sublayer(state.embeddings, self_attend, params.norm1, params.post_norm)
    x = _sublayer(x, cross_attend, params.norm2, params.post_norm)
    x = _sublayer(x, params.ffn, params.norm3, params.post_norm)
    return DecoderState(x)


class Decoder(Module):
    """Initial gather of encoder features at each anchor, then stacked decoder layers."""

    def __init__(self, rng, num_layers: int, d_model: int, ffn_dim: int, heads: int,
                 levels: int, points: int, use_msdam: bool = True, post_norm: bool = True,
                 dtype=np.float32):
        self.use_msdam = use_msdam
        if use_msdam:
            # starts by reading the encoder output exactly at each anchor
            self.init_attn = MSDeformAttn(rng, d_model, heads, levels, points, dtype,
                                          radial_init=False)
        else:
            self.init_attn = MultiheadAttention(rng, d_model, heads, dtype)
        self.layers = [DecoderLayer(rng, d_model, ffn_dim, heads, levels, points, use_msdam,
                                    post_norm, dtype) for _ in range(num_layers)]

    def initial_embeddings(self, pos_q: Tensor, anchor_xy: np.ndarray,
                           memory: EncoderState) -> DecoderState:
        b = memory.tokens.shape[0]
        q = pos_q if pos_q.shape[0] == b else pos_q + Tensor(
            np.zeros((b,) + pos_q.shape[1:], dtype=pos_q.dtype))
        if self.use_msdam:
            ref = np.repeat(np.asarray(anchor_xy)[None, :, None, :], memory.num_levels, axis=2)
            return DecoderState(self.init_attn(q, ref, memory))
        return DecoderState(self.init_attn(q, memory.tokens + memory.pos, memory.tokens))

    def __call__(self, pos_q: Tensor, anchor_xy: np.ndarray, memory: EncoderState) -> DecoderState:
        state = self.initial_embeddings(pos_q, anchor_xy, memory)
        for layer in self.layers:
            state = layer(state, pos_q, anchor_xy, memory)
        return state
