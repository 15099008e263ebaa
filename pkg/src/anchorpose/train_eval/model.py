"""The assembled network, including the ablation variants."""
from __future__ import annotations

import numpy as np

from ..anchors import AnchorSet, depth_grid, generate_anchor_grid
from ..attention import Decoder, Encoder
from ..backbone import Backbone
from ..config import TrainConfig
from ..diffmath import MLP, Conv2d, Module, Tensor, bilinear_sample, relu
from ..encoding import AnchorQueryEncoder
from ..head import OffsetBranch, PredictionBundle, WeightBranch, fuse

LEVELS = 4


def dtype_for(cfg: TrainConfig):
    return np.float64 if cfg.precision == "double" else np.float32


def build_anchors(cfg: TrainConfig) -> AnchorSet:
    return generate_anchor_grid(cfg.image_size, cfg.anchor_stride, depth_grid(cfg.depth_count))


class ConvTrunk(Module):
    """Transformer-free path: two 3x3 convs on the stride-8 level, sampled at each anchor."""

    def __init__(self, rng, d_model: int, dtype):
        self.conv1 = Conv2d(rng, d_model, d_model, 3, dtype=dtype)
        self.conv2 = Conv2d(rng, d_model, d_model, 3, dtype=dtype)

    def __call__(self, level: Tensor, anchor_xy: np.ndarray) -> Tensor:
        x = relu(self.conv2(relu(self.conv1(level))))
        b = x.shape[0]
        pts = np.broadcast_to(anchor_xy.astype(x.dtype), (b,) + anchor_xy.shape)
        return bilinear_sample(x, pts).transpose(0, 2, 1)  # [B, A, d]


class DirectHead(Module):
    """Joint regression from anchor embeddings pooled over anchors (no anchor fusion)."""

    def __init__(self, rng, d_model: int, num_joints: int, image_size: int, depth_unit: float,
                 dtype):
        self.num_joints = num_joints
        self.center = image_size / 2
        self.inplane_unit = image_size / 4
        self.depth_unit = depth_unit
        self.mlp = MLP(rng, [d_model, d_model, num_joints * 3], dtype)

    def __call__(self, embeddings: Tensor) -> PredictionBundle:
        pooled = embeddings.mean(axis=1)
        raw = self.mlp(pooled).reshape(pooled.shape[0], self.num_joints, 3)
        ti = raw[..., 0:2] * self.inplane_unit + self.center
        td = raw[..., 2] * self.depth_unit
        return PredictionBundle(None, None, None, None, ti, td)


class AnchorPoseNet(Module):
    def __init__(self, cfg: TrainConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        dtype = dtype_for(cfg)
        self.cfg = cfg
        self.anchors = build_anchors(cfg)
        d = cfg.d_model
        self.backbone = Backbone(rng, cfg.image_size, d, tuple(cfg.backbone_widths),
                                 cfg.backbone_extra_convs, cfg.gn_groups, cfg.projection_depth,
                                 dtype=dtype)
        self.query_encoder = AnchorQueryEncoder(rng, d, dtype=dtype)
        if cfg.transformer_model:
            self.encoder = Encoder(rng, cfg.enc_layers, d, cfg.ffn_dim, cfg.heads, LEVELS,
                                   cfg.points, cfg.msdam, cfg.post_norm, dtype)
            self.decoder = Decoder(rng, cfg.dec_layers, d, cfg.ffn_dim, cfg.heads, LEVELS,
                                   cfg.points, cfg.msdam, cfg.post_norm, dtype)
        else:
            self.trunk = ConvTrunk(rng, d, dtype)
        if cfg.a2j_fusion:
            self.offset_head = OffsetBranch(rng, d, cfg.num_joints, inplane_unit=cfg.inplane_unit,
                                            depth_unit=cfg.offset_unit_mm, dtype=dtype)
            if cfg.learned_weights:
                self.weight_head = WeightBranch(rng, d, cfg.num_joints, dtype=dtype)
        else:
            self.direct_head = DirectHead(rng, d, cfg.num_joints, cfg.image_size,
                                          2 * cfg.offset_unit_mm, dtype)
        self.dtype = dtype

    def anchor_embeddings(self, images) -> Tensor:
        """Final per-anchor embeddings ``[B, A, d]``."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        pyramid = self.backbone(x)
        queries = self.anchors.normalized()
        pos_q = self.query_encoder(queries).reshape((1, len(self.anchors), self.cfg.d_model))
        anchor_xy = queries[:, :2]
        if self.cfg.transformer_model:
            memory = self.encoder(pyramid)
            return self.decoder(pos_q, anchor_xy, memory).embeddings
        return self.trunk(pyramid.levels[0], anchor_xy) + pos_q

    def __call__(self, images) -> PredictionBundle:
        emb = self.anchor_embeddings(images)
        if not self.cfg.a2j_fusion:
            return self.direct_head(emb)
        oi, od = self.offset_head(emb)
        if self.cfg.learned_weights:
            return fuse(self.anchors, oi, od, self.weight_head(emb))
        return fuse(self.anchors, oi, od, None, uniform=True)
