"""Small plain-conv pyramid extractor producing four levels at strides 8/16/32/64."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffmath import Conv2d, GroupNorm, Module, Tensor, relu
from .diffmath.functional import ShapeError

LEVEL_STRIDES = (8, 16, 32, 64)


@dataclass
class PyramidFeatures:
    levels: list[Tensor]

    @property
    def d_model(self) -> int:
        return self.levels[0].shape[1]

    @property
    def spatial_shapes(self) -> list[tuple[int, int]]:
        return [tuple(t.shape[2:]) for t in self.levels]


def level_sizes(image_size: int) -> list[int]:
    return [-(-image_size // s) for s in LEVEL_STRIDES]


class _Projection(Module):
    """``depth`` convs (1x1 first, then 3x3) + group norm, to ``d_model`` channels."""

    def __init__(self, rng, cin: int, d_model: int, groups: int, depth: int, dtype):
        self.convs = [Conv2d(rng, cin if i == 0 else d_model, d_model, 1 if i == 0 else 3,
                             dtype=dtype) for i in range(depth)]
        self.norm = GroupNorm(groups, d_model, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        for i, conv in enumerate(self.convs):
            x = conv(x if i == 0 else relu(x))
        return self.norm(x)


class Backbone(Module):
    """Five stride-2 conv stages (each optionally followed by stride-1 convs).

    Stages 3, 4, 5 give strides 8, 16, 32; those maps are projected to
    ``d_model`` channels. The fourth level is a stride-2 3x3 conv on the raw
    stride-32 map followed by group norm.
    """

    def __init__(self, rng, image_size: int = 64, d_model: int = 64,
                 widths=(16, 32, 64, 96, 128), extra_convs: int = 1, gn_groups: int = 8,
                 projection_depth: int = 1, in_channels: int = 3, dtype=np.float32):
        if len(widths) != 5:
            raise ValueError("backbone needs exactly five stage widths")
        self.image_size = image_size
        self.d_model = d_model
        self.stages = []
        cin = in_channels
        for w in widths:
            convs = [Conv2d(rng, cin, w, 3, stride=2, dtype=dtype)]
            convs += [Conv2d(rng, w, w, 3, stride=1, dtype=dtype) for _ in range(extra_convs)]
            self.stages.append(convs)
            cin = w
        # flat alias so parameter discovery sees the nested stage lists
        self.stage_convs = [c for stage in self.stages for c in stage]
        self.projections = [_Projection(rng, widths[i], d_model, gn_groups, projection_depth, dtype)
                            for i in (2, 3, 4)]
        self.extra = Conv2d(rng, widths[4], d_model, 3, stride=2, dtype=dtype)
        self.extra_norm = GroupNorm(gn_groups, d_model, dtype)

    def __call__(self, image) -> PyramidFeatures:
        return extract_pyramid(image, self)


def extract_pyramid(image, params: Backbone) -> PyramidFeatures:
    """Run the backbone on ``[B, 3, H, W]`` (or a single ``[3, H, W]``) image."""
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    s = params.image_size
    if x.ndim != 4 or x.shape[2:] != (s, s):
        raise ShapeError(f"backbone expects [B, C, {s}, {s}] input, got {x.shape}")
    feats = []
    for stage in params.stages:
        for conv in stage:
            x = relu(conv(x))
        feats.append(x)
    c3, c4, c5 = feats[2], feats[3], feats[4]
    levels = [proj(f) for proj, f in zip(params.projections, (c3, c4, c5))]
    levels.append(params.extra_norm(params.extra(c5)))
    return PyramidFeatures(levels)
