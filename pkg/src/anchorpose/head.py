"""Per-anchor offset and weight branches and their weighted fusion into joints."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import AnchorSet
from .diffmath import MLP, Module, Tensor, softmax
from .diffmath.functional import ShapeError


@dataclass
class PredictionBundle:
    """Batched per-anchor predictions and fused joints.

    Shapes (B = batch, A = anchors, J = joints): ``offsets_inplane``
    ``[B, A, J, 2]`` px, ``offsets_depth`` ``[B, A, J]`` mm, ``raw_weights``
    and ``norm_weights`` ``[B, A, J]``, ``joints_inplane`` ``[B, J, 2]`` px,
    ``joints_depth`` ``[B, J]`` mm. ``raw_weights``/``norm_weights`` may be
    ``None`` for heads that regress joints directly.
    """

    offsets_inplane: Tensor | None
    offsets_depth: Tensor | None
    raw_weights: Tensor | None
    norm_weights: Tensor | None
    joints_inplane: Tensor
    joints_depth: Tensor

    def joints_numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.joints_inplane.data, self.joints_depth.data


class OffsetBranch(Module):
    """MLP mapping each anchor embedding to ``J x 3`` offsets.

    Raw outputs are multiplied by fixed unit scales (``inplane_unit`` px,
    ``depth_unit`` mm) so that an O(1) activation spans a useful offset.
    """

    def __init__(self, rng, d_model: int, num_joints: int, hidden: int | None = None,
                 inplane_unit: float = 1.0, depth_unit: float = 1.0, dtype=np.float32):
        self.num_joints = num_joints
        self.inplane_unit = float(inplane_unit)
        self.depth_unit = float(depth_unit)
        self.mlp = MLP(rng, [d_model, hidden or d_model, num_joints * 3], dtype)

    def __call__(self, embeddings: Tensor) -> tuple[Tensor, Tensor]:
        return offset_branch(embeddings, self)


def offset_branch(embeddings: Tensor, params: OffsetBranch) -> tuple[Tensor, Tensor]:
    raw = params.mlp(embeddings)
    lead = raw.shape[:-1]
    raw = raw.reshape(lead + (params.num_joints, 3))
    scale = np.array([params.inplane_unit, params.inplane_unit, params.depth_unit],
                     dtype=raw.dtype)
    scaled = raw * scale
    return scaled[..., 0:2], scaled[..., 2]


class WeightBranch(Module):
    def __init__(self, rng, d_model: int, num_joints: int, hidden: int | None = None,
                 dtype=np.float32):
        self.mlp = MLP(rng, [d_model, hidden or d_model, num_joints], dtype)

    def __call__(self, embeddings: Tensor) -> Tensor:
        return weight_branch(embeddings, self)


def weight_branch(embeddings: Tensor, params: WeightBranch) -> Tensor:
    return params.mlp(embeddings)


def fuse(anchors: AnchorSet, offsets_inplane: Tensor, offsets_depth: Tensor,
         raw_weights: Tensor | None, uniform: bool = False) -> PredictionBundle:
    """Softmax the raw weights over anchors and take the weighted sum of anchor + offset.

    With ``uniform=True`` every normalised weight is exactly ``1 / A``.
    Unbatched ``[A, J, ...]`` inputs are accepted and gain a batch axis.
    """
    oi, od = offsets_inplane, offsets_depth
    if oi.ndim == 3:
        oi, od = oi.reshape((1,) + oi.shape), od.reshape((1,) + od.shape)
        if raw_weights is not None:
            raw_weights = raw_weights.reshape((1,) + raw_weights.shape)
    n_anchor = len(anchors)
    if oi.shape[1] != n_anchor or od.shape[1] != n_anchor or oi.shape[-1] != 2:
        raise ShapeError(f"anchor ordering mismatch: {n_anchor} anchors vs offsets "
                         f"{oi.shape} / {od.shape}")
    dtype = oi.dtype
    if uniform:
        norm = Tensor(np.full(od.shape, 1.0 / n_anchor, dtype=dtype))
    else:
        if raw_weights is None or raw_weights.shape != od.shape:
            raise ShapeError(f"anchor ordering mismatch: weights "
                             f"{None if raw_weights is None else raw_weights.shape} vs {od.shape}")
        norm = softmax(raw_weights, axis=1)
    ci = anchors.inplane.astype(dtype)[None, :, None, :]
    cd = anchors.depth.astype(dtype)[None, :, None]
    ti = ((oi + ci) * norm.reshape(norm.shape + (1,))).sum(axis=1)
    td = ((od + cd) * norm).sum(axis=1)
    return PredictionBundle(oi, od, raw_weights, norm, ti, td)
