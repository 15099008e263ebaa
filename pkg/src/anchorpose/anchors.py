"""Dense 3D anchor grid and joint targets.

In-plane coordinates are continuous pixels with pixel ``i`` spanning
``[i, i + 1)``; depth is millimetres relative to the owning hand's root.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_DEPTHS = (-100.0, 0.0, 100.0)
DEPTH_RANGE_MM = 100.0
VALID_RADIUS_MM = 200.0


class AnchorConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AnchorSet:
    """Ordered anchors: row-major over the in-plane lattice, depth fastest.

    ``inplane`` is ``[N, 2]`` (x, y) pixels and ``depth`` is ``[N]`` mm.
    """

    inplane: np.ndarray
    depth: np.ndarray
    stride: int
    depth_values: tuple[float, ...]
    image_size: int

    def __len__(self) -> int:
        return len(self.depth)

    @property
    def coords(self) -> np.ndarray:
        """``[N, 3]`` array of (x, y, depth)."""
        return np.concatenate([self.inplane, self.depth[:, None]], axis=1)

    @property
    def grid_side(self) -> int:
        return self.image_size // self.stride

    def normalized(self) -> np.ndarray:
        """``[N, 3]`` query coordinates in [0, 1]: x/size, y/size, depth mapped from ±100 mm."""
        xy = self.inplane / self.image_size
        d = (self.depth + DEPTH_RANGE_MM) / (2 * DEPTH_RANGE_MM)
        return np.concatenate([xy, d[:, None]], axis=1)

    def to_csv(self) -> str:
        rows = ["x,y,depth"]
        rows += [f"{x:g},{y:g},{d:g}" for x, y, d in self.coords]
        return "\n".join(rows) + "\n"


def depth_grid(count: int) -> tuple[float, ...]:
    """Evenly spaced depth layers across ±100 mm; a single layer sits at 0."""
    if count < 1:
        raise AnchorConfigError("depth count must be >= 1")
    if count == 1:
        return (0.0,)
    return tuple(float(v) for v in np.linspace(-DEPTH_RANGE_MM, DEPTH_RANGE_MM, count))


def generate_anchor_grid(image_size: int, stride: int,
                         depth_values=DEFAULT_DEPTHS) -> AnchorSet:
    if stride <= 0 or image_size <= 0 or image_size % stride:
        raise AnchorConfigError(
            f"stride {stride} must be a positive divisor of image_size {image_size}")
    depth_values = tuple(float(d) for d in depth_values)
    if not depth_values:
        raise AnchorConfigError("depth_values must be non-empty")
    if len(set(depth_values)) != len(depth_values):
        raise AnchorConfigError(f"duplicate depth values in {depth_values}")
    side = image_size // stride
    centers = np.arange(side, dtype=np.float64) * stride + stride / 2.0
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    xy = np.stack([xx.ravel(), yy.ravel()], axis=1)
    nd = len(depth_values)
    inplane = np.repeat(xy, nd, axis=0)
    depth = np.tile(np.asarray(depth_values), side * side)
    return AnchorSet(inplane=inplane, depth=depth, stride=stride,
                     depth_values=depth_values, image_size=image_size)


@dataclass
class JointTarget:
    """Ground-truth joints for one sample.

    ``inplane`` ``[J, 2]`` pixels, ``depth`` ``[J]`` mm relative to the
    owning hand's root, ``valid`` ``[J]`` bool. ``hand_roots`` gives the
    root joint index of each hand; ``hand_of`` maps joint -> hand.
    """

    inplane: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    hand_roots: tuple[int, ...] | None = None
    hand_of: np.ndarray = field(default=None)

    def __post_init__(self):
        self.inplane = np.asarray(self.inplane, dtype=np.float64).reshape(-1, 2)
        self.depth = np.asarray(self.depth, dtype=np.float64).reshape(-1)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if self.hand_roots is None:
            self.hand_roots = default_hand_roots(len(self.depth))
        self.hand_roots = tuple(int(r) for r in self.hand_roots)
        if self.hand_of is None:
            self.hand_of = default_hand_assignment(len(self.depth), len(self.hand_roots))
        self.hand_of = np.asarray(self.hand_of, dtype=np.int64)
        n = len(self.depth)
        if self.inplane.shape[0] != n or self.valid.shape[0] != n or self.hand_of.shape[0] != n:
            raise ValueError("JointTarget arrays disagree on joint count")

    @property
    def num_joints(self) -> int:
        return len(self.depth)


def default_hand_roots(num_joints: int) -> tuple[int, ...]:
    """Root (wrist) is the last joint of each hand; one hand when the count is odd."""
    if num_joints >= 2 and num_joints % 2 == 0:
        return (num_joints // 2 - 1, num_joints - 1)
    return (num_joints - 1,)


def default_hand_assignment(num_joints: int, num_hands: int = 2) -> np.ndarray:
    per = num_joints // num_hands
    return np.minimum(np.arange(num_joints) // max(per, 1), num_hands - 1)


def mark_valid_joints(targets: JointTarget, radius: float = VALID_RADIUS_MM) -> JointTarget:
    """Flag joints more than ``radius`` mm (in depth) from their hand's root as invalid.

    Depth is already root-relative, so the test is ``|depth - depth[root]| <= radius``;
    the boundary itself is valid. Joints already invalid stay invalid.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    roots = np.asarray(targets.hand_roots)[targets.hand_of]
    rel = np.abs(targets.depth - targets.depth[roots])
    return replace(targets, valid=targets.valid & (rel <= radius))


@dataclass
class TargetBatch:
    """Stacked targets: ``inplane [B, J, 2]``, ``depth [B, J]``, ``valid [B, J]``."""

    inplane: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    hand_roots: tuple[int, ...] | None = None
    hand_of: np.ndarray = field(default=None)

    def __post_init__(self):
        self.inplane = np.asarray(self.inplane, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.hand_roots is None:
            self.hand_roots = default_hand_roots(self.depth.shape[-1])
        self.hand_roots = tuple(int(r) for r in self.hand_roots)
        if self.hand_of is None:
            self.hand_of = default_hand_assignment(self.depth.shape[-1], len(self.hand_roots))

    def __len__(self) -> int:
        return self.depth.shape[0]

    @classmethod
    def from_targets(cls, targets) -> "TargetBatch":
        targets = list(targets)
        if isinstance(targets[0], TargetBatch):
            return targets[0]
        first = targets[0]
        return cls(np.stack([t.inplane for t in targets]), np.stack([t.depth for t in targets]),
                   np.stack([t.valid for t in targets]), first.hand_roots, first.hand_of)


def as_target_batch(gt) -> TargetBatch:
    if isinstance(gt, TargetBatch):
        return gt
    if isinstance(gt, JointTarget):
        return TargetBatch(gt.inplane[None], gt.depth[None], gt.valid[None], gt.hand_roots,
                           gt.hand_of)
    return TargetBatch.from_targets(gt)
