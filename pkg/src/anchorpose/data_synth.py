"""Synthetic two-hand samples and the binary dataset container.

Hands are 21-joint kinematic chains (per finger: tip, distal, proximal,
base; wrist last), posed in millimetres, projected orthographically and
rendered as Gaussian blobs joined by faint bones. Targets are exact.

Binary layout (little-endian)::

    header:  magic b"APDS" | u16 version | u16 reserved | u32 count
             u16 image_size | u16 channels | u16 joint_count | u16 num_hands
             f32 mm_per_px | u16 hand_roots[num_hands]
    record:  u32 payload_len | payload
    payload: u64 seed | u8 flags (bit0 overlap) | u8 hands_present | u16 reserved
             u8 image[C*H*W] | f32 inplane[J*2] | f32 depth[J] | u8 valid[J]
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anchors import JointTarget, TargetBatch, mark_valid_joints

JOINTS_PER_HAND = 21
MAGIC = b"APDS"
VERSION = 1

# palm-frame geometry of a right hand, mm; +y points from wrist to fingers
_FINGER_BASES = np.array([[-24.0, 22.0], [-17.0, 82.0], [0.0, 86.0], [16.0, 80.0], [30.0, 70.0]])
_FINGER_ANGLES = np.array([-0.75, -0.12, 0.0, 0.12, 0.26])
_BONE_LENGTHS = np.array([[34.0, 30.0, 24.0], [40.0, 25.0, 20.0], [45.0, 28.0, 22.0],
                          [42.0, 26.0, 20.0], [33.0, 20.0, 18.0]])


class DatasetError(IOError):
    pass


@dataclass(frozen=True)
class SyntheticHandConfig:
    image_size: int = 64
    joints_per_hand: int = JOINTS_PER_HAND
    field_of_view_mm: float = 480.0
    bone_scale_range: tuple[float, float] = (0.85, 1.1)
    flexion_range: tuple[float, float] = (0.0, 1.2)
    spread_range: tuple[float, float] = (-0.2, 0.2)
    roll_range: tuple[float, float] = (-0.8, 0.8)
    pitch_range: tuple[float, float] = (-1.0, 1.0)
    yaw_range: tuple[float, float] = (-0.8, 0.8)
    overlap_probability: float = 0.3
    single_hand_probability: float = 0.2
    blob_sigma: float = 1.0
    bone_sigma: float = 0.6
    bone_intensity: float = 0.35
    noise_std: float = 0.02
    valid_radius_mm: float = 200.0
    margin_px: float = 2.0

    def __post_init__(self):
        if self.joints_per_hand != JOINTS_PER_HAND:
            raise ValueError("the skeleton model has exactly 21 joints per hand")
        if not 0.0 <= self.overlap_probability <= 1.0:
            raise ValueError("overlap_probability must lie in [0, 1]")
        if not 0.0 <= self.single_hand_probability <= 1.0:
            raise ValueError("single_hand_probability must lie in [0, 1]")

    @property
    def num_joints(self) -> int:
        return 2 * self.joints_per_hand

    @property
    def mm_per_px(self) -> float:
        return self.field_of_view_mm / self.image_size

    @property
    def hand_roots(self) -> tuple[int, int]:
        return (JOINTS_PER_HAND - 1, 2 * JOINTS_PER_HAND - 1)


@dataclass
class SampleRecord:
    image: np.ndarray  # [3, H, W] float32 in [0, 1], multiples of 1/255
    targets: JointTarget
    seed: int
    metadata: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------

def _rot(axis: str, a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def hand_skeleton(rng: np.random.Generator, cfg: SyntheticHandConfig, left: bool) -> np.ndarray:
    """Posed 21x3 joint positions (mm) in camera axes, wrist at the origin.

    Camera axes: x right, y down (image rows), z away from the camera.
    """
    scale = rng.uniform(*cfg.bone_scale_range)
    joints = np.zeros((JOINTS_PER_HAND, 3))
    for f in range(5):
        spread = _FINGER_ANGLES[f] + rng.uniform(*cfg.spread_range)
        flex = rng.uniform(*cfg.flexion_range, size=3)
        if f == 0:
            flex *= 0.6
        base = np.array([_FINGER_BASES[f, 0], _FINGER_BASES[f, 1], 0.0]) * scale
        inplane = np.array([np.sin(spread), np.cos(spread), 0.0])
        chain = [base]
        phi = 0.0
        for bone in range(3):
            phi += flex[bone]
            # curling bends the finger toward the palm normal (-z)
            d = np.cos(phi) * inplane + np.sin(phi) * np.array([0.0, 0.0, -1.0])
            chain.append(chain[-1] + d * _BONE_LENGTHS[f, bone] * scale)
        # stored tip first, base last
        joints[4 * f:4 * f + 4] = np.array(chain[::-1])
    if left:
        joints[:, 0] *= -1
    rot = (_rot("z", rng.uniform(*cfg.roll_range)) @ _rot("x", rng.uniform(*cfg.pitch_range))
           @ _rot("y", rng.uniform(*cfg.yaw_range)))
    joints = joints @ rot.T
    # hand frame y points to the fingers; image y points down
    joints[:, 1] *= -1
    return joints


def _bbox(px: np.ndarray) -> tuple[float, float, float, float]:
    return px[:, 0].min(), px[:, 1].min(), px[:, 0].max(), px[:, 1].max()


def _boxes_overlap(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _place(rng, cfg: SyntheticHandConfig, hands: list[np.ndarray], overlap: bool):
    """Translate each hand's pixel coordinates into the image; returns shifted copies or None."""
    size, m = cfg.image_size, cfg.margin_px
    px = [h[:, :2] / cfg.mm_per_px for h in hands]
    boxes = [_bbox(p) for p in px]
    widths = [b[2] - b[0] for b in boxes]
    heights = [b[3] - b[1] for b in boxes]
    if max(widths) > size - 2 * m or max(heights) > size - 2 * m:
        return None

    def y_shift(i):
        return rng.uniform(m, size - m - heights[i]) - boxes[i][1]

    if len(px) == 1:
        x0 = rng.uniform(m, size - m - widths[0]) - boxes[0][0]
        return [px[0] + [x0, y_shift(0)]]
    if not overlap:
        gap = 1.0
        slack = size - 2 * m - gap - widths[0] - widths[1]
        if slack < 0:
            return None
        u = np.sort(rng.uniform(0, slack, size=2))
        xl = m + u[0]
        xr = xl + widths[0] + gap + (u[1] - u[0])
        return [px[0] + [xl - boxes[0][0], y_shift(0)], px[1] + [xr - boxes[1][0], y_shift(1)]]
    first = px[0] + [rng.uniform(m, size - m - widths[0]) - boxes[0][0], y_shift(0)]
    b0 = _bbox(first)
    cx0, cy0 = (b0[0] + b0[2]) / 2, (b0[1] + b0[3]) / 2
    cx = cx0 + rng.uniform(-0.35, 0.35) * (widths[0] + widths[1]) / 2
    cy = cy0 + rng.uniform(-0.35, 0.35) * (heights[0] + heights[1]) / 2
    cx = np.clip(cx, m + widths[1] / 2, size - m - widths[1] / 2)
    cy = np.clip(cy, m + heights[1] / 2, size - m - heights[1] / 2)
    second = px[1] + [cx - (boxes[1][0] + boxes[1][2]) / 2, cy - (boxes[1][1] + boxes[1][3]) / 2]
    return [first, second]


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

_BONES = [(4 * f + k, 4 * f + k + 1) for f in range(5) for k in range(3)] + \
         [(4 * f + 3, JOINTS_PER_HAND - 1) for f in range(5)]


def _finger_code(j: int) -> float:
    return 1.0 if j == JOINTS_PER_HAND - 1 else (j // 4 + 1) / 6.0


def depth_intensity(depth_mm: np.ndarray) -> np.ndarray:
    """Nearer joints (negative root-relative depth) render brighter."""
    return 1.0 - 0.6 * (np.clip(depth_mm, -200, 200) + 200) / 400


def render_hand(size: int, px: np.ndarray, depth: np.ndarray, left: bool,
                cfg: SyntheticHandConfig) -> tuple[np.ndarray, np.ndarray]:
    """Premultiplied colour ``[3, H, W]`` and coverage ``[H, W]`` for one hand."""
    centers = np.arange(size) + 0.5
    gx, gy = np.meshgrid(centers, centers, indexing="xy")
    hand_mix = np.array([1.0, 0.2]) if left else np.array([0.2, 1.0])
    inten = depth_intensity(depth)
    cov_list, col_list = [], []
    for j in range(len(px)):
        d2 = (gx - px[j, 0]) ** 2 + (gy - px[j, 1]) ** 2
        g = inten[j] * np.exp(-d2 / (2 * cfg.blob_sigma ** 2))
        cov_list.append(g)
        col_list.append(np.array([hand_mix[0], hand_mix[1], _finger_code(j)]))
    for a, b in _BONES:
        pa, pb = px[a], px[b]
        seg = pb - pa
        t = ((gx - pa[0]) * seg[0] + (gy - pa[1]) * seg[1]) / max(seg @ seg, 1e-9)
        t = np.clip(t, 0, 1)
        d2 = (gx - pa[0] - t * seg[0]) ** 2 + (gy - pa[1] - t * seg[1]) ** 2
        g = cfg.bone_intensity * 0.5 * (inten[a] + inten[b]) * np.exp(-d2 / (2 * cfg.bone_sigma ** 2))
        cov_list.append(g)
        col_list.append(np.array([hand_mix[0], hand_mix[1], _finger_code(b if b < 20 else a)]))
    cov = np.stack(cov_list)
    cols = np.stack(col_list)
    alpha = np.clip(cov.max(axis=0), 0, 1)
    wsum = cov.sum(axis=0) + 1e-12
    color = np.einsum("ehw,ec->chw", cov, cols) / wsum * alpha
    return color, alpha


def render_joint_blob(size: int, x: float, y: float, sigma: float = 1.0) -> np.ndarray:
    """A single Gaussian blob as used for joints, for inspection and tests."""
    centers = np.arange(size) + 0.5
    gx, gy = np.meshgrid(centers, centers, indexing="xy")
    return np.exp(-((gx - x) ** 2 + (gy - y) ** 2) / (2 * sigma ** 2))


# ---------------------------------------------------------------------------
# sample generation
# ---------------------------------------------------------------------------

def generate_sample(cfg: SyntheticHandConfig = SyntheticHandConfig(), seed: int = 0) -> SampleRecord:
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    want_overlap = rng.uniform() < cfg.overlap_probability
    single = rng.uniform() < cfg.single_hand_probability
    present = [True, True]
    if single:
        present[int(rng.integers(2))] = False
    hands_idx = [h for h in range(2) if present[h]]

    placed = None
    for _ in range(200):
        skel = [hand_skeleton(rng, cfg, left=(h == 0)) for h in hands_idx]
        placed = _place(rng, cfg, skel, want_overlap)
        if placed is not None:
            break
    if placed is None:
        raise RuntimeError(f"could not place hands for seed {seed}")

    J = cfg.num_joints
    inplane = np.zeros((J, 2))
    depth = np.zeros(J)
    valid = np.zeros(J, dtype=bool)
    for h, skeleton, px in zip(hands_idx, skel, placed):
        sl = slice(h * JOINTS_PER_HAND, (h + 1) * JOINTS_PER_HAND)
        inplane[sl] = px
        depth[sl] = skeleton[:, 2] - skeleton[-1, 2]
        valid[sl] = True
    # stored precision is float32
    inplane = inplane.astype(np.float32).astype(np.float64)
    depth = depth.astype(np.float32).astype(np.float64)
    inside = (inplane >= 0).all(1) & (inplane < size).all(1)
    targets = mark_valid_joints(
        JointTarget(inplane, depth, valid & inside, cfg.hand_roots), cfg.valid_radius_mm)

    # back-to-front: the hand with the larger absolute root depth first
    root_depth = {h: rng.uniform(400, 700) for h in hands_idx}
    image = np.zeros((3, size, size))
    for h in sorted(hands_idx, key=lambda k: -root_depth[k]):
        sl = slice(h * JOINTS_PER_HAND, (h + 1) * JOINTS_PER_HAND)
        color, alpha = render_hand(size, inplane[sl], depth[sl], left=(h == 0), cfg=cfg)
        image = image * (1 - alpha) + color
    if cfg.noise_std > 0:
        image = image + rng.normal(0, cfg.noise_std, size=image.shape)
    image = np.round(np.clip(image, 0, 1) * 255).astype(np.float32) / np.float32(255)

    overlap = False
    if len(hands_idx) == 2:
        overlap = _boxes_overlap(_bbox(placed[0]), _bbox(placed[1]))
    meta = {"overlap": bool(overlap), "num_hands": len(hands_idx),
            "hands_present": tuple(present), "mm_per_px": cfg.mm_per_px}
    return SampleRecord(image, targets, int(seed), meta)


def generate_dataset(cfg: SyntheticHandConfig, count: int, seed: int = 0) -> list[SampleRecord]:
    """``count`` samples with per-sample seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32) if count else []
    return [generate_sample(cfg, int(s)) for s in seeds]


@dataclass
class SampleArrays:
    """Dense arrays for a list of records, as consumed by training and evaluation."""

    images: np.ndarray
    targets: TargetBatch
    num_hands: np.ndarray
    mm_per_px: float

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "SampleArrays":
        t = self.targets
        return SampleArrays(self.images[idx],
                            TargetBatch(t.inplane[idx], t.depth[idx], t.valid[idx],
                                        t.hand_roots, t.hand_of),
                            self.num_hands[idx], self.mm_per_px)


def stack_records(records: list[SampleRecord], mm_per_px: float | None = None) -> SampleArrays:
    if not records:
        raise ValueError("dataset is empty")
    mmpp = mm_per_px if mm_per_px is not None else records[0].metadata.get("mm_per_px", 1.0)
    return SampleArrays(np.stack([r.image for r in records]).astype(np.float32),
                        TargetBatch.from_targets([r.targets for r in records]),
                        np.array([r.metadata.get("num_hands", 2) for r in records]),
                        float(mmpp))


def records_from_arrays(images, inplane, depth, valid, mm_per_px: float,
                        hand_roots=(20, 41), seeds=None) -> list[SampleRecord]:
    """Wrap externally prepared crops (e.g. real two-hand data) as records.

    ``images`` ``[N, 3, H, W]`` in [0, 1]; ``inplane`` ``[N, J, 2]`` px;
    ``depth`` ``[N, J]`` mm relative to each hand's root; ``valid`` ``[N, J]``.
    """
    images = np.asarray(images, dtype=np.float32)
    out = []
    for i in range(len(images)):
        t = JointTarget(inplane[i], depth[i], valid[i], tuple(hand_roots))
        n_hands = int(sum(t.valid[t.hand_of == h].any() for h in range(len(t.hand_roots))))
        out.append(SampleRecord(images[i], t, int(seeds[i]) if seeds is not None else i,
                                {"overlap": False, "num_hands": n_hands,
                                 "hands_present": tuple(bool(t.valid[t.hand_of == h].any())
                                                        for h in range(len(t.hand_roots))),
                                 "mm_per_px": float(mm_per_px)}))
    return out


# ---------------------------------------------------------------------------
# binary container
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHHIHHHHf")
_REC_HEAD = struct.Struct("<QBBH")


def write_dataset(records: list[SampleRecord], path, image_size: int | None = None,
                  num_joints: int | None = None, mm_per_px: float | None = None,
                  hand_roots=None) -> None:
    records = list(records)
    first = records[0] if records else None
    size = image_size or (first.image.shape[-1] if first else 0)
    channels = first.image.shape[0] if first else 3
    joints = num_joints or (first.targets.num_joints if first else 0)
    roots = tuple(hand_roots or (first.targets.hand_roots if first else ()))
    mmpp = mm_per_px or (first.metadata.get("mm_per_px", 1.0) if first else 1.0)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, 0, len(records), size, channels, joints, len(roots),
                              mmpp))
        fh.write(struct.pack(f"<{len(roots)}H", *roots))
        for i, rec in enumerate(records):
            if rec.image.shape != (channels, size, size) or rec.targets.num_joints != joints:
                raise DatasetError(f"record {i}: shape does not match dataset header")
            present = rec.metadata.get("hands_present", (True,) * len(roots))
            flags = int(bool(rec.metadata.get("overlap", False)))
            mask = sum(1 << h for h, p in enumerate(present) if p)
            img = np.round(np.clip(rec.image, 0, 1) * 255).astype(np.uint8)
            payload = b"".join([
                _REC_HEAD.pack(rec.seed, flags, mask, 0),
                img.tobytes(),
                rec.targets.inplane.astype("<f4").tobytes(),
                rec.targets.depth.astype("<f4").tobytes(),
                rec.targets.valid.astype(np.uint8).tobytes(),
            ])
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)


def read_dataset(path) -> list[SampleRecord]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, version, _, count, size, channels, joints, n_roots, mmpp = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    if len(blob) < off + 2 * n_roots:
        raise DatasetError(f"{path}: truncated header")
    roots = struct.unpack_from(f"<{n_roots}H", blob, off)
    off += 2 * n_roots
    n_img = channels * size * size
    expect = _REC_HEAD.size + n_img + joints * 4 * 3 + joints
    records = []
    for i in range(count):
        if len(blob) < off + 4:
            raise DatasetError(f"{path}: record {i}: truncated length prefix")
        (length,) = struct.unpack_from("<I", blob, off)
        off += 4
        if length != expect:
            raise DatasetError(f"{path}: record {i}: payload length {length} != {expect}")
        if len(blob) < off + length:
            raise DatasetError(f"{path}: record {i}: truncated payload")
        seed, flags, mask, _ = _REC_HEAD.unpack_from(blob, off)
        p = off + _REC_HEAD.size
        img = np.frombuffer(blob, np.uint8, n_img, p).reshape(channels, size, size)
        p += n_img
        inplane = np.frombuffer(blob, "<f4", joints * 2, p).reshape(joints, 2)
        p += joints * 8
        depth = np.frombuffer(blob, "<f4", joints, p)
        p += joints * 4
        valid = np.frombuffer(blob, np.uint8, joints, p).astype(bool)
        off += length
        present = tuple(bool(mask >> h & 1) for h in range(n_roots))
        targets = JointTarget(inplane.astype(np.float64), depth.astype(np.float64), valid, roots)
        records.append(SampleRecord(
            img.astype(np.float32) / np.float32(255), targets, int(seed),
            {"overlap": bool(flags & 1), "num_hands": int(sum(present)),
             "hands_present": present, "mm_per_px": float(mmpp)}))
    if off != len(blob):
        raise DatasetError(f"{path}: {len(blob) - off} trailing bytes after record {count - 1}")
    return records
