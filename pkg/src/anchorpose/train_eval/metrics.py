"""Root-aligned 3D joint error (MPJPE / EPE).

Alignment is translation only: for each hand the root residual is
subtracted from every joint residual of that hand. The root itself
(error 0 after alignment) is left out of the mean. In-plane pixels are
converted to millimetres with ``mm_per_px``; depth is already in mm.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..anchors import as_target_batch


@dataclass
class MetricReport:
    """Errors in mm. A field is ``None`` when no valid joint contributes to it."""

    mpjpe_all: float | None
    mpjpe_single: float | None
    mpjpe_two: float | None
    epe: float | None
    per_joint: np.ndarray
    count: int

    def as_dict(self) -> dict:
        return {"mpjpe_all": self.mpjpe_all, "mpjpe_single": self.mpjpe_single,
                "mpjpe_two": self.mpjpe_two, "epe": self.epe, "count": self.count}

    def format(self) -> str:
        def f(v):
            return "absent" if v is None else f"{v:.3f}"
        return (f"MPJPE all {f(self.mpjpe_all)} mm | single {f(self.mpjpe_single)} mm | "
                f"two {f(self.mpjpe_two)} mm | EPE {f(self.epe)} mm | joints {self.count}")


def aligned_errors(pred_inplane, pred_depth, gt, mm_per_px: float = 1.0):
    """Per-joint aligned distances ``[B, J]`` and the mask of joints that count."""
    gt = as_target_batch(gt)
    pi = np.asarray(pred_inplane, dtype=np.float64)
    pd = np.asarray(pred_depth, dtype=np.float64)
    if pi.ndim == 2:
        pi, pd = pi[None], pd[None]
    if pi.shape != gt.inplane.shape or pd.shape != gt.depth.shape:
        raise ValueError(f"prediction shape {pi.shape}/{pd.shape} does not match targets "
                         f"{gt.inplane.shape}/{gt.depth.shape}")
    scale = np.array([mm_per_px, mm_per_px, 1.0])
    res = (np.concatenate([pi, pd[..., None]], -1)
           - np.concatenate([gt.inplane, gt.depth[..., None]], -1)) * scale
    roots = np.asarray(gt.hand_roots)[gt.hand_of]            # [J]
    aligned = res - res[:, roots]
    dist = np.linalg.norm(aligned, axis=-1)
    root_ok = gt.valid[:, roots]
    is_root = np.arange(gt.depth.shape[1]) == roots
    mask = gt.valid & root_ok & ~is_root[None]
    return dist, mask


def _mean(dist, mask) -> float | None:
    n = int(mask.sum())
    return float(dist[mask].sum() / n) if n else None


def mpjpe(pred_inplane, pred_depth, gt, mm_per_px: float = 1.0, num_hands=None) -> MetricReport:
    """Pooled mean over valid non-root joints; partitions follow ``num_hands`` per sample."""
    dist, mask = aligned_errors(pred_inplane, pred_depth, gt, mm_per_px)
    if num_hands is None:
        num_hands = np.full(dist.shape[0], 2)
    num_hands = np.asarray(num_hands).reshape(-1)
    allv = _mean(dist, mask)
    single = _mean(dist, mask & (num_hands == 1)[:, None])
    two = _mean(dist, mask & (num_hands == 2)[:, None])
    counts = mask.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_joint = np.where(counts > 0, (dist * mask).sum(axis=0) / np.maximum(counts, 1), np.nan)
    return MetricReport(allv, single, two, allv, per_joint, int(mask.sum()))


def epe(pred_inplane, pred_depth, gt, mm_per_px: float = 1.0) -> float | None:
    dist, mask = aligned_errors(pred_inplane, pred_depth, gt, mm_per_px)
    return _mean(dist, mask)
