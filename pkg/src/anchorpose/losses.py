"""Joint estimation loss, anchor surrounding loss and their weighted total.

Vector residuals are handled by summing the scalar kernel over coordinates.
Each loss is a sum over valid joints divided by the number of valid joints
in the batch, so scale does not depend on joint count or batch size.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import AnchorSet, as_target_batch
from .diffmath import Tensor
from .diffmath.tensor import make_result
from .head import PredictionBundle


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    tau1: float = 1.0
    tau2: float = 3.0
    lambda1: float = 3.0
    lambda2: float = 1.0

    def __post_init__(self):
        for key in ("alpha", "tau1", "tau2", "lambda1", "lambda2"):
            if not getattr(self, key) > 0:
                raise ValueError(f"LossConfig.{key} must be positive, got {getattr(self, key)}")


@dataclass
class LossReport:
    loss1: float
    loss2: float
    total: float
    per_joint: np.ndarray | None = None
    total_tensor: Tensor | None = None


def smooth_l1_tau(x, tau: float):
    """``x^2 / (2 tau)`` inside ``|x| < tau``, ``|x| - tau / 2`` outside.

    Works on floats, numpy arrays and tensors (tensors get a fused backward).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not isinstance(x, Tensor):
        a = np.abs(np.asarray(x, dtype=np.float64))
        out = np.where(a < tau, a * a / (2 * tau), a - tau / 2)
        return float(out) if out.ndim == 0 else out
    xd = x.data
    a = np.abs(xd)
    inside = a < tau
    out = np.where(inside, xd * xd / (2 * tau), a - tau / 2).astype(xd.dtype, copy=False)

    def backward(g):
        return (g * np.where(inside, xd / tau, np.sign(xd)),)

    return make_result(out, (x,), backward)


def _valid_mask(gt, dtype) -> tuple[np.ndarray, float]:
    valid = gt.valid.astype(dtype)
    return valid, float(valid.sum())


def _kernel_terms(pred_i: Tensor, pred_d: Tensor, gt, cfg: LossConfig, alpha: float):
    """Per-(sample, joint) kernel sums, masked by validity: ``[B, J]``."""
    dtype = pred_i.dtype
    ri = pred_i - gt.inplane.astype(dtype)
    rd = pred_d - gt.depth.astype(dtype)
    per = smooth_l1_tau(ri, cfg.tau1).sum(axis=-1) * alpha + smooth_l1_tau(rd, cfg.tau2)
    valid, _ = _valid_mask(gt, dtype)
    return per * valid


def _reduce(per: Tensor, gt) -> Tensor:
    n_valid = max(float(gt.valid.sum()), 1.0)
    return per.sum() * (1.0 / n_valid)


def joint_estimation_loss(pred: PredictionBundle, gt, cfg: LossConfig = LossConfig()) -> Tensor:
    """alpha * sum_j L_tau1(in-plane residual) + sum_j L_tau2(depth residual), per valid joint."""
    gt = as_target_batch(gt)
    ti, td = pred.joints_inplane, pred.joints_depth
    if ti.ndim == 2:
        ti, td = ti.reshape((1,) + ti.shape), td.reshape((1,) + td.shape)
    return _reduce(_kernel_terms(ti, td, gt, cfg, cfg.alpha), gt)


def anchor_centroids(norm_weights: Tensor, anchors: AnchorSet) -> tuple[Tensor, Tensor]:
    """Weighted anchor positions without offsets: ``[B, J, 2]`` and ``[B, J]``."""
    w = norm_weights if norm_weights.ndim == 3 else norm_weights.reshape((1,) + norm_weights.shape)
    dtype = w.dtype
    ci = anchors.inplane.astype(dtype)[None, :, None, :]
    cd = anchors.depth.astype(dtype)[None, :, None]
    return (w.reshape(w.shape + (1,)) * ci).sum(axis=1), (w * cd).sum(axis=1)


def anchor_surrounding_loss(norm_weights: Tensor, anchors: AnchorSet, gt,
                            cfg: LossConfig = LossConfig()) -> Tensor:
    """Kernel of (weighted anchor centroid - joint) summed over valid joints; no alpha."""
    gt = as_target_batch(gt)
    ci, cd = anchor_centroids(norm_weights, anchors)
    return _reduce(_kernel_terms(ci, cd, gt, cfg, 1.0), gt)


def total_loss(loss1, loss2, cfg: LossConfig = LossConfig()) -> LossReport:
    t1 = loss1 if isinstance(loss1, Tensor) else Tensor(np.float64(loss1))
    t2 = loss2 if isinstance(loss2, Tensor) else Tensor(np.float64(loss2))
    total = t1 * cfg.lambda1 + t2 * cfg.lambda2
    return LossReport(float(t1.data), float(t2.data), float(total.data), total_tensor=total)


def compute_losses(pred: PredictionBundle, anchors: AnchorSet, gt,
                   cfg: LossConfig = LossConfig()) -> LossReport:
    """Full objective. Predictions without anchor weights (direct regression) get ``loss2 = 0``."""
    gt = as_target_batch(gt)
    ti, td = pred.joints_inplane, pred.joints_depth
    per1 = _kernel_terms(ti, td, gt, cfg, cfg.alpha)
    l1 = _reduce(per1, gt)
    per_joint = per1.data * cfg.lambda1
    if pred.norm_weights is not None:
        ci, cd = anchor_centroids(pred.norm_weights, anchors)
        per2 = _kernel_terms(ci, cd, gt, cfg, 1.0)
        l2 = _reduce(per2, gt)
        per_joint = per_joint + per2.data * cfg.lambda2
    else:
        l2 = Tensor(np.zeros((), dtype=ti.dtype))
    report = total_loss(l1, l2, cfg)
    counts = np.maximum(gt.valid.sum(axis=0), 1)
    report.per_joint = per_joint.sum(axis=0) / counts
    return report
