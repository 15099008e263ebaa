"""Batched inference, evaluation and CSV export of predictions."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..data_synth import SampleArrays
from ..diffmath import no_grad
from .metrics import MetricReport, mpjpe
from .model import AnchorPoseNet


@dataclass
class Predictions:
    inplane: np.ndarray             # [B, J, 2] px
    depth: np.ndarray               # [B, J] mm
    weights: np.ndarray | None      # [B, A, J] normalised anchor weights


def predict(model: AnchorPoseNet, images: np.ndarray, batch_size: int = 32,
            keep_weights: bool = False) -> Predictions:
    pi, pd, ws = [], [], []
    with no_grad():
        for s in range(0, len(images), batch_size):
            pred = model(images[s:s + batch_size])
            a, b = pred.joints_numpy()
            pi.append(a)
            pd.append(b)
            if keep_weights and pred.norm_weights is not None:
                ws.append(pred.norm_weights.data)
    w = np.concatenate(ws) if ws else None
    return Predictions(np.concatenate(pi), np.concatenate(pd), w)


def evaluate(model: AnchorPoseNet, data: SampleArrays, batch_size: int = 32) -> MetricReport:
    p = predict(model, data.images, batch_size)
    return mpjpe(p.inplane, p.depth, data.targets, data.mm_per_px, data.num_hands)


def write_joints_csv(path, preds: Predictions) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "joint", "x", "y", "depth"])
        for s in range(preds.inplane.shape[0]):
            for j in range(preds.inplane.shape[1]):
                x, y = preds.inplane[s, j]
                w.writerow([s, j, f"{x:.6g}", f"{y:.6g}", f"{preds.depth[s, j]:.6g}"])


def write_weights_csv(path, preds: Predictions, anchor_coords: np.ndarray) -> None:
    """One row per (sample, anchor, joint) with the anchor position and its weight."""
    if preds.weights is None:
        raise ValueError("model produces no anchor weights")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "anchor", "joint", "anchor_x", "anchor_y", "anchor_depth", "weight"])
        b, a, j = preds.weights.shape
        for s in range(b):
            for k in range(a):
                ax, ay, ad = anchor_coords[k]
                for jj in range(j):
                    w.writerow([s, k, jj, f"{ax:g}", f"{ay:g}", f"{ad:g}",
                                f"{preds.weights[s, k, jj]:.6g}"])


def write_outputs(out_dir, preds: Predictions, anchor_coords: np.ndarray) -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"joints": str(out / "joints.csv")}
    write_joints_csv(paths["joints"], preds)
    if preds.weights is not None:
        paths["weights"] = str(out / "anchor_weights.csv")
        write_weights_csv(paths["weights"], preds, anchor_coords)
    return paths
