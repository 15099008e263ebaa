"""Mini-batch training loop with CSV logging and checkpoints."""
from __future__ import annotations

import contextlib
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from ..config import TrainConfig
from ..data_synth import SampleArrays
from ..losses import LossConfig, compute_losses
from .checkpoint import save_checkpoint
from .metrics import MetricReport, mpjpe
from .model import AnchorPoseNet
from .optim import AdamW, clip_grad_norm

STEP_COLUMNS = ("epoch", "step", "loss1", "loss2", "total", "mpjpe")
EPOCH_COLUMNS = ("epoch", "mpjpe_all", "mpjpe_single", "mpjpe_two", "epe")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: str | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    model: AnchorPoseNet
    steps: list[dict] = field(default_factory=list)
    epochs: list[MetricReport] = field(default_factory=list)
    checkpoint: str | None = None

    @property
    def final_loss(self) -> float | None:
        return self.steps[-1]["total"] if self.steps else None


def loss_config(cfg: TrainConfig) -> LossConfig:
    return LossConfig(cfg.alpha, cfg.tau1, cfg.tau2, cfg.lambda1, cfg.lambda2)


def single_thread_context(enabled: bool):
    return threadpool_limits(limits=1) if enabled else contextlib.nullcontext()


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], (int, str)) else _fmt(r[c]) for c in columns])


def _meta(cfg: TrainConfig, epoch: int, step: int) -> dict:
    d = {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.to_dict().items()}
    return {"config": d, "epoch": epoch, "step": step}


def train(cfg: TrainConfig, data: SampleArrays, out_dir=None, model: AnchorPoseNet | None = None,
          progress: Callable[[dict], None] | None = None,
          on_epoch: Callable[[int, AnchorPoseNet], None] | None = None) -> TrainResult:
    """Train ``model`` (built from ``cfg`` when omitted) on ``data``.

    Writes ``steps.csv``, ``epochs.csv`` and ``checkpoint.bin`` under
    ``out_dir`` when given. A non-finite loss stops the run; the parameters
    from before that step are saved to ``checkpoint_last_finite.bin`` and
    ``TrainingDiverged`` is raised.
    """
    if len(data) == 0:
        raise ValueError("dataset is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    with single_thread_context(cfg.single_threaded):
        model = model or AnchorPoseNet(cfg)
        result = TrainResult(model)
        try:
            _loop(cfg, data, model, result, out, progress, on_epoch)
        finally:
            if out is not None:
                _write_csv(out / "steps.csv", STEP_COLUMNS, result.steps)
                _write_csv(out / "epochs.csv", EPOCH_COLUMNS,
                           [dict(epoch=i + 1, **r.as_dict()) for i, r in enumerate(result.epochs)])
        if out is not None:
            step = result.steps[-1]["step"] if result.steps else 0
            path = out / "checkpoint.bin"
            save_checkpoint(path, model.state_dict(), _meta(cfg, cfg.epochs, step))
            result.checkpoint = str(path)
    return result


def param_lr_scales(model: AnchorPoseNet, cfg: TrainConfig) -> list[float]:
    """Learning-rate multipliers aligned with ``model.parameters()``.

    Deformable-attention sampling offsets train at ``offset_lr_scale`` times
    the base rate; everything else at the base rate.
    """
    scales, seen = [], set()
    for name, p in model.named_parameters():
        if id(p) in seen:
            continue
        seen.add(id(p))
        scales.append(cfg.offset_lr_scale if ".sampling_offsets." in name else 1.0)
    return scales


def _loop(cfg, data, model, result, out, progress, on_epoch) -> None:
    lcfg = loss_config(cfg)
    params = model.parameters()
    opt = AdamW(params, cfg.learning_rate, cfg.weight_decay,
                lr_scales=param_lr_scales(model, cfg))
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    n = len(data)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        if cfg.lr_drop_epoch and epoch > cfg.lr_drop_epoch:
            opt.lr = cfg.learning_rate * cfg.lr_drop_factor
        perm = order_rng.permutation(n)
        ep_pi, ep_pd, ep_idx = [], [], []
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(perm[start:start + cfg.batch_size])
            batch = data.subset(idx)
            opt.zero_grad()
            pred = model(batch.images)
            rep = compute_losses(pred, model.anchors, batch.targets, lcfg)
            if not math.isfinite(rep.total):
                ckpt = None
                if out is not None:
                    ckpt = str(out / "checkpoint_last_finite.bin")
                    save_checkpoint(ckpt, model.state_dict(), _meta(cfg, epoch, step))
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step + 1}", ckpt)
            rep.total_tensor.backward()
            clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            step += 1
            pi, pd = pred.joints_numpy()
            m = mpjpe(pi, pd, batch.targets, data.mm_per_px, batch.num_hands)
            row = {"epoch": epoch, "step": step, "loss1": rep.loss1, "loss2": rep.loss2,
                   "total": rep.total, "mpjpe": m.mpjpe_all}
            result.steps.append(row)
            if progress:
                progress(row)
            ep_pi.append(pi)
            ep_pd.append(pd)
            ep_idx.append(idx)
        idx = np.concatenate(ep_idx)
        sub = data.subset(idx)
        result.epochs.append(mpjpe(np.concatenate(ep_pi), np.concatenate(ep_pd), sub.targets,
                                   data.mm_per_px, sub.num_hands))
        if on_epoch:
            on_epoch(epoch, model)
