"""Gradient checks over every learnable module of the network.

Checks run at a jittered copy of the initial weights: zero-initialised
sampling offsets put every deformable-attention sample exactly on a pixel
centre, where bilinear interpolation is not differentiable.

In double precision the model is checked against its own central
differences. In single precision float32 round-off swamps any finite
difference, so the float32 backward pass is compared with central
differences of a float64 twin holding the same weights.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..backbone import PyramidFeatures
from ..config import TrainConfig
from ..data_synth import SyntheticHandConfig, generate_dataset, stack_records
from ..diffmath import GradCheckReport, Tensor, grad_check, no_grad
from ..losses import compute_losses
from .model import AnchorPoseNet
from .train import loss_config

TOLERANCE = {"double": 1e-5, "single": 1e-3}
EPSILON = 1e-5
# Round-off in objectives of magnitude ~1e2 leaves ~1e-9 noise in the
# difference quotient; gradients below this floor are compared in absolute terms.
ATOL = 1e-3
# The floor also tracks each module's gradient scale: entries under 1e-4 of
# the largest one sit at the round-off level of the big ones (float32 noise
# on a gradient of 3e2 is ~1e-5).
SCALE_FLOOR = 1e-4


@dataclass
class ModuleCheck:
    name: str
    report: GradCheckReport
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.report.passed(self.tolerance)


def _project(t: Tensor, seed: int) -> Tensor:
    """Fixed random linear functional, so every output entry reaches the objective."""
    r = np.random.default_rng([seed, *t.shape]).standard_normal(t.shape)
    return (t * r.astype(t.dtype)).sum()


def _total(parts):
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


def _suites(model: AnchorPoseNet, images: np.ndarray, targets, inputs: dict,
            seed: int) -> list[tuple[str, Callable[[], Tensor], object]]:
    cfg = model.cfg
    dt = model.dtype
    images = images.astype(dt)
    queries = model.anchors.normalized()
    anchor_xy = queries[:, :2]
    pyr = [a.astype(dt) for a in inputs["pyramid"]]
    emb = inputs["embeddings"].astype(dt)

    def proj(t):
        return _project(t, seed)

    suites = [
        ("backbone", lambda: _total([proj(l) for l in model.backbone(images).levels]),
         model.backbone),
        ("query_encoder", lambda: proj(model.query_encoder(queries)), model.query_encoder),
    ]
    if cfg.transformer_model:
        with no_grad():
            memory = model.encoder(PyramidFeatures([Tensor(a) for a in pyr]))
        pos_q = inputs["pos_q"].astype(dt)
        suites += [
            ("encoder", lambda: proj(model.encoder(
                PyramidFeatures([Tensor(a) for a in pyr])).tokens), model.encoder),
            ("decoder", lambda: proj(model.decoder(
                Tensor(pos_q), anchor_xy, memory).embeddings), model.decoder),
        ]
    else:
        suites.append(("trunk", lambda: proj(model.trunk(Tensor(pyr[0]), anchor_xy)),
                       model.trunk))
    if cfg.a2j_fusion:
        suites.append(("offset_head", lambda: _total(
            [proj(t) for t in model.offset_head(Tensor(emb))]), model.offset_head))
        if cfg.learned_weights:
            suites.append(("weight_head", lambda: proj(model.weight_head(Tensor(emb))),
                           model.weight_head))
    else:
        suites.append(("direct_head", lambda: _total(
            [proj(model.direct_head(Tensor(emb)).joints_inplane),
             proj(model.direct_head(Tensor(emb)).joints_depth)]), model.direct_head))
    lcfg = loss_config(cfg)
    suites.append(("full_loss", lambda: compute_losses(
        model(images), model.anchors, targets, lcfg).total_tensor, model))
    return suites


def check_model(cfg: TrainConfig | None = None, batch: int = 1, max_elements: int = 4,
                seed: int = 0, jitter: float = 0.05) -> list[ModuleCheck]:
    """Check every learnable module and the full loss; returns one row per module."""
    cfg = cfg or TrainConfig(precision="double")
    tol = TOLERANCE[cfg.precision]
    rng = np.random.default_rng(seed)
    ref = AnchorPoseNet(cfg.replace(precision="double"), np.random.default_rng(seed))
    for p in ref.parameters():
        p.data = p.data + jitter * rng.standard_normal(p.shape)
    data = stack_records(generate_dataset(
        SyntheticHandConfig(image_size=cfg.image_size), batch, seed=seed))
    images = data.images.astype(np.float64)
    with no_grad():
        inputs = {"pyramid": [l.data.copy() for l in ref.backbone(images).levels],
                  "pos_q": ref.query_encoder(ref.anchors.normalized()).data[None],
                  "embeddings": ref.anchor_embeddings(images).data.copy()}

    twin = None
    if cfg.precision == "single":
        twin = AnchorPoseNet(cfg, np.random.default_rng(seed))
        twin.load_state_dict(ref.state_dict())
        twin_suites = _suites(twin, images, data.targets, inputs, seed)

    results = []
    for i, (name, fn, module) in enumerate(_suites(ref, images, data.targets, inputs, seed)):
        named = list(module.named_parameters())
        _, afn, amod = twin_suites[i] if twin is not None else (name, fn, module)
        amod.zero_grad()
        afn().backward()
        analytic = [p.gradient.astype(np.float64) for _, p in amod.named_parameters()]
        scale = max(float(np.abs(g).max()) for g in analytic)
        report = grad_check(fn, [p for _, p in named], epsilon=EPSILON,
                            names=[n for n, _ in named], max_elements=max_elements,
                            atol=max(ATOL, SCALE_FLOOR * scale), seed=seed, analytic=analytic)
        results.append(ModuleCheck(name, report, tol))
    return results


def format_checks(checks: list[ModuleCheck]) -> str:
    lines = [f"{'module':16s} {'params':>6s} {'max rel err':>12s} {'tol':>8s}  result"]
    for c in checks:
        lines.append(f"{c.name:16s} {len(c.report.params):6d} {c.report.max_rel_error:12.3e} "
                     f"{c.tolerance:8.0e}  {'PASS' if c.passed else 'FAIL'}")
    return "\n".join(lines)
