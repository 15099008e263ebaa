"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary) before
asserting. The learning-trend criteria share one trained full model through
session fixtures, so the expensive run happens once.
"""
import time

import numpy as np
import pytest

from anchorpose.anchors import AnchorSet, TargetBatch, generate_anchor_grid
from anchorpose.attention import MSDeformAttn, flatten_pyramid
from anchorpose.backbone import PyramidFeatures
from anchorpose.config import DESK_OVERRIDES, RunManifest, TrainConfig
from anchorpose.data_synth import SyntheticHandConfig, generate_dataset, stack_records
from anchorpose.diffmath import Tensor
from anchorpose.diffmath.functional import bilinear_sample
from anchorpose.head import PredictionBundle, fuse
from anchorpose.losses import compute_losses, smooth_l1_tau
from anchorpose.train_eval import AnchorPoseNet, evaluate, mpjpe, train
from anchorpose.train_eval.ablation import ANCHOR_ROWS, COMPONENT_ROWS
from anchorpose.train_eval.checks import check_model
from oracles import fuse_oracle, msdam_oracle

DESK = TrainConfig(**DESK_OVERRIDES)
TRAIN_COUNT, TRAIN_SEED = 2000, 1
TEST_COUNT, TEST_SEED = 300, 2


# -- shared desk-scale runs ------------------------------------------------

@pytest.fixture(scope="session")
def desk_data():
    cfg = SyntheticHandConfig(image_size=DESK.image_size)
    return (stack_records(generate_dataset(cfg, TRAIN_COUNT, TRAIN_SEED)),
            stack_records(generate_dataset(cfg, TEST_COUNT, TEST_SEED)))


_RUNS: dict = {}


def trained(name: str, changes: dict, desk_data):
    """Train and evaluate one configuration once per session."""
    if name not in _RUNS:
        train_data, test_data = desk_data
        cfg = DESK.replace(**changes)
        t0 = time.perf_counter()
        res = train(cfg, train_data)
        seconds = time.perf_counter() - t0
        _RUNS[name] = (evaluate(res.model, test_data), seconds)
    return _RUNS[name]


# -- 1 ---------------------------------------------------------------------

def test_c01_anchor_geometry(verdict):
    t0 = time.perf_counter()
    a = generate_anchor_grid(256, 16, (-100.0, 0.0, 100.0))
    dt = time.perf_counter() - t0
    centres = np.arange(16) * 16 + 8.0
    ok = (len(a) == 768 and set(a.inplane[:, 0]) == set(centres)
          and set(a.inplane[:, 1]) == set(centres) and set(a.depth) == {-100.0, 0.0, 100.0}
          and dt < 1.0)
    assert verdict(1, "anchor geometry", ok, f"{len(a)} anchors at cell centres in {dt * 1e3:.1f} ms")


# -- 2 ---------------------------------------------------------------------

def test_c02_fusion_oracle(verdict):
    rng = np.random.default_rng(2)
    worst, worst_sum = 0.0, 0.0
    for _ in range(100):
        n_a, n_j = int(rng.integers(1, 11)), int(rng.integers(1, 5))
        anchors = AnchorSet(rng.uniform(0, 64, (n_a, 2)), rng.uniform(-100, 100, n_a), 4,
                            (0.0,), 64)
        oi, od = rng.normal(0, 8, (n_a, n_j, 2)), rng.normal(0, 40, (n_a, n_j))
        raw = rng.normal(0, 3, (n_a, n_j))
        out = fuse(anchors, Tensor(oi), Tensor(od), Tensor(raw))
        exi, exd, exw = fuse_oracle(anchors.inplane, anchors.depth, oi, od, raw)
        worst = max(worst, np.abs(out.joints_inplane.data[0] - exi).max(),
                    np.abs(out.joints_depth.data[0] - exd).max(),
                    np.abs(out.norm_weights.data[0] - exw).max())
        worst_sum = max(worst_sum, np.abs(out.norm_weights.data.sum(axis=1) - 1).max())
    ok = worst <= 1e-6 and worst_sum <= 1e-6
    assert verdict(2, "fusion oracle", ok,
                   f"max |fuse - oracle| {worst:.2e}, max |sum w - 1| {worst_sum:.2e} over 100 cases")


# -- 3 ---------------------------------------------------------------------

def test_c03_msdam_oracle(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        n_l = int(rng.integers(1, 4))
        shapes = [(int(rng.integers(1, 5)), int(rng.integers(1, 5))) for _ in range(n_l)]
        heads = int(rng.choice([1, 2]))
        d = 4 * heads
        attn = MSDeformAttn(rng, d, heads, n_l, int(rng.integers(1, 4)), dtype=np.float64)
        for p in attn.parameters():
            p.data = p.data + 0.5 * rng.standard_normal(p.shape)
        pyr = PyramidFeatures([Tensor(rng.normal(size=(1, d, h, w))) for h, w in shapes])
        state = flatten_pyramid(pyr)
        n_q = int(rng.integers(1, 4))
        q = rng.normal(size=(1, n_q, d))
        ref = rng.uniform(0, 1, (1, n_q, n_l, 2))
        got = attn(Tensor(q), ref, state).data
        worst = max(worst, np.abs(got - msdam_oracle(q, ref, state.tokens.data, shapes, attn)).max())

    # degenerate case: constant attention logits -> plain average of bilinear samples
    shapes = [(4, 4), (2, 2)]
    d, heads, points = 4, 1, 2
    attn = MSDeformAttn(rng, d, heads, 2, points, dtype=np.float64)
    attn.value_proj.weight.data = np.eye(d)
    attn.output_proj.weight.data = np.eye(d)
    attn.sampling_offsets.weight.data[:] = 0
    attn.sampling_offsets.bias.data = rng.normal(0, 0.6, attn.sampling_offsets.bias.shape)
    pyr = PyramidFeatures([Tensor(rng.normal(size=(1, d, h, w))) for h, w in shapes])
    ref = rng.uniform(0.1, 0.9, (1, 3, 2, 2))
    got = attn(Tensor(rng.normal(size=(1, 3, d))), ref, flatten_pyramid(pyr)).data[0]
    off = attn.sampling_offsets.bias.data.reshape(2, points, 2)
    mean = np.zeros((3, d))
    for li, (h, w) in enumerate(shapes):
        for p in range(points):
            loc = ref[0, :, li] + off[li, p] / np.array([w, h])
            mean += bilinear_sample(pyr.levels[li].data[0], loc).data.T / (2 * points)
    uniform_err = np.abs(got - mean).max()
    ok = worst <= 1e-5 and uniform_err <= 1e-6
    assert verdict(3, "MSDAM oracle", ok,
                   f"max |msdam - oracle| {worst:.2e} over 50 configs, uniform case {uniform_err:.2e}")


# -- 4 ---------------------------------------------------------------------

def test_c04_loss_identities(verdict):
    anchors = generate_anchor_grid(8, 4, (-100.0, 100.0))
    # each joint sits exactly on one anchor; that anchor takes all the weight
    pick = np.array([[0, 5, 7], [2, 3, 6]])
    gt = TargetBatch(anchors.inplane[pick], anchors.depth[pick], np.ones((2, 3), bool))
    raw = np.full((2, 8, 3), -1e4)
    for b in range(2):
        for j in range(3):
            raw[b, pick[b, j], j] = 0.0
    pred = fuse(anchors, Tensor(np.zeros((2, 8, 3, 2))), Tensor(np.zeros((2, 8, 3))), Tensor(raw))
    zero = compute_losses(pred, anchors, gt)
    cont = max(abs(smooth_l1_tau(np.nextafter(t, 0), t) - smooth_l1_tau(np.nextafter(t, 2 * t), t))
               for t in (1.0, 3.0))
    rng = np.random.default_rng(4)
    noisy = fuse(anchors, Tensor(rng.normal(size=(2, 8, 3, 2))), Tensor(rng.normal(0, 9, (2, 8, 3))),
                 Tensor(rng.normal(size=(2, 8, 3))))
    rep = compute_losses(noisy, anchors, gt)
    combo = abs(rep.total - (3 * rep.loss1 + 1 * rep.loss2))
    ok = zero.loss1 == 0 and zero.loss2 == 0 and cont < 1e-9 and combo < 1e-9 * max(1, rep.total)
    assert verdict(4, "loss identities", ok,
                   f"exact loss1={zero.loss1:.1e} loss2={zero.loss2:.1e}; kink gap {cont:.1e}; "
                   f"|total - (3 l1 + l2)| {combo:.1e}")


# -- 5 ---------------------------------------------------------------------

def test_c05_gradient_verification(verdict):
    t0 = time.perf_counter()
    double = check_model(DESK.replace(precision="double"))
    single = check_model(DESK.replace(precision="single"))
    dt = time.perf_counter() - t0
    names = {c.name for c in double}
    covered = {"backbone", "encoder", "decoder", "offset_head", "weight_head", "full_loss"} <= names
    worst_d = max(c.report.max_rel_error for c in double)
    worst_s = max(c.report.max_rel_error for c in single)
    ok = covered and all(c.passed for c in double + single) and dt < 300
    assert verdict(5, "gradient verification", ok,
                   f"double max rel {worst_d:.1e} (<=1e-5), single {worst_s:.1e} (<=1e-3), "
                   f"{len(double)} modules, {dt:.0f} s")


# -- 6 ---------------------------------------------------------------------

def test_c06_desk_learning(verdict, desk_data):
    _, test_data = desk_data
    untrained = evaluate(AnchorPoseNet(DESK), test_data).mpjpe_all
    report, seconds = trained("full", {}, desk_data)
    ratio = report.mpjpe_all / untrained
    ok = DESK.epochs <= 20 and ratio < 0.4 and seconds < 30 * 60
    assert verdict(6, "desk-scale learning", ok,
                   f"held-out MPJPE {untrained:.1f} -> {report.mpjpe_all:.1f} mm "
                   f"({100 * ratio:.1f}% of untrained, need < 40%) after {DESK.epochs} epochs "
                   f"in {seconds / 60:.1f} min")


# -- 7 ---------------------------------------------------------------------

def test_c07_ablation_trend(verdict, desk_data):
    full, _ = trained("full", {}, desk_data)
    rows = {name: trained(name, COMPONENT_ROWS[name], desk_data)[0].mpjpe_all
            for name in ("no_transformer", "no_a2j_fusion", "uniform_weights", "no_msdam")}
    strict = all(full.mpjpe_all < rows[n] for n in ("no_transformer", "no_a2j_fusion",
                                                    "uniform_weights"))
    ok = strict and full.mpjpe_all <= rows["no_msdam"]
    table = ", ".join(f"{n} {v:.1f}" for n, v in rows.items())
    assert verdict(7, "ablation trend", ok, f"full {full.mpjpe_all:.1f} mm vs {table}")


# -- 8 ---------------------------------------------------------------------

def test_c08_anchor_sweep(verdict, desk_data):
    # one depth layer keeps the 256-anchor row inside a desk budget
    coarse, _ = trained("anchors_4x4x1", ANCHOR_ROWS["anchors_4x4x1"], desk_data)
    fine, seconds = trained("anchors_16x16x1", ANCHOR_ROWS["anchors_16x16x1"], desk_data)
    ok = fine.mpjpe_all < coarse.mpjpe_all
    assert verdict(8, "anchor sweep", ok,
                   f"16x16x1 {fine.mpjpe_all:.1f} mm vs 4x4x1 {coarse.mpjpe_all:.1f} mm "
                   f"(16x16 run {seconds / 60:.1f} min)")


# -- 9 ---------------------------------------------------------------------

def test_c09_metric_invariance(verdict):
    rng = np.random.default_rng(9)
    gt = TargetBatch(rng.uniform(0, 64, (4, 42, 2)), rng.uniform(-150, 150, (4, 42)),
                     np.ones((4, 42), bool))
    exact = mpjpe(gt.inplane, gt.depth, gt, mm_per_px=7.5)
    pi, pd = gt.inplane.copy(), gt.depth.copy()
    for sl in (slice(0, 21), slice(21, 42)):
        pi[:, sl] += rng.normal(0, 20, (4, 1, 2))
        pd[:, sl] += rng.normal(0, 50, (4, 1))
    moved = mpjpe(pi, pd, gt, mm_per_px=7.5)
    one = TargetBatch(np.zeros((1, 21, 2)), np.zeros((1, 21)), np.ones((1, 21), bool), (20,))
    p = np.zeros((1, 21, 2))
    p[0, 7] = (3.0, 4.0)
    hand = mpjpe(p, np.zeros((1, 21)), one).mpjpe_all
    ok = (exact.mpjpe_all == 0 and exact.epe == 0 and moved.mpjpe_all < 1e-9
          and moved.epe < 1e-9 and hand == 0.25)
    assert verdict(9, "metric invariance", ok,
                   f"exact {exact.mpjpe_all}, translated {moved.mpjpe_all:.1e}, hand case {hand} mm")


# -- 10 --------------------------------------------------------------------

def test_c10_determinism(verdict, tmp_path):
    from anchorpose.cli import main
    flags = ["--epochs", "1", "--single-threaded", "true", "--data-count", "64",
             "--data-seed", "3", "--batch-size", "16"]
    first, second = tmp_path / "first", tmp_path / "second"
    assert main(["train", *flags, "--out", str(first)]) == 0
    manifest = RunManifest.read(first / "manifest.json")
    assert main(["train", "--manifest", str(first / "manifest.json"), "--out", str(second)]) == 0
    same = {name: (first / name).read_bytes() == (second / name).read_bytes()
            for name in ("checkpoint.bin", "steps.csv", "epochs.csv")}
    ok = all(same.values()) and manifest.config["single_threaded"] is True
    assert verdict(10, "determinism", ok,
                   ", ".join(f"{k} {'identical' if v else 'differs'}" for k, v in same.items()))
