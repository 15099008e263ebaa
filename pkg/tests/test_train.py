import csv

import numpy as np
import pytest

from anchorpose.diffmath import Param
from anchorpose.train_eval import (AdamW, AnchorPoseNet, CheckpointError, TrainingDiverged,
                                   clip_grad_norm, evaluate, load_checkpoint, predict,
                                   save_checkpoint, train)
from anchorpose.train_eval.checkpoint import decode_checkpoint, encode_checkpoint
from anchorpose.train_eval.train import param_lr_scales
from helpers import TINY, tiny_data


def test_zero_epochs_returns_initial_weights(tmp_path):
    cfg = TINY.replace(epochs=0)
    res = train(cfg, tiny_data(16, 0), out_dir=tmp_path)
    init = AnchorPoseNet(cfg).state_dict()
    state, meta = load_checkpoint(res.checkpoint)
    assert state.keys() == init.keys()
    for k in init:
        np.testing.assert_array_equal(state[k], init[k])
    assert meta["step"] == 0 and res.steps == []


def test_training_is_deterministic(tmp_path):
    cfg = TINY.replace(single_threaded=True)
    data = tiny_data(24, 0)
    a = train(cfg, data, out_dir=tmp_path / "a")
    b = train(cfg, data, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == \
        (tmp_path / "b" / "checkpoint.bin").read_bytes()
    assert (tmp_path / "a" / "steps.csv").read_text() == (tmp_path / "b" / "steps.csv").read_text()
    assert a.final_loss == b.final_loss


def test_logs_have_one_row_per_step_and_epoch(tmp_path):
    cfg = TINY.replace(epochs=2)
    train(cfg, tiny_data(20, 0), out_dir=tmp_path)
    steps = list(csv.DictReader(open(tmp_path / "steps.csv")))
    epochs = list(csv.DictReader(open(tmp_path / "epochs.csv")))
    assert len(steps) == 2 * 3 and len(epochs) == 2
    assert [int(r["step"]) for r in steps] == list(range(1, 7))
    assert set(steps[0]) == {"epoch", "step", "loss1", "loss2", "total", "mpjpe"}
    for r in steps:
        assert float(r["total"]) == pytest.approx(3 * float(r["loss1"]) + float(r["loss2"]))


def test_divergence_saves_last_finite_checkpoint(tmp_path):
    cfg = TINY.replace(epochs=1)
    data = tiny_data(16, 0)
    bad = data.subset(np.arange(16))
    bad.targets.depth[3, 0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train(cfg, bad, out_dir=tmp_path)
    assert info.value.checkpoint.endswith("checkpoint_last_finite.bin")
    state, meta = load_checkpoint(info.value.checkpoint)
    assert all(np.isfinite(v).all() for v in state.values())


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        train(TINY, tiny_data(4, 0).subset(np.arange(0)))


def test_loss_decreases_over_200_steps():
    cfg = TINY.replace(epochs=25, batch_size=32)
    data = tiny_data(256, 1)
    res = train(cfg, data)
    assert len(res.steps) == 200
    first = res.steps[0]["total"]
    last = np.mean([s["total"] for s in res.steps[-8:]])
    assert last < first


def test_checkpoint_round_trip_and_corruption(tmp_path, rng):
    state = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": np.arange(5.0),
             "s": np.float64(2.0).reshape(())}
    blob = encode_checkpoint(state, {"epoch": 3})
    back, meta = decode_checkpoint(blob)
    assert meta == {"epoch": 3}
    for k in state:
        np.testing.assert_array_equal(back[k], state[k])
        assert back[k].dtype == state[k].dtype
    for damaged in (blob[:-3], b"XXXX" + blob[4:], blob + b"\0"):
        with pytest.raises(CheckpointError):
            decode_checkpoint(damaged)
    path = tmp_path / "c.bin"
    save_checkpoint(path, state)
    assert load_checkpoint(path)[0].keys() == state.keys()


def test_model_state_round_trip_reproduces_predictions(rng):
    m1 = AnchorPoseNet(TINY, np.random.default_rng(1))
    m2 = AnchorPoseNet(TINY, np.random.default_rng(2))
    m2.load_state_dict(decode_checkpoint(encode_checkpoint(m1.state_dict()))[0])
    images = tiny_data(4, 0).images
    np.testing.assert_array_equal(predict(m1, images).inplane, predict(m2, images).inplane)


def test_adamw_first_step_and_decay():
    p = Param(np.array([1.0, -2.0]))
    p.grad = np.array([0.5, -0.1])
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    opt.step()
    # bias-corrected first step moves each coordinate by lr * sign(g); decay scales by 1 - lr*wd
    np.testing.assert_allclose(p.data, [1.0 * 0.95 - 0.1, -2.0 * 0.95 + 0.1], atol=1e-6)
    q = Param(np.array([3.0]))
    opt2 = AdamW([q], lr=0.1, weight_decay=0.0)
    opt2.step()
    assert q.data[0] == 3.0  # no gradient, no update


def test_adamw_lr_scales_shrink_the_step():
    a, b = Param(np.array([0.0])), Param(np.array([0.0]))
    a.grad, b.grad = np.array([1.0]), np.array([1.0])
    AdamW([a, b], lr=0.1, weight_decay=0.0, lr_scales=[1.0, 0.1]).step()
    np.testing.assert_allclose([a.data[0], b.data[0]], [-0.1, -0.01], rtol=1e-6)
    with pytest.raises(ValueError):
        AdamW([a, b], lr_scales=[1.0])


def test_only_sampling_offsets_get_the_offset_rate():
    model = AnchorPoseNet(TINY)
    scales = param_lr_scales(model, TINY)
    names = [n for n, _ in model.named_parameters()]
    assert len(scales) == len(model.parameters()) == len(names)
    for name, s in zip(names, scales):
        assert s == (TINY.offset_lr_scale if ".sampling_offsets." in name else 1.0)
    assert TINY.offset_lr_scale in scales


def test_clip_grad_norm():
    a, b = Param(np.zeros(2)), Param(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0, 0.8])
    a.grad = np.array([3.0, 0.0])
    assert clip_grad_norm([a], 0.0) == pytest.approx(3.0)
    np.testing.assert_allclose(a.grad, [3.0, 0.0])


@pytest.mark.parametrize("toggle", [{}, {"transformer_model": False}, {"a2j_fusion": False},
                                    {"learned_weights": False}, {"msdam": False}])
def test_ablation_variants_train_and_evaluate(toggle):
    cfg = TINY.replace(**toggle)
    data = tiny_data(16, 0)
    res = train(cfg, data)
    rep = evaluate(res.model, data)
    assert rep.mpjpe_all is not None and np.isfinite(rep.mpjpe_all)
    assert np.isfinite(res.final_loss)


def test_uniform_weights_variant_has_exact_uniform_fusion():
    cfg = TINY.replace(learned_weights=False)
    model = AnchorPoseNet(cfg)
    p = predict(model, tiny_data(2, 0).images, keep_weights=True)
    np.testing.assert_array_equal(p.weights, np.float32(1.0) / np.float32(len(model.anchors)))


def test_lr_drop_freezes_weights_when_factor_is_tiny():
    cfg = TINY.replace(epochs=2, lr_drop_epoch=1, lr_drop_factor=1e-9, weight_decay=0.0)
    snaps = []
    train(cfg, tiny_data(8, 0), on_epoch=lambda ep, m: snaps.append(m.state_dict()))
    first, second = snaps
    for k in first:
        np.testing.assert_allclose(second[k], first[k], atol=1e-6)


@pytest.mark.parametrize("precision", ["double", "single"])
def test_gradient_checks_pass_at_tiny_width(precision):
    from anchorpose.train_eval.checks import TOLERANCE, check_model
    checks = check_model(TINY.replace(precision=precision))
    assert {c.name for c in checks} >= {"backbone", "encoder", "decoder", "full_loss"}
    assert all(c.tolerance == TOLERANCE[precision] for c in checks)
    assert all(c.passed for c in checks), [(c.name, c.report.max_rel_error) for c in checks]
