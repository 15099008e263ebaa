import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anchorpose.data_synth import (DatasetError, SyntheticHandConfig, depth_intensity,
                                   generate_dataset, generate_sample, hand_skeleton, read_dataset,
                                   render_joint_blob, stack_records, write_dataset)

CFG = SyntheticHandConfig()


def test_same_seed_same_sample():
    a, b = generate_sample(CFG, 7), generate_sample(CFG, 7)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.targets.inplane, b.targets.inplane)
    assert not np.array_equal(a.image, generate_sample(CFG, 8).image)


@settings(max_examples=20)
@given(st.integers(0, 2 ** 32 - 1))
def test_sample_invariants(seed):
    s = generate_sample(CFG, seed)
    assert s.image.shape == (3, 64, 64) and s.image.dtype == np.float32
    assert s.image.min() >= 0 and s.image.max() <= 1
    levels = s.image.astype(np.float64) * 255
    np.testing.assert_allclose(levels, np.round(levels), atol=1e-4)
    t = s.targets
    v = t.valid
    assert ((t.inplane[v] >= 0) & (t.inplane[v] < 64)).all()
    assert (np.abs(t.depth[v]) <= 200).all()
    n = s.metadata["num_hands"]
    assert n in (1, 2) and sum(s.metadata["hands_present"]) == n
    for h, present in enumerate(s.metadata["hands_present"]):
        root = t.hand_roots[h]
        if present:
            assert t.depth[root] == 0
        else:
            assert not v[h * 21:(h + 1) * 21].any()


def test_skeleton_bone_lengths_are_scale_consistent():
    cfg = SyntheticHandConfig(bone_scale_range=(1.0, 1.0))
    a = hand_skeleton(np.random.default_rng(0), cfg, left=False)
    b = hand_skeleton(np.random.default_rng(1), cfg, left=True)
    # index finger tip-to-distal bone (last bone length 20 mm)
    assert np.linalg.norm(a[4] - a[5]) == pytest.approx(20.0)
    assert np.linalg.norm(b[4] - b[5]) == pytest.approx(20.0)
    np.testing.assert_allclose(a[20], 0)


def test_nearer_renders_brighter():
    assert depth_intensity(np.array([-200.0]))[0] == pytest.approx(1.0)
    assert depth_intensity(np.array([200.0]))[0] == pytest.approx(0.4)
    assert (np.diff(depth_intensity(np.linspace(-200, 200, 9))) < 0).all()


def test_blob_peaks_at_its_centre():
    blob = render_joint_blob(16, 5.5, 9.5)
    assert np.unravel_index(blob.argmax(), blob.shape) == (9, 5)
    assert blob.max() == pytest.approx(1.0)


def test_mixture_contains_single_and_overlapping_samples():
    recs = generate_dataset(CFG, 80, seed=3)
    hands = [r.metadata["num_hands"] for r in recs]
    assert 1 in hands and 2 in hands
    assert any(r.metadata["overlap"] for r in recs)


def test_round_trip(tmp_path):
    recs = generate_dataset(CFG, 5, seed=4)
    path = tmp_path / "d.bin"
    write_dataset(recs, path)
    back = read_dataset(path)
    assert len(back) == 5
    for a, b in zip(recs, back):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.targets.inplane, b.targets.inplane)
        np.testing.assert_array_equal(a.targets.depth, b.targets.depth)
        np.testing.assert_array_equal(a.targets.valid, b.targets.valid)
        assert a.seed == b.seed
        assert a.metadata == b.metadata


def test_empty_dataset_round_trip(tmp_path):
    path = tmp_path / "e.bin"
    write_dataset([], path, image_size=64, num_joints=42, hand_roots=(20, 41))
    assert read_dataset(path) == []


@pytest.mark.parametrize("damage", ["truncate", "magic", "trailing", "length"])
def test_corruption_detected(tmp_path, damage):
    path = tmp_path / "d.bin"
    write_dataset(generate_dataset(CFG, 2, seed=5), path)
    blob = bytearray(path.read_bytes())
    if damage == "truncate":
        blob = blob[:-10]
    elif damage == "magic":
        blob[:4] = b"XXXX"
    elif damage == "trailing":
        blob += b"\0"
    else:
        hdr = 24 + 4
        blob[hdr] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(DatasetError):
        read_dataset(path)


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError, match="cannot read"):
        read_dataset(tmp_path / "nope.bin")


def test_stack_records():
    data = stack_records(generate_dataset(CFG, 4, seed=6))
    assert data.images.shape == (4, 3, 64, 64)
    assert data.targets.inplane.shape == (4, 42, 2)
    assert data.mm_per_px == pytest.approx(7.5)
    sub = data.subset([1, 3])
    assert len(sub) == 2
    with pytest.raises(ValueError):
        stack_records([])


def test_invalid_generator_config():
    with pytest.raises(ValueError):
        SyntheticHandConfig(joints_per_hand=20)
    with pytest.raises(ValueError):
        SyntheticHandConfig(overlap_probability=1.5)
