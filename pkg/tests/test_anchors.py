import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from anchorpose.anchors import (AnchorConfigError, JointTarget, TargetBatch, as_target_batch,
                                default_hand_roots, depth_grid, generate_anchor_grid,
                                mark_valid_joints)


def test_full_scale_grid_has_768_anchors_at_cell_centres():
    t0 = time.perf_counter()
    a = generate_anchor_grid(256, 16, (-100, 0, 100))
    assert time.perf_counter() - t0 < 1.0
    assert len(a) == 768
    xs = np.unique(a.inplane[:, 0])
    np.testing.assert_array_equal(xs, np.arange(16) * 16 + 8)
    assert a.grid_side == 16


def test_ordering_is_row_major_with_depth_fastest():
    a = generate_anchor_grid(32, 16, (-100, 0, 100))
    expect = [(8, 8, -100), (8, 8, 0), (8, 8, 100), (24, 8, -100)]
    np.testing.assert_array_equal(a.coords[:4], expect)
    np.testing.assert_array_equal(a.coords[6], (8, 24, -100))


@given(st.sampled_from([(64, 4), (64, 16), (64, 8), (256, 16), (48, 12)]),
       st.integers(1, 5))
def test_grid_invariants(size_stride, nd):
    size, stride = size_stride
    a = generate_anchor_grid(size, stride, depth_grid(nd))
    assert len(a) == (size // stride) ** 2 * nd
    assert (a.inplane > 0).all() and (a.inplane < size).all()
    # cell centres: offset by half a stride from the lattice
    np.testing.assert_array_equal((a.inplane - stride / 2) % stride, 0)
    assert len({tuple(c) for c in a.coords}) == len(a)
    q = a.normalized()
    assert (q >= 0).all() and (q <= 1).all()


def test_depth_grid():
    assert depth_grid(1) == (0.0,)
    assert depth_grid(3) == (-100.0, 0.0, 100.0)
    with pytest.raises(AnchorConfigError):
        depth_grid(0)


@pytest.mark.parametrize("size,stride,depths", [(64, 5, (0,)), (64, 0, (0,)), (64, 16, ()),
                                                (64, 16, (0, 0))])
def test_invalid_grid_rejected(size, stride, depths):
    with pytest.raises(AnchorConfigError):
        generate_anchor_grid(size, stride, depths)


def test_csv_has_header_and_one_row_per_anchor():
    a = generate_anchor_grid(64, 16, (-100, 0, 100))
    lines = a.to_csv().strip().split("\n")
    assert lines[0] == "x,y,depth"
    assert len(lines) == 49
    assert lines[1] == "8,8,-100"


def test_depth_one_shrinks_anchor_count_by_three():
    a3 = generate_anchor_grid(64, 4, depth_grid(3))
    a1 = generate_anchor_grid(64, 4, depth_grid(1))
    assert len(a3) == 3 * len(a1)
    assert (a1.depth == 0).all()


def test_default_hand_roots():
    assert default_hand_roots(42) == (20, 41)
    assert default_hand_roots(21) == (20,)


def test_valid_radius_boundary_is_inclusive():
    depth = np.zeros(42)
    depth[0], depth[1], depth[2] = 200.0, -200.0, 200.5
    t = mark_valid_joints(JointTarget(np.zeros((42, 2)), depth, np.ones(42, bool)))
    assert t.valid[0] and t.valid[1] and not t.valid[2]
    assert t.valid[3:].all()


def test_invalid_joints_stay_invalid():
    valid = np.ones(42, bool)
    valid[5] = False
    t = mark_valid_joints(JointTarget(np.zeros((42, 2)), np.zeros(42), valid))
    assert not t.valid[5]


def test_joint_target_shape_mismatch():
    with pytest.raises(ValueError, match="disagree"):
        JointTarget(np.zeros((3, 2)), np.zeros(4), np.ones(4, bool))


def test_target_batch_conversion():
    t = JointTarget(np.ones((42, 2)), np.zeros(42), np.ones(42, bool))
    b = as_target_batch([t, t])
    assert isinstance(b, TargetBatch) and b.inplane.shape == (2, 42, 2)
    assert as_target_batch(t).depth.shape == (1, 42)
    assert as_target_batch(b) is b
