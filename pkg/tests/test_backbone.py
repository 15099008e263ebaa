import numpy as np
import pytest

from anchorpose.backbone import LEVEL_STRIDES, Backbone, level_sizes
from anchorpose.diffmath import ShapeError, Tensor


def test_four_levels_at_strides_8_to_64(rng):
    bb = Backbone(rng, image_size=64, d_model=32, widths=(8, 8, 16, 16, 16), gn_groups=4,
                  dtype=np.float64)
    pyr = bb(rng.uniform(size=(2, 3, 64, 64)))
    assert LEVEL_STRIDES == (8, 16, 32, 64)
    assert pyr.spatial_shapes == [(8, 8), (4, 4), (2, 2), (1, 1)]
    assert all(l.shape[:2] == (2, 32) for l in pyr.levels)
    assert level_sizes(256) == [32, 16, 8, 4]


def test_single_image_gets_batch_axis(rng):
    bb = Backbone(rng, image_size=32, d_model=16, widths=(4, 4, 8, 8, 8), gn_groups=4,
                  dtype=np.float64)
    assert bb(rng.uniform(size=(3, 32, 32))).levels[0].shape == (1, 16, 4, 4)


def test_wrong_image_size_rejected(rng):
    bb = Backbone(rng, image_size=64, d_model=16, widths=(4, 4, 8, 8, 8), gn_groups=4)
    with pytest.raises(ShapeError, match="backbone expects"):
        bb(Tensor(np.zeros((1, 3, 32, 32), np.float32)))


def test_group_norm_levels_are_normalised(rng):
    bb = Backbone(rng, image_size=64, d_model=16, widths=(4, 4, 8, 8, 8), gn_groups=4,
                  dtype=np.float64)
    lvl = bb(rng.uniform(size=(1, 3, 64, 64))).levels[0].data
    g = lvl.reshape(1, 4, -1)
    np.testing.assert_allclose(g.mean(-1), 0, atol=1e-10)
