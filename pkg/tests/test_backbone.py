import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mce_fss import tensor as T
from mce_fss.backbone import Backbone, BackboneConfig, downsample_mask, extract_features
from mce_fss.tensor import ContractError, Tensor


class TestExtractFeatures:
    def test_shapes_at_64px(self):
        pyr = Backbone()(Tensor(np.random.default_rng(0).random((3, 64, 64))))
        assert pyr[2].shape == (32, 32, 32)
        assert pyr[3].shape == (64, 16, 16)
        assert pyr[4].shape == (64, 16, 16)

    def test_zero_image_is_finite(self):
        pyr = Backbone()(Tensor(np.zeros((3, 16, 16))))
        assert all(np.all(np.isfinite(f.data)) for f in pyr.values())

    def test_deterministic(self):
        img = Tensor(np.random.default_rng(1).random((3, 32, 32)))
        a = Backbone(BackboneConfig(seed=3))(img)
        b = Backbone(BackboneConfig(seed=3))(img)
        for lv in (2, 3, 4):
            assert a[lv].data.tobytes() == b[lv].data.tobytes()

    def test_seed_changes_weights(self):
        a = Backbone(BackboneConfig(seed=0)).params["stage1.weight"].data
        b = Backbone(BackboneConfig(seed=1)).params["stage1.weight"].data
        assert not np.array_equal(a, b)

    def test_indivisible_size(self):
        with pytest.raises(ContractError, match="divisible"):
            Backbone()(Tensor(np.zeros((3, 30, 32))))

    def test_narrow_widths_rejected(self):
        with pytest.raises(ContractError):
            BackboneConfig(widths=(4, 8, 8))

    def test_frozen_has_no_trainable_parameters(self):
        assert Backbone(BackboneConfig(frozen=True)).trainable() == {}
        assert len(Backbone(BackboneConfig(frozen=False)).trainable()) == 8

    def test_translation_equivariance(self):
        rng = np.random.default_rng(2)
        bb = Backbone(BackboneConfig(widths=(8, 8, 8), stem_width=8))
        img = rng.random((3, 48, 48))
        shifted = np.roll(img, 4, axis=2)
        a, b = bb(Tensor(img)), bb(Tensor(shifted))
        # interior columns only: the roll wraps and zero padding breaks equivariance at borders
        np.testing.assert_allclose(b[2].data[:, :, 8:20], a[2].data[:, :, 6:18], rtol=0, atol=1e-12)
        np.testing.assert_allclose(b[3].data[:, :, 4:8], a[3].data[:, :, 3:7], rtol=0, atol=1e-12)
        np.testing.assert_allclose(b[4].data[:, :, 5:7], a[4].data[:, :, 4:6], rtol=0, atol=1e-12)


class TestDownsampleMask:
    def test_all_ones(self):
        for lv in (2, 3, 4):
            out = downsample_mask(np.ones((64, 64)), lv)
            assert np.all(out == 1)

    def test_all_zeros(self):
        assert np.all(downsample_mask(np.zeros((64, 64)), 3) == 0)

    def test_single_pixel_centroid(self):
        m = np.zeros((64, 64))
        m[1, 1] = 1
        out = downsample_mask(m, 3)
        assert out.shape == (16, 16)
        assert out.sum() == 1 and out[0, 0] == 1

    def test_centroid_rule_far_corner(self):
        m = np.zeros((64, 64))
        m[62, 37] = 1
        out = downsample_mask(m, 3)
        # pixel centre (62.5, 37.5) lies in cell (15, 9) of a 4-pixel grid
        assert out.sum() == 1 and out[15, 9] == 1

    def test_explicit_size(self):
        m = np.zeros((32, 32))
        m[8:24, 8:24] = 1
        out = downsample_mask(m, size=(8, 8))
        np.testing.assert_array_equal(out[2:6, 2:6], 1)
        assert out.sum() == 16

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.uint8, (16, 16), elements=st.integers(0, 1)), st.sampled_from([2, 3, 4]))
    def test_binary_and_nonempty(self, mask, level):
        out = downsample_mask(mask, level)
        assert set(np.unique(out)) <= {0.0, 1.0}
        assert (out.sum() > 0) == (mask.sum() > 0)


class TestFrozenTraining:
    def test_frozen_weights_unchanged_by_backward(self):
        bb = Backbone(BackboneConfig(widths=(8, 8, 8), stem_width=8))
        before = {k: v.data.copy() for k, v in bb.params.items()}
        img = T.parameter(np.random.default_rng(3).random((3, 16, 16)))
        T.sum_all(bb(img)[4]).backward()
        for k, v in bb.params.items():
            assert v.grad is None
            assert v.data.tobytes() == before[k].tobytes()
