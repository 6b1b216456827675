import math

import numpy as np
import pytest

from multinet import ops
from multinet.encoder import FeaturePyramid
from multinet.model import MultiNet
from multinet.ops import ShapeError
from multinet.seg_decoder import SegOutput, bilinear_weight, seg_forward, seg_init, seg_loss
from multinet.tensor import Tensor

from conftest import tiny_config
from oracles import bilinear_resize, logsumexp_ce


def cascade(scores):
    return bilinear_resize(bilinear_resize(bilinear_resize(scores, 2), 2), 8)


def zero_skips(model):
    for k in ("seg.skip16.weight", "seg.skip8.weight"):
        model.params[k].data[...] = 0.0


class TestSegInit:
    def test_stride_two_kernel_row(self):
        w = bilinear_weight(1, 2, np.float64)
        np.testing.assert_allclose(w[0, 0], np.outer([0.25, 0.75, 0.75, 0.25], [0.25, 0.75, 0.75, 0.25]))

    def test_kernels_channel_diagonal(self):
        w = bilinear_weight(3, 8)
        assert np.all(w[0, 1] == 0) and np.all(w[2, 0] == 0)

    def test_seeds_differ_only_in_learned_parts(self):
        cfg = tiny_config().encoder
        a, b = seg_init(cfg, 1), seg_init(cfg, 2)
        for k in a:
            same = np.array_equal(a[k], b[k])
            if k.startswith("seg.up"):
                assert same, k
            elif k.endswith(".weight"):
                assert not same, k

    def test_skip_weights_are_tiny(self):
        p = seg_init(tiny_config().encoder, 0)
        assert p["seg.skip8.weight"].std() < 3e-4


class TestSegForward:
    def test_output_matches_input_size(self, tiny_model):
        out = tiny_model.forward(np.random.default_rng(0).random((2, 3, 64, 96)), ["seg"])["seg"]
        assert out.logits.shape == (2, 2, 64, 96)
        np.testing.assert_allclose(out.probability.sum(axis=1), 1.0, atol=1e-6)

    def test_published_input_score_grid(self):
        cfg = tiny_config(h=384, w=1248, channels=(2, 2, 2, 2, 2))
        model = MultiNet(cfg, seed=0)
        out = model.forward(np.zeros((1, 3, 384, 1248)), ["seg"])["seg"]
        assert out.scores32.shape[2:] == (12, 39)

    def test_zeroed_skips_equal_bilinear_cascade(self, tiny_model):
        zero_skips(tiny_model)
        out = tiny_model.forward(np.random.default_rng(1).random((1, 3, 64, 96)), ["seg"])["seg"]
        np.testing.assert_allclose(out.logits.data, cascade(out.scores32.data), atol=1e-9)

    def test_default_skips_stay_close_to_cascade(self, tiny_model):
        out = tiny_model.forward(np.random.default_rng(2).random((1, 3, 64, 96)), ["seg"])["seg"]
        ref = cascade(out.scores32.data)
        assert np.abs(out.logits.data - ref).max() <= 1e-2 * np.abs(ref).max()

    def test_constant_scores_give_constant_map(self, tiny_model):
        zero_skips(tiny_model)
        tiny_model.params["seg.score.weight"].data[...] = 0.0
        tiny_model.params["seg.score.bias"].data[...] = [0.3, -1.2]
        out = tiny_model.forward(np.random.default_rng(3).random((1, 3, 64, 96)), ["seg"])["seg"]
        np.testing.assert_allclose(out.logits.data[0, 0], 0.3, atol=1e-12)
        np.testing.assert_allclose(out.logits.data[0, 1], -1.2, atol=1e-12)

    def test_flip_equivariance_with_zeroed_skips(self, tiny_model):
        zero_skips(tiny_model)
        img = np.random.default_rng(4).random((1, 3, 64, 96))
        a = tiny_model.forward(img, ["seg"])["seg"].logits.data
        # the random encoder is not flip-equivariant, so flip its features instead
        pyr = tiny_model.encode(img)
        flipped = FeaturePyramid(*(Tensor(t.data[..., ::-1].copy()) for t in (pyr.f8, pyr.f16, pyr.f32)))
        c = seg_forward(tiny_model.params, flipped).logits.data
        np.testing.assert_allclose(c, a[..., ::-1], atol=1e-6)

    def test_pyramid_mismatch_rejected(self, tiny_model):
        pyr = tiny_model.encode(np.zeros((1, 3, 64, 96)))
        bad = FeaturePyramid(pyr.f8, pyr.f16, Tensor(np.zeros((1, 3, 2, 3))))
        with pytest.raises(ShapeError, match="channels"):
            seg_forward(tiny_model.params, bad)

    def test_hard_mask_threshold(self):
        logits = np.zeros((1, 2, 1, 3))
        logits[0, 1] = [-1.0, 0.0, 1.0]
        out = SegOutput(Tensor(logits), Tensor(np.zeros((1, 2, 1, 1))))
        assert out.hard_mask().tolist() == [[[0, 1, 1]]]


class TestSegLoss:
    def _out(self, logits):
        return SegOutput(Tensor(logits, requires_grad=True), Tensor(np.zeros(1)))

    def test_uniform_is_ln2(self):
        assert seg_loss(self._out(np.zeros((1, 2, 4, 4))), np.zeros((1, 4, 4), int)).item() == pytest.approx(math.log(2))

    def test_confident_correct_near_zero(self):
        mask = np.random.default_rng(0).integers(0, 2, (1, 4, 4))
        logits = np.stack([np.where(mask == 0, 30.0, -30.0), np.where(mask == 1, 30.0, -30.0)], axis=1)
        assert seg_loss(self._out(logits), mask).item() < 1e-20

    def test_random_matches_oracle(self, rng):
        logits = rng.normal(size=(2, 2, 3, 5))
        mask = rng.integers(0, 2, (2, 3, 5))
        expected = np.mean([logsumexp_ce(logits[n, :, i, j], mask[n, i, j])
                            for n in range(2) for i in range(3) for j in range(5)])
        assert seg_loss(self._out(logits), mask).item() == pytest.approx(expected, abs=1e-12)

    def test_rejects_class_two(self):
        mask = np.zeros((1, 4, 4), int)
        mask[0, 0, 0] = 2
        with pytest.raises(ValueError, match="class index 2"):
            seg_loss(self._out(np.zeros((1, 2, 4, 4))), mask)

    def test_gradient_reaches_first_encoder_layer(self, tiny_model, rng):
        img = rng.random((1, 3, 64, 96))
        out = tiny_model.forward(img, ["seg"])["seg"]
        seg_loss(out, rng.integers(0, 2, (1, 64, 96))).backward()
        assert np.abs(tiny_model.params["encoder.conv1.weight"].grad).sum() > 0
