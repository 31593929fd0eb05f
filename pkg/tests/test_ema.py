"""Alignment block: initialization degeneracy, event-term behavior, the
composition oracle, and the structure loss."""

import numpy as np
import pytest

from evdepth import autodiff as ad
from evdepth.autodiff import Variable
from evdepth.deform import ema_redistribute
from evdepth.ema import (ema_forward, init_ema_stage, structure_loss,
                         structure_projection)
from evdepth.gradcheck import check_gradients
from evdepth.verification import ema_block_case


def stage_f64(seed, c):
    rng = np.random.default_rng(seed)
    return init_ema_stage(rng, c, dtype=np.float64), rng


class TestInitializationDegeneracy:
    def test_collapses_to_plain_convs(self):
        # alpha = beta = 0 and zero offset heads: the block must equal
        # t6(conv(I, w_img) + conv(S, w_dep)) exactly
        stage, rng = stage_f64(0, 3)
        feats = [Variable(rng.normal(size=(3, 6, 6))) for _ in range(3)]
        out = ema_forward(*feats, stage)
        ref_img = ad.conv2d(feats[0], stage.w_img, None, stride=1, pad=1)
        ref_dep = ad.conv2d(feats[1], stage.w_dep, None, stride=1, pad=1)
        ref = stage.t6.apply(ad.add(ref_img, ref_dep))
        assert np.array_equal(out.fused.data, ref.data)
        assert np.all(out.offsets_image.data == 0.0)

    def test_zero_event_feature_drops_event_term(self):
        stage, rng = stage_f64(1, 2)
        stage.alpha.data = np.asarray(0.9)
        stage.beta.data = np.asarray(-0.4)
        feat_i = Variable(rng.normal(size=(2, 5, 5)))
        feat_s = Variable(rng.normal(size=(2, 5, 5)))
        zero_e = Variable(np.zeros((2, 5, 5)))
        out_zero = ema_forward(feat_i, feat_s, zero_e, stage)
        # output must be independent of the event transform weights
        stage.t2.w.data = stage.t2.w.data * 0 + 123.0
        out_changed = ema_forward(feat_i, feat_s, zero_e, stage)
        assert np.allclose(out_zero.fused.data, out_changed.fused.data, atol=1e-12)


class TestCompositionOracle:
    def test_matches_straight_line_reference(self):
        stage, rng = stage_f64(2, 2)
        # non-degenerate scalars and heads
        stage.alpha.data = np.asarray(0.3)
        stage.beta.data = np.asarray(-0.2)
        stage.t4.w.data = rng.normal(0, 0.01, size=stage.t4.w.data.shape)
        stage.t4.b.data = rng.normal(0, 0.3, size=stage.t4.b.data.shape)
        stage.t5.w.data = rng.normal(0, 0.01, size=stage.t5.w.data.shape)
        stage.t5.b.data = rng.normal(0, 0.3, size=stage.t5.b.data.shape)
        feat_i = Variable(rng.normal(size=(2, 6, 6)))
        feat_s = Variable(rng.normal(size=(2, 6, 6)))
        feat_e = Variable(rng.normal(size=(2, 6, 6)))
        out = ema_forward(feat_i, feat_s, feat_e, stage)

        # reference composition out of already-oracled primitives
        ev = ad.conv2d(feat_e, stage.t2.w, stage.t2.b, 1, 1)
        ev_i, ev_s = ad.split_channels(ev)
        q_i = ad.add(ad.conv2d(feat_i, stage.t1.w, stage.t1.b, 1, 1),
                     ad.scalar_mul(ev_i, 0.3))
        q_s = ad.add(ad.conv2d(feat_s, stage.t3.w, stage.t3.b, 1, 1),
                     ad.scalar_mul(ev_s, -0.2))
        off_i = ad.slice_channels(ad.conv2d(q_i, stage.t4.w, stage.t4.b, 1, 1), 0, 18)
        off_s = ad.slice_channels(ad.conv2d(q_s, stage.t5.w, stage.t5.b, 1, 1), 0, 18)
        al_i = ema_redistribute(feat_i, stage.w_img, off_i)
        al_s = ema_redistribute(feat_s, stage.w_dep, off_s)
        ref = ad.conv2d(ad.add(al_i, al_s), stage.t6.w, stage.t6.b, 1, 1)
        assert np.allclose(out.fused.data, ref.data, atol=1e-12)

    def test_shape_mismatch_raises(self):
        stage, rng = stage_f64(3, 2)
        good = Variable(np.zeros((2, 4, 4)))
        bad = Variable(np.zeros((2, 4, 5)))
        with pytest.raises(ValueError, match="shapes differ"):
            ema_forward(good, bad, good, stage)
        with pytest.raises(ValueError, match="event feature"):
            ema_forward(good, good, bad, stage)


class TestStructureLoss:
    def test_identical_branches_zero(self):
        stage, rng = stage_f64(4, 2)
        feat = Variable(rng.normal(size=(2, 5, 5)))
        loss = structure_loss([(feat, feat, stage)])
        assert loss.data == 0.0

    def test_equal_constant_branches_zero(self):
        stage, _ = stage_f64(5, 2)
        a = Variable(np.full((2, 6, 6), 1.3))
        b = Variable(np.full((2, 6, 6), 1.3))
        loss = structure_loss([(a, b, stage)])
        assert loss.data == 0.0

    def test_differing_constants_see_border_structure(self):
        # zero padding makes the projection of a constant map non-constant at
        # the border, so unequal constants leave a residual there
        stage, _ = stage_f64(5, 2)
        a = Variable(np.full((2, 6, 6), 1.3))
        b = Variable(np.full((2, 6, 6), -0.7))
        assert structure_loss([(a, b, stage)]).data > 0.0

    def test_composition_oracle(self):
        stage, rng = stage_f64(6, 3)
        a = Variable(rng.normal(size=(3, 4, 4)))
        b = Variable(rng.normal(size=(3, 4, 4)))
        loss = structure_loss([(a, b, stage)])
        ga = ad.spatial_gradient(ad.minmax_normalize(
            ad.conv2d(a, stage.g_conv.w, stage.g_conv.b, 1, 1)))
        gb = ad.spatial_gradient(ad.minmax_normalize(
            ad.conv2d(b, stage.g_conv.w, stage.g_conv.b, 1, 1)))
        want = float(((ga.data - gb.data) ** 2).sum()) / ga.data.size
        assert loss.data == pytest.approx(want, rel=1e-12)

    def test_nonnegative_and_projection_shared(self):
        stage, rng = stage_f64(7, 2)
        for _ in range(5):
            a = Variable(rng.normal(size=(2, 4, 4)))
            b = Variable(rng.normal(size=(2, 4, 4)))
            assert structure_loss([(a, b, stage)]).data >= 0.0
        p = structure_projection(Variable(rng.normal(size=(2, 4, 4))), stage.g_conv)
        assert p.shape == (2, 4, 4)


class TestGradients:
    def test_block_gradients_match_finite_differences(self):
        loss, variables = ema_block_case()
        res = check_gradients(loss, variables, max_coords_per_var=6,
                              rng=np.random.default_rng(0))
        assert res.passed, res.failures[:5]

    def test_alpha_beta_gradient_blocked_only_at_exact_init(self):
        # the zero offset heads cut the only gradient path into the mixing
        # scalars at step 0; any head perturbation restores it
        stage, rng = stage_f64(8, 2)
        feats = [Variable(rng.normal(size=(2, 5, 5))) for _ in range(3)]
        out = ema_forward(*feats, stage)
        ad.mean(out.fused).backward()
        assert np.all(stage.alpha.grad == 0.0)
        # offset-channel head biases train immediately; the unused modulation
        # channels are sliced away and stay at zero gradient
        assert np.any(stage.t4.b.grad[:18] != 0.0)
        assert np.all(stage.t4.b.grad[18:] == 0.0)

        stage.t4.w.data = rng.normal(0, 0.01, size=stage.t4.w.data.shape)
        stage.t5.w.data = rng.normal(0, 0.01, size=stage.t5.w.data.shape)
        stage.alpha.zero_grad()
        stage.beta.zero_grad()
        out = ema_forward(*feats, stage)
        ad.mean(out.fused).backward()
        assert float(np.abs(stage.alpha.grad).item()) > 0.0
        assert float(np.abs(stage.beta.grad).item()) > 0.0
