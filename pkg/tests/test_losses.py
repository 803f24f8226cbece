import math

import numpy as np
import pytest

from radekit.geometry import Box3D, bin_centers_xy
from radekit.gradcheck import TINY_GEOMETRY, random_frame
from radekit.losses import (
    LossConfig,
    box_distance2,
    box_from_raw,
    box_gaussian,
    build_targets,
    center_bin,
    encode_box,
    focal_loss,
    gwd_distance2,
    gwd_distance2_trace,
    gwd_loss,
    gwd_loss_raw,
    match_predictions,
    smooth_l1_loss,
    total_loss,
)
from radekit.network import HeadOutputs
from radekit.tensor import SensorGeometry

G = SensorGeometry(n_r=32, n_a=20, n_d=8, n_e=8, range_max=40.0, azimuth_fov=60.0, elevation_fov=30.0)

from oracles import fd, focal_oracle, rel


def box_at(r, a, **kw):
    xb, yb = bin_centers_xy(G, r, a)
    vals = dict(z=0.5, l=4.0, w=2.0, h=1.5, yaw=0.3)
    vals.update(kw)
    return Box3D(float(xb), float(yb), vals["z"], vals["l"], vals["w"], vals["h"], vals["yaw"])


class TestTargets:
    def test_peak_and_falloff(self):
        t = build_targets([(1, box_at(10, 8))], G, 3)
        m = t.focal.map[1]
        assert m[10, 8] == 1.0
        assert m[13, 8] == pytest.approx(math.exp(-0.5))
        assert m[10, 11] == pytest.approx(math.exp(-0.5))
        assert not t.focal.map[2].any() and not t.focal.map[0].any()
        assert t.mask.sum() == 1 and t.focal.peaks == ((1, 10, 8),)

    def test_padding_untouched(self):
        t = build_targets([(1, box_at(10, G.n_a - 1))], G, 3)
        assert not t.focal.map[:, :, G.n_a :].any()

    def test_overlap_is_max(self):
        t = build_targets([(1, box_at(10, 8)), (1, box_at(10, 10))], G, 3)
        m = t.focal.map[1]
        assert m[10, 9] == pytest.approx(math.exp(-1 / 18))

    def test_shared_bin_first_wins(self):
        a, b = box_at(10, 8, l=3.0), box_at(10, 8, l=5.0)
        t1 = build_targets([(1, a), (1, b)], G, 3)
        t2 = build_targets([(1, b), (1, a)], G, 3)
        assert np.array_equal(t1.params, t2.params)
        assert t1.params[3, 10, 8] == pytest.approx(math.log(3.0))

    def test_errors(self):
        with pytest.raises(ValueError):
            build_targets([(3, box_at(4, 4))], G, 3)
        with pytest.raises(ValueError):
            center_bin(G, Box3D(-5, 0, 0, 1, 1, 1))

    def test_encode_round_trip(self, rng):
        for _ in range(20):
            box = box_at(int(rng.integers(32)), int(rng.integers(20)), yaw=rng.uniform(-3, 3))
            r, a = center_bin(G, box)
            xb, yb = bin_centers_xy(G, r, a)
            back = box_from_raw(encode_box(G, box, r, a), (float(xb), float(yb), G.z0))
            np.testing.assert_allclose(back.as_array(), box.as_array(), atol=1e-12)


class TestFocal:
    def test_oracle(self, rng):
        for _ in range(10):
            y = build_targets([(1, box_at(5, 5)), (2, box_at(20, 12))], G, 3).focal.map
            conf = rng.uniform(0, 1, y.shape)
            conf.ravel()[:5] = (0.0, 1.0, 1e-9, 1 - 1e-9, 0.5)
            assert focal_loss(conf, y)[0] == pytest.approx(focal_oracle(conf, y), abs=1e-9)

    def test_near_perfect(self):
        y = build_targets([(1, box_at(5, 5))], G, 3).focal.map
        conf = np.where(y == 1.0, 1 - 1e-4, 1e-4)
        assert focal_loss(conf, y)[0] < 1e-4

    def test_gradient(self, rng):
        cfg = LossConfig()
        for _ in range(20):
            y = build_targets([(1, box_at(4, 3))], G, 2).focal.map[:, :8, :8].copy()
            y[1, 2, 2] = 1.0
            conf = rng.uniform(0.02, 0.98, y.shape)
            _, g = focal_loss(conf, y, cfg)
            assert rel(g, fd(lambda c: focal_loss(c, y, cfg)[0], conf)) < 1e-3

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            focal_loss(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)))


class TestSmoothL1:
    @pytest.mark.parametrize("d,expect", [(0.0, 0.0), (0.5, 0.125), (-0.5, 0.125), (1.0, 0.5), (2.0, 1.5), (-3.0, 2.5)])
    def test_values(self, d, expect):
        assert smooth_l1_loss(np.array([d]), np.array([0.0]))[0] == pytest.approx(expect, abs=1e-12)

    def test_oracle(self, rng):
        p, t = rng.normal(0, 2, (6, 8)), rng.normal(0, 2, (6, 8))
        ref = np.mean([0.5 * d * d if abs(d) < 1 else abs(d) - 0.5 for d in (p - t).ravel()])
        assert smooth_l1_loss(p, t)[0] == pytest.approx(ref, abs=1e-12)

    def test_mask(self, rng):
        p, t = rng.normal(0, 2, (8, 4, 5)), rng.normal(0, 2, (8, 4, 5))
        mask = np.zeros((4, 5), bool)
        mask[1, 2] = mask[3, 0] = True
        v, g = smooth_l1_loss(p, t, mask)
        sel = np.stack([p[:, 1, 2] - t[:, 1, 2], p[:, 3, 0] - t[:, 3, 0]])
        assert v == pytest.approx(smooth_l1_loss(sel, np.zeros_like(sel))[0])
        assert not g[:, 0, 0].any()
        assert smooth_l1_loss(p, t, np.zeros((4, 5), bool)) == (0.0, pytest.approx(np.zeros_like(p)))

    def test_gradient(self, rng):
        for _ in range(20):
            p, t = rng.normal(0, 2, (4, 8)), rng.normal(0, 2, (4, 8))
            near = np.abs(np.abs(p - t) - 1) < 1e-3
            p[near] += 0.01
            _, g = smooth_l1_loss(p, t)
            assert rel(g, fd(lambda x: smooth_l1_loss(x, t)[0], p)) < 1e-3


def random_box(rng):
    return Box3D(*rng.normal(0, 3, 3), *np.exp(rng.normal(0.5, 0.5, 3)), rng.uniform(-math.pi, math.pi))


class TestGWD:
    def test_self_distance_zero(self, rng):
        for _ in range(100):
            b = random_box(rng)
            assert box_distance2(b, b) == pytest.approx(0.0, abs=1e-12)

    def test_identical_loss(self, rng):
        for mode in ("3d", "bev"):
            b = random_box(rng)
            assert gwd_loss(b, b, LossConfig(gwd_mode=mode)) == pytest.approx(1 - 1 / 1.65, abs=1e-9)

    def test_shift_only(self):
        a = Box3D(0, 0, 0, 4, 2, 1.5, 0.4)
        assert box_distance2(a, a.moved(dx=1.0)) == pytest.approx(1.0, abs=1e-12)
        assert gwd_loss(a, a.moved(dx=1.0)) == pytest.approx(1 - 1 / 2.65, abs=1e-12)

    def test_axis_aligned_closed_form(self):
        # commuting covariances: Bures term is the squared difference of half-extents
        a = Box3D(0, 0, 0, 4, 2, 1)
        b = Box3D(0, 0, 0, 2, 3, 2)
        expect = (2 - 1) ** 2 + (1 - 1.5) ** 2 + (0.5 - 1) ** 2
        assert box_distance2(a, b) == pytest.approx(expect, abs=1e-12)

    def test_half_turn_symmetry(self):
        a = Box3D(0, 0, 0, 4, 2, 1, 0.3)
        assert box_distance2(a, a.moved(dyaw=math.pi)) == pytest.approx(0.0, abs=1e-12)

    def test_symmetry_and_trace_form(self, rng):
        for _ in range(300):
            a, b = random_box(rng), random_box(rng)
            d_ab = box_distance2(a, b)
            assert d_ab == pytest.approx(box_distance2(b, a), abs=1e-9)
            ga, gb = box_gaussian(a), box_gaussian(b)
            assert d_ab == pytest.approx(gwd_distance2_trace(*ga, *gb), abs=1e-9)

    def test_bev_mode(self):
        a = Box3D(0, 0, 0, 4, 2, 1)
        b = Box3D(0, 0, 3, 4, 2, 5)
        assert box_distance2(a, b, "bev") == pytest.approx(0.0, abs=1e-12)
        assert box_distance2(a, b, "3d") > 9

    def test_not_positive_definite(self):
        with pytest.raises(ValueError):
            gwd_distance2(np.zeros(2), np.diag([1.0, 0.0]), np.zeros(2), np.eye(2))

    @pytest.mark.parametrize("mode", ["3d", "bev"])
    def test_gradient(self, rng, mode):
        cfg = LossConfig(gwd_mode=mode)
        for _ in range(100):
            ref = tuple(rng.uniform(-20, 20, 3))
            raw = np.concatenate([rng.normal(0, 1, 3), rng.normal(0.5, 0.5, 3), rng.normal(0, 1, 2)])
            gt = random_box(rng).moved(*ref)
            v, g = gwd_loss_raw(raw, ref, gt, cfg)
            assert v == pytest.approx(gwd_loss(box_from_raw(raw, ref), gt, cfg), abs=1e-12)
            assert rel(g, fd(lambda r: gwd_loss_raw(r, ref, gt, cfg)[0], raw)) < 1e-3


class TestTotal:
    def test_gradient_frozen_normalizers(self, rng):
        cfg = LossConfig()
        frames = [random_frame(rng) for _ in range(2)]
        rep = total_loss(frames, TINY_GEOMETRY, cfg)
        assert rep.l_gwd > 0 and rep.l_l1 > 0

        def f_params(p):
            b = [(HeadOutputs(frames[0][0].conf, p), frames[0][1]), frames[1]]
            return total_loss(b, TINY_GEOMETRY, cfg, rep.normalizers).l_all

        def f_conf(c):
            b = [(HeadOutputs(c, frames[0][0].params), frames[0][1]), frames[1]]
            return total_loss(b, TINY_GEOMETRY, cfg, rep.normalizers).l_all

        assert rel(rep.grad_params[0], fd(f_params, frames[0][0].params)) < 1e-3
        assert rel(rep.grad_conf[0], fd(f_conf, frames[0][0].conf)) < 1e-3

    def test_identical_batch_normalized_to_one(self, rng):
        h, gt = random_frame(rng)
        rep = total_loss([(h, gt), (h, gt)], TINY_GEOMETRY)
        assert (rep.n_foc, rep.n_gwd, rep.n_l1) == (pytest.approx(1.0), pytest.approx(1.0), pytest.approx(1.0))
        assert rep.l_all == pytest.approx(4.0)

    def test_gt_order_independent(self, rng):
        h, gt = random_frame(rng)
        a = total_loss([(h, gt)], TINY_GEOMETRY)
        b = total_loss([(h, gt[::-1])], TINY_GEOMETRY)
        assert a.record() == b.record()
        assert np.array_equal(a.grad_params[0], b.grad_params[0])

    def test_weights(self, rng):
        h, gt = random_frame(rng)
        cfg = LossConfig(w_foc=0.0, w_gwd=0.0, w_l1=1.0)
        rep = total_loss([(h, gt)], TINY_GEOMETRY, cfg)
        assert rep.l_all == pytest.approx(rep.n_l1)
        assert not any(g.any() for g in rep.grad_conf)

    def test_no_matches(self):
        conf = np.full((3, 8, 8), 0.05)
        params = np.zeros((8, 8, 8))
        gt = [(1, box_from_raw(np.zeros(8), (10.0, 0.0, 0.0)))]
        rep = total_loss([(HeadOutputs(conf, params), gt)], TINY_GEOMETRY)
        assert rep.l_gwd == 0.0 and rep.l_l1 == 0.0 and rep.n_gwd == 0.0
        assert not rep.grad_params[0].any()

    def test_record(self, rng):
        rep = total_loss([random_frame(rng)], TINY_GEOMETRY)
        vals = [float(v) for v in rep.record().split()]
        assert vals == [rep.l_foc, rep.l_gwd, rep.l_l1, rep.l_all]

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            total_loss([], TINY_GEOMETRY)

    def test_matching_same_class_only(self, rng):
        h, gt = random_frame(rng)
        matches, gts = match_predictions(h, gt, TINY_GEOMETRY, LossConfig())
        assert matches
        for r, a, j in matches:
            assert h.conf[gts[j][0], r, a] >= 0.3
