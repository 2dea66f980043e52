import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from o2rnet.geometry import (
    AnchorConfig,
    Box,
    FESConfig,
    ScoredBox,
    apply_deltas,
    apply_deltas_batch,
    encode_deltas,
    encode_deltas_batch,
    fes_expand,
    fes_expand_batch,
    generate_anchors,
    iou,
    nms,
)
from oracles import brute_force_nms, rasterized_iou

finite_coord = st.floats(0, 50, allow_nan=False, allow_infinity=False)


def aligned_box(rng, span=20.0, grid=0.1):
    x1, y1 = rng.integers(0, int(span / grid) // 2, size=2) * grid
    w, h = (rng.integers(1, int(span / grid) // 2, size=2)) * grid
    return Box(x1, y1, x1 + w, y1 + h)


def random_box(rng, span=200.0, min_size=1.0):
    x1, y1 = rng.uniform(0, span - min_size, size=2)
    w, h = rng.uniform(min_size, span / 3, size=2)
    return Box(x1, y1, x1 + w, y1 + h)


class TestIoU:
    def test_identity(self):
        assert iou(Box(0, 0, 10, 10), Box(0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 10, 10), Box(20, 20, 30, 30)) == 0.0

    def test_quarter_overlap_against_fine_raster(self):
        # 5x5 overlap of two 10x10 boxes: 25/175
        a, b = Box(0, 0, 10, 10), Box(5, 5, 15, 15)
        expected = rasterized_iou(a.as_tuple(), b.as_tuple(), resolution=0.01)
        assert iou(a, b) == pytest.approx(25 / 175, abs=1e-12)
        assert iou(a, b) == pytest.approx(expected, abs=1e-6)

    def test_degenerate_zero_area(self):
        assert iou(Box(5, 5, 5, 5), Box(5, 5, 5, 5)) == 0.0

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            v = iou(a, b)
            assert 0.0 <= v <= 1.0
            assert v == iou(b, a)

    def test_matches_rasterized_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(300):
            a, b = aligned_box(rng), aligned_box(rng)
            assert iou(a, b) == pytest.approx(
                rasterized_iou(a.as_tuple(), b.as_tuple()), abs=1e-6)

    def test_unity_iff_identical(self):
        a = Box(0, 0, 10, 10)
        assert iou(a, Box(0, 0, 10, 10.001)) < 1.0


class TestBox:
    def test_inverted_rejected(self):
        with pytest.raises(ValueError):
            Box(5, 0, 0, 5)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            Box(0, 0, math.inf, 5)

    def test_clip(self):
        assert Box(-5, -5, 200, 90).clip((100, 80)) == Box(0, 0, 100, 80)


class TestNMS:
    def test_basic_suppression(self):
        cands = [
            ScoredBox(Box(0, 0, 10, 10), 0.9),
            ScoredBox(Box(1, 1, 11, 11), 0.8),
            ScoredBox(Box(20, 20, 30, 30), 0.7),
        ]
        assert iou(cands[0].box, cands[1].box) == pytest.approx(81 / 119)
        kept = nms(cands, 0.5)
        assert kept == [cands[0], cands[2]]

    def test_empty_and_singleton(self):
        assert nms([], 0.5) == []
        single = [ScoredBox(Box(0, 0, 5, 5), 0.5)]
        assert nms(single, 0.5) == single

    def test_threshold_one_keeps_overlapping(self):
        cands = [
            ScoredBox(Box(0, 0, 10, 10), 0.9),
            ScoredBox(Box(1, 1, 11, 11), 0.8),
        ]
        assert nms(cands, 1.0) == cands

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(1, 21))
            cands = [ScoredBox(random_box(rng, span=60), float(rng.uniform()))
                     for _ in range(n)]
            for thr in (0.2, 0.5, 0.8):
                kept = nms(cands, thr)
                ref = brute_force_nms([c.box.as_tuple() for c in cands],
                                      [c.score for c in cands], thr)
                assert [cands.index(k) for k in kept] == ref

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(5)
        cands = [ScoredBox(random_box(rng, span=50), float(rng.uniform()))
                 for _ in range(15)]
        lo = {c.box.as_tuple() for c in nms(cands, 0.3)}
        hi = {c.box.as_tuple() for c in nms(cands, 0.7)}
        assert lo <= hi


class TestAnchors:
    def test_single_cell_unit_ratio(self):
        cfg = AnchorConfig(strides=(16,), scales=(16.0,), aspect_ratios=(1.0,))
        anchors = generate_anchors((1, 1), cfg, 16)
        np.testing.assert_allclose(anchors, [[0, 0, 16, 16]])

    def test_count(self):
        cfg = AnchorConfig(strides=(16,), scales=(16.0,), aspect_ratios=(1.0,))
        assert generate_anchors((2, 2), cfg, 16).shape == (4, 4)
        cfg2 = AnchorConfig(strides=(8,), scales=(8.0, 16.0), aspect_ratios=(0.5, 1.0, 2.0))
        assert generate_anchors((3, 5), cfg2, 8).shape == (3 * 5 * 6, 4)

    def test_aspect_ratio_shape(self):
        cfg = AnchorConfig(strides=(16,), scales=(16.0,), aspect_ratios=(4.0,))
        (a,) = generate_anchors((1, 1), cfg, 16)
        w, h = a[2] - a[0], a[3] - a[1]
        assert w == pytest.approx(32.0)
        assert h == pytest.approx(8.0)
        assert (a[0] + a[2]) / 2 == pytest.approx(8.0)
        assert (a[1] + a[3]) / 2 == pytest.approx(8.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            AnchorConfig(scales=())
        with pytest.raises(ValueError):
            AnchorConfig(scales=(-1.0,))


class TestFES:
    IMG = (1280.0, 720.0)

    def test_east_extension(self):
        out = fes_expand(Box(100, 100, 200, 200), FESConfig(t=1), self.IMG)
        assert out[1] == Box(100, 100, 210, 200)

    def test_northeast_extension(self):
        out = fes_expand(Box(100, 100, 200, 200), FESConfig(t=1), self.IMG)
        assert out[2] == Box(100, 90, 210, 200)

    def test_clipped_at_border(self):
        out = fes_expand(Box(0, 0, 100, 100), FESConfig(t=1), self.IMG)
        # W direction (index 5) cannot extend past x=0
        assert out[5] == Box(0, 0, 100, 100)

    def test_t_zero_copies(self):
        box = Box(10, 10, 50, 50)
        out = fes_expand(box, FESConfig(t=0), self.IMG)
        assert len(out) == 9
        assert all(b == box for b in out)

    def test_contract_random(self):
        rng = np.random.default_rng(9)
        for t in (1, 2, 3):
            cfg = FESConfig(t=t)
            for _ in range(100):
                box = random_box(rng, span=500)
                out = fes_expand(box, cfg, self.IMG)
                assert len(out) == cfg.k + 1
                assert out[0] == box.clip(self.IMG)
                clipped = box.clip(self.IMG)
                for b in out:
                    # contains the (clipped) input and stays in bounds
                    assert b.x1 <= clipped.x1 + 1e-9 and b.y1 <= clipped.y1 + 1e-9
                    assert b.x2 >= clipped.x2 - 1e-9 and b.y2 >= clipped.y2 - 1e-9
                    assert b.x1 >= 0 and b.y1 >= 0
                    assert b.x2 <= self.IMG[0] and b.y2 <= self.IMG[1]

    def test_translate_mode(self):
        out = fes_expand(Box(100, 100, 200, 200),
                         FESConfig(t=1, mode="translate"), self.IMG)
        assert out[1] == Box(110, 100, 210, 200)

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(13)
        props = np.array([random_box(rng, span=400).as_tuple() for _ in range(5)])
        batch = fes_expand_batch(props, FESConfig(t=2), self.IMG)
        assert batch.shape == (5, 9, 4)
        for i in range(5):
            scalar = fes_expand(Box(*props[i]), FESConfig(t=2), self.IMG)
            np.testing.assert_allclose(batch[i], [b.as_tuple() for b in scalar])


class TestDeltas:
    def test_identity(self):
        a = Box(0, 0, 10, 10)
        assert encode_deltas(a, a) == pytest.approx((0, 0, 0, 0))

    def test_hand_value(self):
        assert encode_deltas(Box(0, 0, 10, 10), Box(5, 0, 15, 10)) == pytest.approx(
            (0.5, 0, 0, 0))

    @given(
        x1=finite_coord, y1=finite_coord,
        w1=st.floats(0.5, 40), h1=st.floats(0.5, 40),
        x2=finite_coord, y2=finite_coord,
        w2=st.floats(0.5, 40), h2=st.floats(0.5, 40),
    )
    @settings(max_examples=200, deadline=None)
    def test_round_trip(self, x1, y1, w1, h1, x2, y2, w2, h2):
        anchor = Box(x1, y1, x1 + w1, y1 + h1)
        target = Box(x2, y2, x2 + w2, y2 + h2)
        rec = apply_deltas(anchor, encode_deltas(anchor, target))
        for got, want in zip(rec.as_tuple(), target.as_tuple()):
            assert got == pytest.approx(want, abs=1e-9)

    def test_degenerate_target_rejected(self):
        with pytest.raises(ValueError):
            encode_deltas(Box(0, 0, 10, 10), Box(5, 5, 5, 9))

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(17)
        anchors = np.array([random_box(rng).as_tuple() for _ in range(8)])
        targets = np.array([random_box(rng).as_tuple() for _ in range(8)])
        deltas = encode_deltas_batch(anchors, targets)
        np.testing.assert_allclose(apply_deltas_batch(anchors, deltas), targets,
                                   atol=1e-9)
        for i in range(8):
            np.testing.assert_allclose(
                deltas[i], encode_deltas(Box(*anchors[i]), Box(*targets[i])))
