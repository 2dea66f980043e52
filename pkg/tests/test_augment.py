import numpy as np
import pytest

from o2rnet.augment import (
    AugmentSpec,
    GeometricParams,
    apply_color,
    apply_geometric,
    apply_pixel_filters,
    augment_pipeline,
    mixup,
    preset,
)
from o2rnet.data import SynthConfig, generate_synthetic_scene
from o2rnet.geometry import Box


@pytest.fixture
def record():
    return generate_synthetic_scene(SynthConfig(seed=21, image_size=(100, 100)), 0)


class TestGeometric:
    def test_identity(self, record):
        out = apply_geometric(record, GeometricParams())
        assert out.annotation.boxes == record.annotation.boxes
        # bilinear warp with an exact identity matrix reproduces pixels
        np.testing.assert_array_equal(out.pixels, record.pixels)

    def test_horizontal_reflection_box(self, record):
        out_ann = apply_geometric(
            _with_single_box(record, Box(10, 20, 30, 40)),
            GeometricParams(reflect_h=True)).annotation
        assert out_ann.boxes == [Box(70, 20, 90, 40)]

    def test_rotation_matches_corner_oracle(self, record):
        rng = np.random.default_rng(4)
        for _ in range(20):
            params = GeometricParams(
                rotation_deg=float(rng.uniform(-180, 180)),
                scale=float(rng.uniform(0.7, 1.3)),
                translate=(float(rng.uniform(-10, 10)), float(rng.uniform(-10, 10))),
                shear_deg=float(rng.uniform(-20, 20)),
            )
            out = apply_geometric(record, params)
            m = params.matrix(record.image_size)
            expected = []
            for box in record.annotation.boxes:
                corners = np.array([[box.x1, box.y1], [box.x2, box.y1],
                                    [box.x1, box.y2], [box.x2, box.y2]])
                warped = corners @ m[:, :2].T + m[:, 2]
                b = Box(warped[:, 0].min(), warped[:, 1].min(),
                        warped[:, 0].max(), warped[:, 1].max()).clip((100.0, 100.0))
                if b.area > 0:
                    expected.append(b)
            assert out.annotation.boxes == expected

    def test_ninety_degree_rotation(self, record):
        # (0,0,10,20) about the center of a 100x100 image, rotated 90 deg
        rec = _with_single_box(record, Box(0, 0, 10, 20))
        out = apply_geometric(rec, GeometricParams(rotation_deg=90.0))
        (b,) = out.annotation.boxes
        # corner-transform oracle: rotating by +90 in pixel coords (y down)
        m = GeometricParams(rotation_deg=90.0).matrix((100, 100))
        corners = np.array([[0, 0], [10, 0], [0, 20], [10, 20]]) @ m[:, :2].T + m[:, 2]
        assert b == Box(corners[:, 0].min(), corners[:, 1].min(),
                        corners[:, 0].max(), corners[:, 1].max()).clip((100.0, 100.0))

    def test_boxes_outside_dropped(self, record):
        rec = _with_single_box(record, Box(0, 0, 8, 8))
        out = apply_geometric(rec, GeometricParams(translate=(200.0, 0.0)))
        assert out.annotation.boxes == []


class TestColor:
    def test_identity(self, record):
        out = apply_color(record, gain=1.0, offset=0.0)
        np.testing.assert_array_equal(out.pixels, record.pixels)

    def test_saturation(self, record):
        out = apply_color(record, gain=1.0, offset=255.0)
        assert (out.pixels == 255).all()

    def test_contrast_formula(self, record):
        rec = record
        rec.pixels[:] = 100
        out = apply_color(rec, gain=2.0, offset=0.0)
        assert (out.pixels == 72).all()

    def test_output_in_range(self, record):
        out = apply_color(record, gain=3.0, offset=-100.0)
        assert out.pixels.dtype == np.uint8


class TestPixelFilters:
    def test_identity(self, record):
        out = apply_pixel_filters(record, 0.0, 0.0)
        np.testing.assert_array_equal(out.pixels, record.pixels)

    def test_noise_deterministic(self, record):
        a = apply_pixel_filters(record, 10.0, 0.0, np.random.default_rng(3))
        b = apply_pixel_filters(record, 10.0, 0.0, np.random.default_rng(3))
        np.testing.assert_array_equal(a.pixels, b.pixels)
        assert not np.array_equal(a.pixels, record.pixels)

    def test_sharpen_constant_image(self, record):
        record.pixels[:] = 77
        out = apply_pixel_filters(record, 0.0, 0.5)
        assert (out.pixels == 77).all()


class TestMixup:
    def make_pair(self):
        a = generate_synthetic_scene(SynthConfig(seed=1, image_size=(80, 80),
                                                 objects_per_image=(3, 3)), 0)
        b = generate_synthetic_scene(SynthConfig(seed=2, image_size=(80, 80),
                                                 objects_per_image=(2, 2)), 0)
        return a, b

    def test_alpha_one(self):
        a, b = self.make_pair()
        out = mixup(a, b, 1.0)
        np.testing.assert_array_equal(out.pixels, a.pixels)
        # union of boxes, minus partner boxes swallowed by a primary box
        assert out.annotation.boxes[:len(a.annotation.boxes)] == list(a.annotation.boxes)
        for box in out.annotation.boxes[len(a.annotation.boxes):]:
            assert box in b.annotation.boxes

    def test_overlapping_partner_boxes_dropped(self):
        a, _ = self.make_pair()
        out = mixup(a, a, 0.5)
        # a perfect double exposure contributes no partner labels at all
        assert list(out.annotation.boxes) == list(a.annotation.boxes)

    def test_midpoint(self):
        a, b = self.make_pair()
        a.pixels[:] = 100
        b.pixels[:] = 200
        assert (mixup(a, b, 0.5).pixels == 150).all()

    def test_symmetry(self):
        a, b = self.make_pair()
        # exactly representable alpha: bitwise symmetric
        np.testing.assert_array_equal(mixup(a, b, 0.25).pixels,
                                      mixup(b, a, 0.75).pixels)
        # non-dyadic alpha: symmetric to within rounding of the blend
        diff = (mixup(a, b, 0.3).pixels.astype(int)
                - mixup(b, a, 0.7).pixels.astype(int))
        assert np.abs(diff).max() <= 1

    def test_size_mismatch_resizes(self):
        a, _ = self.make_pair()
        c = generate_synthetic_scene(SynthConfig(seed=3, image_size=(40, 40)), 0)
        out = mixup(a, c, 0.5)
        assert out.image_size == a.image_size
        for box in out.annotation.boxes:
            assert box.x2 <= 80 and box.y2 <= 80


class TestPipeline:
    def test_disabled_is_identity(self, record):
        out = augment_pipeline(record, AugmentSpec(), 0)
        np.testing.assert_array_equal(out.pixels, record.pixels)
        assert out.annotation.boxes == record.annotation.boxes

    def test_deterministic(self, record):
        spec = preset("all", seed=11)
        pool = [generate_synthetic_scene(SynthConfig(seed=99, image_size=(100, 100)), 0)]
        a = augment_pipeline(record, spec, 5, pool)
        b = augment_pipeline(record, spec, 5, pool)
        np.testing.assert_array_equal(a.pixels, b.pixels)
        assert a.annotation.boxes == b.annotation.boxes

    def test_distinct_draws_differ(self, record):
        spec = preset("gts-csts-mixup", seed=11)
        a = augment_pipeline(record, spec, 0)
        b = augment_pipeline(record, spec, 1)
        assert not np.array_equal(a.pixels, b.pixels)

    def test_pixels_stay_in_range(self, record):
        spec = preset("all", seed=2)
        out = augment_pipeline(record, spec, 3, [record])
        assert out.pixels.dtype == np.uint8

    def test_best_preset_families(self):
        assert preset("gts-csts-mixup").families == {"geometric", "color", "mixup"}

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            preset("nope")


def _with_single_box(record, box):
    from o2rnet.data import Annotation, ImageRecord

    ann = Annotation(image_id=record.image_id, boxes=[box], labels=[1],
                     occluded=[False])
    return ImageRecord(record.image_id, record.pixels.copy(), ann)
