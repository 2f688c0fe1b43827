import math

import numpy as np
import pytest

from deform_families import (
    Augmentation, DeformSpec, apply_beading, apply_bend_twist, apply_fanning, apply_spec,
    augment, augmentation_matrix, augmentation_suite, canonical_cylinder, dataset_split,
    fanning_offset, quarter_turn, rotate90, scale,
)
from mesh_io import bounding_box_center, inverted_count, total_volume
from recon_errors import DeformError


class TestCanonicalCylinder:
    def test_default_budget_and_volume(self, cylinder):
        assert abs(cylinder.n_vertices - 315) <= 0.1 * 315
        assert total_volume(cylinder) == pytest.approx(math.pi * 1.0 ** 2 * 5.0, rel=0.05)
        assert inverted_count(cylinder) == 0

    def test_extent(self, cylinder):
        v = cylinder.vertices
        assert v[:, 2].min() == 0.0
        assert v[:, 2].max() == pytest.approx(5.0)
        assert np.linalg.norm(v[:, :2], axis=1).max() == pytest.approx(1.0)

    def test_small_budget_layout(self, small_cylinder):
        assert small_cylinder.n_vertices == 45

    @pytest.mark.parametrize("budget", [20, 21, 22, 24, 31, 32, 45, 57, 100, 315, 1000])
    def test_any_budget_lands_within_tolerance(self, budget):
        mesh = canonical_cylinder(1.0, 5.0, budget)
        assert abs(mesh.n_vertices - budget) <= 0.1 * budget
        assert inverted_count(mesh) == 0
        assert total_volume(mesh) > 0

    def test_budget_too_small(self):
        with pytest.raises(DeformError):
            canonical_cylinder(vertex_budget=10)

    def test_aspect_ratio_limit(self):
        with pytest.raises(DeformError, match="aspect"):
            canonical_cylinder(radius=0.001, height=5.0)

    def test_non_positive_size(self):
        with pytest.raises(DeformError):
            canonical_cylinder(radius=0.0)


class TestBendTwist:
    def test_zero_bend_is_identity(self, cylinder):
        assert np.array_equal(apply_bend_twist(cylinder, 0.0).vertices, cylinder.vertices)

    def test_top_displacement_and_fixed_base(self, cylinder):
        bent = apply_bend_twist(cylinder, 0.3)
        dx = bent.vertices[:, 0] - cylinder.vertices[:, 0]
        z = cylinder.vertices[:, 2]
        assert np.allclose(dx[z == 0.0], 0.0)
        assert np.allclose(dx[np.isclose(z, 5.0)], 0.3 * 5.0)

    def test_bend_preserves_volume(self, cylinder, bent_cylinder):
        # each tet spans two layers, so the shear is affine per element
        assert total_volume(bent_cylinder) == pytest.approx(total_volume(cylinder), rel=1e-10)

    def test_half_twist_turns_top_by_pi(self, small_cylinder):
        twisted = apply_bend_twist(small_cylinder, 0.0, twist=0.5)
        top = np.isclose(small_cylinder.vertices[:, 2], 2.0)
        assert np.allclose(twisted.vertices[top, :2], -small_cylinder.vertices[top, :2], atol=1e-12)
        assert inverted_count(twisted) == 0

    def test_bend_out_of_range(self, cylinder):
        with pytest.raises(DeformError):
            apply_bend_twist(cylinder, 1.5)


class TestFanning:
    def test_top_slope_matches_fan_angle(self):
        h = np.array([1.0 - 1e-6, 1.0])
        x = fanning_offset(h, 5.0, 32.0)
        slope = (x[1] - x[0]) / (1e-6 * 5.0)
        assert slope == pytest.approx(math.tan(math.radians(32.0)), rel=1e-4)

    def test_centroid_curve_tilt_at_top(self, cylinder):
        fanned = apply_fanning(cylinder, 32.0)
        z = fanned.vertices[:, 2]
        levels = np.unique(z)
        cx = np.array([fanned.vertices[z == lv, 0].mean() for lv in levels])
        slope = np.polyval(np.polyder(np.polyfit(levels, cx, 5)), levels[-1])
        assert math.degrees(math.atan(slope)) == pytest.approx(32.0, abs=0.5)
        cy = np.array([fanned.vertices[z == lv, 1].mean() for lv in levels])
        assert np.allclose(cy, 0.0, atol=1e-12)

    def test_volume_preserved(self, cylinder):
        fanned = apply_fanning(cylinder, 46.0)
        assert total_volume(fanned) == pytest.approx(total_volume(cylinder), rel=1e-10)

    def test_zero_angle_is_identity(self, cylinder):
        assert np.array_equal(apply_fanning(cylinder, 0.0).vertices, cylinder.vertices)

    def test_right_angle_rejected(self, cylinder):
        with pytest.raises(DeformError):
            apply_fanning(cylinder, 90.0)


class TestBeading:
    def test_zero_beads_is_identity(self, cylinder):
        assert np.array_equal(apply_beading(cylinder, 0, 0.3).vertices, cylinder.vertices)

    def test_bead_peak_radius(self, cylinder):
        beaded = apply_beading(cylinder, 2, 0.3)
        layer = np.isclose(cylinder.vertices[:, 2], 1.25)
        assert layer.any()
        radius = np.linalg.norm(beaded.vertices[layer, :2], axis=1).max()
        assert radius == pytest.approx(1.3, abs=1e-12)

    @pytest.mark.parametrize("count", [2, 3, 4])
    def test_radius_maxima_match_bead_count(self, cylinder, count):
        beaded = apply_beading(cylinder, count, 0.3)
        z = beaded.vertices[:, 2]
        radius = np.linalg.norm(beaded.vertices[:, :2], axis=1)
        profile = np.array([radius[z == lv].max() for lv in np.unique(z)])
        # merge plateaus where a peak falls midway between two layers
        keep = np.concatenate([[True], ~np.isclose(np.diff(profile), 0.0, atol=1e-12)])
        profile = profile[keep]
        peaks = (profile[1:-1] > profile[:-2]) & (profile[1:-1] > profile[2:])
        assert int(peaks.sum()) == count

    def test_amplitude_limit(self, cylinder):
        with pytest.raises(DeformError):
            apply_beading(cylinder, 2, 0.6)

    def test_negative_count(self, cylinder):
        with pytest.raises(DeformError):
            apply_beading(cylinder, -1, 0.3)


class TestSpecs:
    def test_apply_spec_dispatch(self, cylinder):
        spec = DeformSpec('bend_twist', bend_coeff=0.3)
        assert np.array_equal(apply_spec(cylinder, spec).vertices,
                              apply_bend_twist(cylinder, 0.3).vertices)

    def test_unknown_kind(self):
        with pytest.raises(DeformError):
            DeformSpec('melting')

    def test_labels_are_distinct(self):
        labels = {DeformSpec('bend_twist', bend_coeff=b, twist_coeff=t).label()
                  for b in (0.0, 0.1, 0.3, 0.5) for t in (0.0, 0.5)}
        assert len(labels) == 8

    @pytest.mark.parametrize("spec,split", [
        (DeformSpec('beading', bead_count=3, bead_amplitude=0.3), 'train'),
        (DeformSpec('beading', bead_count=4, bead_amplitude=0.3), 'test'),
        (DeformSpec('fanning', fan_angle=33.0), 'train'),
        (DeformSpec('fanning', fan_angle=32.0), 'test'),
        (DeformSpec('bend_twist', bend_coeff=0.3), 'any'),
    ])
    def test_dataset_split(self, spec, split):
        assert dataset_split(spec) == split


class TestAugmentations:
    def test_suite_size(self):
        assert len(augmentation_suite()) == 16

    def test_quarter_turn(self):
        assert np.allclose(quarter_turn('z') @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
        assert np.array_equal(quarter_turn('x', 4), np.eye(3))

    def test_rotation_matrices_are_proper(self):
        for op in augmentation_suite():
            if op.kind != 'scale':
                m = augmentation_matrix(op)
                assert np.allclose(m @ m.T, np.eye(3))
                assert np.linalg.det(m) == pytest.approx(1.0)

    def test_suite_volumes(self, small_bent):
        base = total_volume(small_bent)
        for op in augmentation_suite():
            out = augment(small_bent, op)
            expected = base * (op.factor if op.kind == 'scale' else 1.0)
            assert total_volume(out) == pytest.approx(expected, rel=1e-10), op.label()

    def test_rotation_fixes_bbox_center(self, small_bent):
        out = augment(small_bent, rotate90('x', 'y'))
        assert np.allclose(bounding_box_center(out), bounding_box_center(small_bent))

    def test_invalid_augmentations(self):
        with pytest.raises(DeformError):
            scale('x', 0.0)
        with pytest.raises(DeformError):
            Augmentation('rotate90', ('w',))
