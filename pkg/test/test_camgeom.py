"""Unit tests for camera poses, rings and rays."""

import math

import numpy as np
import pytest

from desk3d.camgeom import (
    DEFAULT_FOV_Y,
    DEFAULT_RADIUS,
    POSE_SET_LABELS,
    CameraPose,
    generate_rays,
    load_pose_set,
    look_at,
    pose_features,
    pose_ring,
    project_points,
    random_pose,
    ring_indices,
    save_pose_set,
    standard_pose_set,
)
from desk3d.exceptions import Desk3DDatasetError, Desk3DValidationError


class TestPoseRing:
    """Test suite for pose rings and the standard ablation sets."""

    def test_cameras_on_circle_looking_at_origin(self):
        """Test ring radius, elevation and view direction."""
        ring = pose_ring(8, elevation=20.0)
        for pose in ring:
            assert np.linalg.norm(pose.position) == pytest.approx(DEFAULT_RADIUS)
            assert math.degrees(math.asin(pose.position[2] / DEFAULT_RADIUS)) == pytest.approx(20.0)
            np.testing.assert_allclose(pose.forward, -pose.position / DEFAULT_RADIUS, atol=1e-12)

    def test_first_camera_is_frontal(self):
        """Test that azimuth 0 lies on +x."""
        position = pose_ring(4)[0].position
        assert position[0] > 0
        assert position[1] == pytest.approx(0.0, abs=1e-12)

    def test_labels(self):
        """Test ring labels for the standard sets."""
        assert pose_ring(4).label == "4"
        assert pose_ring(4, azimuth_offset=45.0).label == "4-diagonal"
        assert pose_ring(16).label == "16"
        assert pose_ring(5).label == "custom"

    def test_shifted_ring_is_cyclic_rotation(self):
        """Test that offsetting by one step reorders the same cameras."""
        base = pose_ring(6, azimuth_offset=10.0).features()
        shifted = pose_ring(6, azimuth_offset=10.0 + 60.0).features()
        np.testing.assert_allclose(shifted, np.roll(base, -1, axis=0), atol=1e-9)

    @pytest.mark.parametrize("label", POSE_SET_LABELS)
    def test_standard_sets_are_subsets_of_16_ring(self, label):
        """Test that every ablation set picks cameras of the 16-camera ring."""
        ring16 = pose_ring(16)
        expected = ring16.subset(ring_indices(label)).features()
        np.testing.assert_allclose(standard_pose_set(label).features(), expected, atol=1e-9)

    def test_invalid_arguments(self):
        """Test argument validation."""
        with pytest.raises(Desk3DValidationError):
            pose_ring(0)
        with pytest.raises(Desk3DValidationError, match="radius"):
            pose_ring(4, radius=0.0)
        with pytest.raises(Desk3DValidationError, match="Unknown pose set"):
            standard_pose_set("3")
        with pytest.raises(Desk3DValidationError, match="Unknown pose set"):
            ring_indices("12")


class TestCameraPose:
    """Test suite for CameraPose validation and helpers."""

    def test_rejects_non_rotation(self):
        """Test that scaled or mirrored matrices are rejected."""
        with pytest.raises(Desk3DValidationError, match="orthonormal"):
            CameraPose(np.eye(3) * 2.0, np.zeros(3))
        with pytest.raises(Desk3DValidationError, match="determinant"):
            CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_rejects_bad_fov_and_size(self):
        """Test fov and image size validation."""
        with pytest.raises(Desk3DValidationError, match="fov_y"):
            CameraPose(np.eye(3), np.zeros(3), fov_y=0.0)
        with pytest.raises(Desk3DValidationError, match="image_size"):
            CameraPose(np.eye(3), np.zeros(3), image_size=0)

    def test_look_at_degenerate(self):
        """Test that a camera at its target is rejected."""
        with pytest.raises(Desk3DValidationError):
            look_at((0.0, 0.0, 0.0))

    def test_look_at_straight_down(self):
        """Test that a camera on the up axis still gets a valid frame."""
        rotation, _ = look_at((0.0, 0.0, 3.0))
        CameraPose(rotation, np.zeros(3))

    def test_equality_and_resize(self):
        """Test pose equality and image size changes."""
        pose = pose_ring(4)[1]
        assert pose == pose_ring(4)[1]
        assert pose != pose_ring(4)[2]
        resized = pose.with_image_size(64)
        assert resized.image_size == 64
        assert resized.focal() == pytest.approx(2.0 * pose.focal())

    def test_pose_features(self):
        """Test the 12-value layout and that the translation carries the camera distance."""
        pose = pose_ring(4)[1]
        feats = pose_features(pose)
        assert feats.shape == (12,) and feats.dtype == np.float32
        np.testing.assert_allclose(feats[:9], pose.rotation.reshape(-1), atol=1e-7)
        assert np.linalg.norm(feats[9:]) == pytest.approx(DEFAULT_RADIUS, rel=1e-6)
        np.testing.assert_array_equal(pose_ring(4).features()[1], feats)


class TestRays:
    """Test suite for rays and projection."""

    def test_rays_are_unit_and_start_at_camera(self):
        """Test ray normalization and origins."""
        pose = pose_ring(4, image_size=8)[0]
        rays = generate_rays(pose)
        assert rays.directions.shape == (8, 8, 3)
        np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=-1), 1.0)
        np.testing.assert_allclose(rays.origins[3, 5], pose.position)

    def test_projection_inverts_rays(self):
        """Test that a point on a pixel's ray projects to that pixel's center."""
        pose = pose_ring(4, image_size=6)[2]
        rays = generate_rays(pose)
        points = (rays.origins + 2.0 * rays.directions).reshape(-1, 3)
        pixels, depth = project_points(pose, points)
        rows, cols = np.meshgrid(np.arange(6), np.arange(6), indexing="ij")
        np.testing.assert_allclose(pixels[:, 0], cols.reshape(-1), atol=1e-9)
        np.testing.assert_allclose(pixels[:, 1], rows.reshape(-1), atol=1e-9)
        assert np.all(depth > 0)

    def test_origin_projects_to_image_center(self):
        """Test that the look-at target lands at the image center."""
        pose = pose_ring(8, image_size=16)[3]
        pixels, depth = project_points(pose, np.zeros((1, 3)))
        np.testing.assert_allclose(pixels[0], [7.5, 7.5], atol=1e-9)
        assert depth[0] == pytest.approx(DEFAULT_RADIUS)

    def test_up_is_image_top(self):
        """Test that world +z projects above the center (smaller row)."""
        pose = pose_ring(4, elevation=0.0, image_size=16)[0]
        pixels, _ = project_points(pose, np.array([[0.0, 0.0, 0.5]]))
        assert pixels[0, 1] < 7.5

    def test_resolution_validation(self):
        """Test ray resolution validation."""
        with pytest.raises(Desk3DValidationError):
            generate_rays(pose_ring(1)[0], resolution=0)


class TestRandomPoses:
    """Test suite for randomized cameras."""

    def test_frame_fill_is_constant(self):
        """Test that radius follows fov so a unit sphere fills the same image fraction."""
        target = 1.0 / (math.sqrt(DEFAULT_RADIUS**2 - 1.0) * math.tan(0.5 * DEFAULT_FOV_Y))
        rng = np.random.default_rng(3)
        for _ in range(5):
            pose = random_pose(rng)
            radius = np.linalg.norm(pose.position)
            fill = 1.0 / (math.sqrt(radius**2 - 1.0) * math.tan(0.5 * pose.fov_y))
            assert fill == pytest.approx(target)
            elevation = math.degrees(math.asin(pose.position[2] / radius))
            assert -10.0 <= elevation <= 40.0


class TestPoseSetFiles:
    """Test suite for pose set text files."""

    def test_save_and_load(self, tmp_path):
        """Test that a saved ring loads back with its label."""
        ring = pose_ring(4, image_size=12)
        save_pose_set(ring, tmp_path / "ring.txt")
        loaded = load_pose_set(tmp_path / "ring.txt")
        assert loaded.label == "4"
        assert all(a == b for a, b in zip(loaded, ring))

    def test_malformed_line(self, tmp_path):
        """Test that a short line names the file position."""
        path = tmp_path / "bad.txt"
        path.write_text("1 2 3\n", encoding="utf-8")
        with pytest.raises(Desk3DDatasetError, match="expected 14 fields"):
            load_pose_set(path)
