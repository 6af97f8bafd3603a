"""Unit tests for the sphere tracer, channel I/O and the rendered dataset."""

import math

import numpy as np
import pytest

from desk3d.camgeom import DEFAULT_RADIUS, pose_ring
from desk3d.exceptions import Desk3DDatasetError
from desk3d.promptgen import ManifestRecord, build_manifest, write_manifest
from desk3d.render import (
    PosePolicy,
    RenderedDataset,
    edge_band,
    load_channels,
    policy_poses,
    read_header,
    render_channels,
    render_dataset,
    save_channels,
    shade,
    sphere_trace,
)


class TestSphereTrace:
    """Test suite for the sphere tracer."""

    def test_hits_and_misses(self, unit_sphere_sdf):
        """Test hit distances and background rays."""
        origins = np.array([[0.0, 0.0, -3.0], [0.0, 2.0, -3.0]])
        directions = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        t, hit = sphere_trace(unit_sphere_sdf, origins, directions)
        assert hit.tolist() == [True, False]
        assert t[0] == pytest.approx(2.0, abs=1e-4)
        assert t[1] == 0.0


class TestRenderChannels:
    """Test suite for supervision channels of the procedural sphere."""

    def setup_method(self):
        """Set up a frontal camera."""
        self.pose = pose_ring(4, image_size=32)[0]

    def test_silhouette_area_matches_tangent_cone(self, sphere_scene):
        """Test that the mask area matches the exact projected disc of a unit sphere."""
        view = render_channels(sphere_scene, self.pose)
        focal = self.pose.focal()
        radius_px = focal / math.sqrt(DEFAULT_RADIUS**2 - 1.0)
        expected = math.pi * radius_px**2
        assert view.mask.sum() == pytest.approx(expected, rel=0.03)

    def test_center_pixel_values(self, sphere_scene):
        """Test depth, camera-frame normal, albedo and shading at the image center."""
        view = render_channels(sphere_scene, self.pose)
        center = (15, 15)
        assert view.depth[center] == pytest.approx(DEFAULT_RADIUS - 1.0, abs=1e-2)
        np.testing.assert_allclose(view.normal[center], [0.0, 0.0, -1.0], atol=0.05)
        np.testing.assert_allclose(view.albedo[center], [0.8, 0.1, 0.1], atol=1e-6)
        np.testing.assert_allclose(view.rgb[center], view.albedo[center], atol=0.01)
        assert view.roughness[center] == pytest.approx(0.9)
        assert view.metallic[center] == 0.0

    def test_background_is_zero(self, sphere_scene):
        """Test that background pixels carry zeros in every channel."""
        view = render_channels(sphere_scene, self.pose)
        corner = (0, 0)
        assert view.mask[corner] == 0.0
        assert view.depth[corner] == 0.0
        assert not view.rgb[corner].any()
        assert not view.normal[corner].any()

    def test_normals_are_unit_on_object(self, sphere_scene):
        """Test normal normalization on covered pixels."""
        view = render_channels(sphere_scene, self.pose)
        lengths = np.linalg.norm(view.normal[view.mask > 0.5], axis=-1)
        np.testing.assert_allclose(lengths, 1.0, atol=1e-5)

    def test_deterministic(self, sphere_scene):
        """Test that rendering twice gives identical arrays."""
        first = render_channels(sphere_scene, self.pose, 16)
        second = render_channels(sphere_scene, self.pose, 16)
        np.testing.assert_array_equal(first.rgb, second.rgb)
        np.testing.assert_array_equal(first.depth, second.depth)

    def test_edge_band_excluded_from_interior(self, sphere_scene):
        """Test that interior pixels avoid the boundary band."""
        view = render_channels(sphere_scene, self.pose, 16)
        interior = view.interior()
        assert interior.sum() > 0
        assert not (interior & view.edge).any()
        assert view.edge.sum() > 0


class TestShadingHelpers:
    """Test suite for shading and the edge band."""

    def test_headlight_shading(self):
        """Test ambient plus diffuse response."""
        albedo = np.array([[1.0, 0.5, 0.0]])
        facing = shade(albedo, np.array([[0.0, 0.0, -1.0]]), np.array([[0.0, 0.0, 1.0]]))
        grazing = shade(albedo, np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 0.0, 1.0]]))
        np.testing.assert_allclose(facing, albedo)
        np.testing.assert_allclose(grazing, 0.2 * albedo)

    def test_edge_band_straddles_boundary(self):
        """Test that the band covers one pixel on each side of the boundary."""
        mask = np.zeros((7, 7))
        mask[2:5, 2:5] = 1.0
        band = edge_band(mask)
        assert band[1, 3] and band[2, 3]
        assert not band[3, 3]
        assert not band[0, 3]


class TestChannelFiles:
    """Test suite for channel stacks on disk."""

    def test_quantized_round_trip(self, sphere_scene, tmp_path):
        """Test that saved channels reload within their quantization step."""
        view = render_channels(sphere_scene, pose_ring(4, image_size=16)[1])
        save_channels(view, tmp_path / "view_00")
        loaded = load_channels(tmp_path / "view_00")
        np.testing.assert_allclose(loaded.rgb, view.rgb, atol=0.5 / 255 + 1e-6)
        np.testing.assert_allclose(loaded.depth, view.depth, atol=0.5e-4 + 1e-6)
        np.testing.assert_array_equal(loaded.mask, view.mask)
        np.testing.assert_array_equal(loaded.edge, view.edge)
        solid = view.mask > 0.5
        np.testing.assert_allclose(loaded.normal[solid], view.normal[solid], atol=0.02)

    def test_missing_channel(self, tmp_path):
        """Test that a missing file names the channel."""
        (tmp_path / "empty").mkdir()
        with pytest.raises(Desk3DDatasetError, match="rgb"):
            load_channels(tmp_path / "empty")

    def test_bad_header(self, tmp_path):
        """Test that malformed headers raise dataset errors."""
        path = tmp_path / "header.txt"
        path.write_text("asset_id 1\n", encoding="utf-8")
        with pytest.raises(Desk3DDatasetError, match="view header"):
            read_header(path)


class TestRenderDataset:
    """Test suite for the dataset writer and reader."""

    def test_policy_poses(self):
        """Test that random views follow the fixed ring."""
        poses, ring_count = policy_poses(PosePolicy(ring_views=4, random_views=2), 8, seed=0)
        assert len(poses) == 6
        assert ring_count == 4
        assert poses.label == "custom"
        assert policy_poses(PosePolicy(ring_views=8), 8, 0)[0].label == "8"

    def test_write_and_load(self, tmp_path):
        """Test that only accepted assets are rendered and they load back in id order."""
        records = build_manifest(["a large blue cube", "a red sphere on a red cube", "a red sphere"], seed=0)
        written = render_dataset(records, tmp_path, PosePolicy(ring_views=4, random_views=1), resolution=8)
        assert len(written) == 2 * 5
        assert (tmp_path / "manifest.tsv").is_file()
        assert not (tmp_path / "asset_00001").exists()
        dataset = RenderedDataset.load(tmp_path)
        assert [a.asset_id for a in dataset.assets] == [0, 2]
        assert dataset.resolution == 8
        asset = dataset.assets[1]
        assert asset.prompt == "a medium matte red sphere"
        assert asset.ring_count == 4
        ring_poses, ring_views = asset.ring()
        assert len(ring_poses) == 4 and len(ring_views) == 4

    def test_no_accepted_assets(self, tmp_path):
        """Test that an all-rejected manifest is an error."""
        with pytest.raises(Desk3DDatasetError, match="No accepted"):
            render_dataset([ManifestRecord(0, "a red sphere", 0, False, "thin")], tmp_path)

    def test_missing_views(self, tmp_path):
        """Test that a manifest without renders fails with the asset id."""
        records = [ManifestRecord(3, "a red sphere", 0, True)]
        write_manifest(records, tmp_path / "manifest.tsv")
        with pytest.raises(Desk3DDatasetError, match="Asset 3"):
            RenderedDataset.load(tmp_path)
