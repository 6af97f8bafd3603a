"""Unit tests for the triplane reconstruction model and SDF volume rendering."""

import csv
from dataclasses import replace

import numpy as np
import pytest

from desk3d import gradcore as G
from desk3d.camgeom import DEFAULT_RADIUS, PoseSet, pose_ring
from desk3d.exceptions import Desk3DCheckpointError, Desk3DDatasetError, Desk3DShapeError, Desk3DValidationError
from desk3d.nn import save_checkpoint
from desk3d.reconstruct import (
    METRICS_HEADER,
    AnalyticField,
    ReconInputs,
    ReconModel,
    RenderOutput,
    beta_schedule,
    pixel_footprint,
    query_field,
    ray_box,
    recon_loss,
    reconstruct_views,
    render_views,
    train_recon,
    validation_loss,
    volume_render,
)
from desk3d.render import RenderedDataset, render_channels


def _inputs(dataset, asset=0, count=2):
    poses, views = dataset.assets[asset].ring()
    chosen = list(range(0, len(views), len(views) // count))[:count]
    return ReconInputs.from_views([views[i] for i in chosen], poses.subset(chosen))


def _perfect(target):
    """A render output that reproduces the target channels on every pixel."""
    size = target.resolution
    return RenderOutput(
        np.arange(size * size),
        G.Tensor(target.mask.reshape(-1)),
        G.Tensor(target.depth.reshape(-1)),
        G.Tensor(target.albedo.reshape(-1, 3)),
        G.Tensor(np.stack([target.roughness.reshape(-1), target.metallic.reshape(-1)], axis=1)),
        G.Tensor(target.normal.reshape(-1, 3)),
        np.zeros((size * size, 3)),
        np.zeros((size * size, 3)),
    )


class TestRayBox:
    """Test suite for the unit-cube slab test."""

    def test_hit_miss_and_inside(self):
        """Test entry and exit distances for three rays."""
        origins = np.array([[-3.0, 0.0, 0.0], [-3.0, 2.0, 0.0], [0.0, 0.0, 0.0]])
        directions = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        near, far = ray_box(origins, directions)
        np.testing.assert_allclose(near, [2.0, 0.0, 0.0])
        np.testing.assert_allclose(far, [4.0, 0.0, 1.0])


class TestVolumeRender:
    """Test suite for SDF volume rendering of an analytic field."""

    def setup_method(self):
        """Set up a frontal camera at 16 px."""
        self.pose = pose_ring(4, image_size=16)[0]

    def test_unit_sphere_depth_and_opacity(self, sphere_scene):
        """Test expected depth, opacity and normal on the unit sphere with a sharp density."""
        out = volume_render(AnalyticField(sphere_scene, beta=0.01), self.pose, n_samples=128)
        center = 7 * 16 + 7
        assert out.depth.data[center] == pytest.approx(DEFAULT_RADIUS - 1.0, abs=0.03)
        assert out.mask.data[center] > 0.99
        assert out.mask.data[0] < 0.01
        np.testing.assert_allclose(out.normal.data[center], [0.0, 0.0, -1.0], atol=0.05)

    def test_silhouette_matches_sphere_tracing(self, sphere_scene):
        """Test that the rendered mask agrees with the traced mask away from the boundary band."""
        rendered = render_views(AnalyticField(sphere_scene, beta=0.01), PoseSet([self.pose]), 16)[0]
        traced = render_channels(sphere_scene, self.pose, 16)
        away = ~traced.edge
        np.testing.assert_array_equal(rendered.mask[away], traced.mask[away])

    def test_pixel_subset(self, sphere_scene):
        """Test that a pixel subset renders only the requested rays."""
        out = volume_render(AnalyticField(sphere_scene), self.pose, n_samples=16, pixels=np.array([0, 119, 255]))
        assert out.mask.shape == (3,)
        np.testing.assert_array_equal(out.pixels, [0, 119, 255])

    def test_validation(self, sphere_scene):
        """Test beta and sample-count validation."""
        field_ = AnalyticField(sphere_scene)
        with pytest.raises(Desk3DValidationError, match="n_samples"):
            volume_render(field_, self.pose, n_samples=8)
        with pytest.raises(Desk3DValidationError, match="beta"):
            volume_render(field_, self.pose, beta=0.0)
        with pytest.raises(Desk3DValidationError, match="beta"):
            AnalyticField(sphere_scene, beta=-1.0)


class TestLoss:
    """Test suite for the five-channel reconstruction loss."""

    def test_perfect_prediction(self, sphere_scene):
        """Test that a render equal to its target costs almost nothing."""
        target = render_channels(sphere_scene, pose_ring(4, image_size=8)[0], 8)
        total, breakdown = recon_loss(_perfect(target), target)
        assert breakdown["depth"] == pytest.approx(0.0, abs=1e-6)
        assert breakdown["albedo"] == pytest.approx(0.0, abs=1e-6)
        assert breakdown["material"] == pytest.approx(0.0, abs=1e-6)
        assert breakdown["normal"] == pytest.approx(0.0, abs=1e-5)
        assert breakdown["mask"] < 1e-3
        assert total.item() < 1e-3

    def test_edge_pixels_are_ignored(self, sphere_scene):
        """Test that corrupting only edge-band pixels leaves the loss unchanged."""
        target = render_channels(sphere_scene, pose_ring(4, image_size=8)[0], 8)
        pred = _perfect(target)
        clean = recon_loss(pred, target)[0].item()
        edge = target.edge.reshape(-1)
        pred.depth.data[edge] += 5.0
        pred.mask.data[edge] = 0.5
        assert recon_loss(pred, target)[0].item() == pytest.approx(clean, abs=1e-6)

    def test_shape_errors(self, sphere_scene):
        """Test pixel index and edge bitmap validation."""
        target = render_channels(sphere_scene, pose_ring(4, image_size=8)[0], 8)
        pred = _perfect(target)
        pred.pixels = pred.pixels + 1
        with pytest.raises(Desk3DShapeError, match="exceed"):
            recon_loss(pred, target)
        with pytest.raises(Desk3DShapeError, match="Edge bitmap"):
            recon_loss(_perfect(target), target, edge=np.zeros((4, 4), bool))


class TestBetaSchedule:
    """Test suite for the density sharpening schedule."""

    def test_endpoints_and_monotone(self):
        """Test that beta decays from its start to half a pixel footprint."""
        betas = [beta_schedule(step, 10, 32) for step in range(10)]
        assert betas[0] == pytest.approx(0.1)
        assert betas[-1] == pytest.approx(0.5 * pixel_footprint(32))
        assert all(a > b for a, b in zip(betas, betas[1:]))
        assert beta_schedule(0, 1, 32) == pytest.approx(0.5 * pixel_footprint(32))


class TestReconModel:
    """Test suite for the reconstruction model."""

    def test_parameter_count_ignores_triplane_resolution(self, tiny_recon_config):
        """Test that changing the triplane resolution keeps the parameter count."""
        small = ReconModel(tiny_recon_config)
        large = ReconModel(replace(tiny_recon_config, triplane_res=8))
        assert small.store.num_parameters() == large.store.num_parameters()

    def test_encode_shapes(self, tiny_recon_config, tiny_dataset):
        """Test plane shapes and field query outputs."""
        model = ReconModel(tiny_recon_config)
        field_ = model.encode(_inputs(tiny_dataset))
        assert field_.planes.shape == (3, 4, 4, 4)
        out = field_.query(np.array([[0.0, 0.0, 0.0], [0.5, -0.5, 0.2], [2.0, 0.0, 0.0]], np.float32))
        assert out.sdf.shape == (3,)
        assert out.albedo.shape == (3, 3)
        assert out.material.shape == (3, 2)
        assert out.clamped.tolist() == [False, False, True]
        assert np.all((out.albedo.data >= 0) & (out.albedo.data <= 1))
        single = query_field(field_, np.zeros((1, 3), np.float32))
        np.testing.assert_allclose(single.sdf.data, out.sdf.data[:1], atol=1e-6)

    def test_encode_ignores_view_order(self, tiny_recon_config, tiny_dataset):
        """Test that permuting the input views leaves the triplane unchanged."""
        model = ReconModel(tiny_recon_config)
        inputs = _inputs(tiny_dataset, count=4)
        with G.no_grad():
            planes = model.encode(inputs).planes.data
            permuted = model.encode(inputs.permuted([2, 0, 3, 1])).planes.data
        np.testing.assert_allclose(permuted, planes, atol=1e-5)

    def test_encode_errors(self, tiny_recon_config, tiny_dataset):
        """Test zero views and mismatched pose counts."""
        model = ReconModel(tiny_recon_config)
        inputs = _inputs(tiny_dataset)
        with pytest.raises(Desk3DShapeError, match="at least one"):
            model.encode(ReconInputs(inputs.rgb[:0], inputs.normal[:0], inputs.pose_feats[:0]))
        with pytest.raises(Desk3DShapeError, match="pose"):
            model.encode(ReconInputs(inputs.rgb, inputs.normal, inputs.pose_feats[:1]))

    def test_config_validation(self, tiny_recon_config):
        """Test triplane resolution and patch validation."""
        with pytest.raises(Desk3DValidationError, match="even"):
            ReconModel(replace(tiny_recon_config, triplane_res=5))
        with pytest.raises(Desk3DShapeError, match="does not divide"):
            ReconModel(replace(tiny_recon_config, patch=3))

    def test_checkpoint_round_trip(self, tiny_recon_config, tmp_path):
        """Test that weights, beta and the trained flag survive a save and load."""
        model = ReconModel(tiny_recon_config, seed=4)
        model.beta = 0.02
        model.trained = True
        model.save(tmp_path / "recon.ckpt")
        loaded = ReconModel.load(tmp_path / "recon.ckpt")
        assert loaded.config == tiny_recon_config
        assert loaded.beta == pytest.approx(0.02)
        assert loaded.trained
        assert loaded.store.checksum() == model.store.checksum()

    def test_foreign_checkpoint(self, tmp_path):
        """Test that a denoiser checkpoint is not loaded as a reconstruction model."""
        save_checkpoint(tmp_path / "m.ckpt", {"w": np.zeros(1, np.float32)}, {"kind": "mvdiff"})
        with pytest.raises(Desk3DCheckpointError, match="not a reconstruction"):
            ReconModel.load(tmp_path / "m.ckpt")


class TestTraining:
    """Test suite for reconstruction training and evaluation."""

    def test_train_writes_metrics(self, tiny_recon_config, tiny_dataset, tmp_path):
        """Test losses, beta bookkeeping and the metrics CSV."""
        model = ReconModel(tiny_recon_config)
        metrics = tmp_path / "metrics.csv"
        log = train_recon(
            model, tiny_dataset, n_input_views=2, steps=2, ray_batch=16, n_samples=16, metrics_csv=metrics, log_every=0
        )
        assert len(log.losses) == 2
        assert np.all(np.isfinite(log.losses))
        assert model.trained
        assert model.beta == pytest.approx(log.betas[-1])
        with open(metrics, encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == METRICS_HEADER
        assert [row[0] for row in rows[1:]] == ["0", "1"]

    def test_train_empty_dataset(self, tiny_recon_config):
        """Test that training needs data."""
        with pytest.raises(Desk3DDatasetError, match="empty"):
            train_recon(ReconModel(tiny_recon_config), RenderedDataset(), steps=1)

    def test_validation_loss_is_deterministic(self, tiny_recon_config, tiny_dataset):
        """Test that validation loss repeats exactly."""
        model = ReconModel(tiny_recon_config)
        first = validation_loss(model, tiny_dataset, n_input_views=2, n_samples=16)
        assert first == validation_loss(model, tiny_dataset, n_input_views=2, n_samples=16)
        assert np.isfinite(first)
        with pytest.raises(Desk3DDatasetError):
            validation_loss(model, RenderedDataset())

    def test_reconstruct_views(self, tiny_recon_config, tiny_dataset):
        """Test that novel views come back as channel stacks at the model resolution."""
        model = ReconModel(tiny_recon_config)
        poses = pose_ring(3, image_size=8)
        views = reconstruct_views(model, _inputs(tiny_dataset), poses, n_samples=16)
        assert len(views) == 3
        assert views[0].rgb.shape == (8, 8, 3)
        assert set(np.unique(views[0].mask)) <= {0.0, 1.0}
