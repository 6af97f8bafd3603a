"""Longer training runs checking that the models actually learn (opt-in with --runslow)."""

import numpy as np
import pytest

from desk3d.bench import consistency_score
from desk3d.mvdiff import MultiViewDenoiser, train_mvdiff
from desk3d.reconstruct import ReconModel, train_recon, validation_loss


@pytest.fixture(scope="module")
def trained_recon(tiny_recon_config, tiny_dataset):
    """Reconstruction model trained on two-view inputs of the tiny dataset."""
    model = ReconModel(tiny_recon_config, seed=0)
    train_recon(model, tiny_dataset, n_input_views=2, steps=400, ray_batch=64, n_samples=16, ema_decay=0.9, log_every=0)
    return model


def _views(asset, indices):
    poses, views = asset.ring()
    rgb = np.stack([views[i].rgb for i in indices])
    normal = np.stack([views[i].normal for i in indices])
    return rgb, normal, poses.subset(indices)


@pytest.mark.slow
class TestLearningTrends:
    """Test suite for loss trends over a few hundred steps."""

    def test_recon_validation_loss_drops(self, tiny_recon_config, tiny_dataset):
        """Test that training lowers the held-in validation loss."""
        model = ReconModel(tiny_recon_config, seed=0)
        before = validation_loss(model, tiny_dataset, n_input_views=2, n_samples=16)
        train_recon(
            model, tiny_dataset, n_input_views=2, steps=300, ray_batch=32, n_samples=16, ema_decay=0.9, log_every=0
        )
        after = validation_loss(model, tiny_dataset, n_input_views=2, n_samples=16)
        assert after < before

    def test_denoiser_loss_drops(self, tiny_denoiser_config, tiny_dataset):
        """Test that the late denoising loss is below the early one."""
        model = MultiViewDenoiser(tiny_denoiser_config, seed=0)
        losses = train_mvdiff(model, tiny_dataset, {1: 0.5, 4: 0.5}, steps=300, log_every=0)
        assert np.mean(losses[-50:]) < np.mean(losses[:50])


@pytest.mark.slow
class TestConsistencyOrdering:
    """Test suite for consistency-score orderings under a trained reconstruction model."""

    def test_one_asset_beats_mixed_assets(self, trained_recon, tiny_dataset):
        """Test that two views of one asset are more consistent than views of two different assets."""
        sphere, cube = tiny_dataset.assets
        rgb, normal, poses = _views(sphere, [0, 8])
        same = consistency_score(trained_recon, rgb, normal, poses, n_samples=16)
        cube_rgb, cube_normal, _ = _views(cube, [0, 8])
        mixed_rgb = np.stack([rgb[0], cube_rgb[1]])
        mixed_normal = np.stack([normal[0], cube_normal[1]])
        mixed = consistency_score(trained_recon, mixed_rgb, mixed_normal, poses, n_samples=16)
        assert same <= mixed

    def test_duplicated_view_scores_worse(self, trained_recon, tiny_dataset):
        """Test that one cube view claimed at two poses scores worse than the real pair."""
        cube = tiny_dataset.assets[1]
        rgb, normal, poses = _views(cube, [0, 2])
        true_pair = consistency_score(trained_recon, rgb, normal, poses, n_samples=16)
        duplicated = consistency_score(
            trained_recon, np.stack([rgb[0], rgb[0]]), np.stack([normal[0], normal[0]]), poses, n_samples=16
        )
        assert duplicated > true_pair
