"""Pytest configuration and fixtures for desk3d tests."""

from collections import Counter

import numpy as np
import pytest

from desk3d.camgeom import pose_ring
from desk3d.meshops import TriMesh
from desk3d.mvdiff import DenoiserConfig
from desk3d.promptgen import parse_prompt, realize_scene
from desk3d.reconstruct import ReconConfig
from desk3d.render import PosePolicy, RenderedDataset, render_asset


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow trend reproductions")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def sphere_scene():
    """Procedural unit-radius red sphere."""
    return realize_scene(parse_prompt("a red sphere"))


@pytest.fixture
def unit_sphere_sdf():
    """Analytic SDF of the unit sphere."""

    def sdf(points):
        return np.linalg.norm(np.asarray(points, dtype=np.float64).reshape(-1, 3), axis=1) - 1.0

    return sdf


@pytest.fixture
def ring4():
    """Four-camera ring at 16 px."""
    return pose_ring(4, image_size=16)


@pytest.fixture
def tiny_denoiser_config():
    """Denoiser small enough for unit tests (8 px, 4 tokens per view)."""
    return DenoiserConfig(resolution=8, patch=4, dim=16, heads=2, depth=1, timesteps=10)


@pytest.fixture(scope="session")
def tiny_recon_config():
    """Reconstruction model small enough for unit tests."""
    return ReconConfig(
        resolution=8, patch=4, dim=16, heads=2, depth=1, triplane_res=4, plane_channels=4, base_grid=2, head_hidden=8
    )


@pytest.fixture(scope="session")
def tiny_dataset():
    """Two rendered assets at 8 px with a 16-view ring each."""
    prompts = ["a red sphere", "a large blue cube"]
    assets = [
        render_asset(realize_scene(parse_prompt(p)), i, PosePolicy(ring_views=16), resolution=8, seed=i)
        for i, p in enumerate(prompts)
    ]
    return RenderedDataset(assets, 8)


class TestHelper:
    """Helper class for common test operations."""

    @staticmethod
    def numeric_gradient(fn, x, h=1e-6):
        """Central finite-difference gradient of a scalar function of an array."""
        x = np.array(x, dtype=np.float64)
        grad = np.zeros_like(x)
        for index in np.ndindex(x.shape):
            original = x[index]
            x[index] = original + h
            plus = fn(x)
            x[index] = original - h
            minus = fn(x)
            x[index] = original
            grad[index] = (plus - minus) / (2 * h)
        return grad

    @staticmethod
    def assert_two_manifold(mesh: TriMesh):
        """Assert every undirected edge is shared by exactly two triangles."""
        counts = Counter()
        for tri in mesh.triangles:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                counts[(min(a, b), max(a, b))] += 1
        bad = [edge for edge, count in counts.items() if count != 2]
        assert not bad, f"{len(bad)} non-manifold edges, e.g. {bad[:3]}"

    @staticmethod
    def radial_deviation(mesh: TriMesh, radius=1.0):
        """Largest distance of a vertex from the sphere of the given radius."""
        return float(np.max(np.abs(np.linalg.norm(mesh.vertices, axis=1) - radius)))


@pytest.fixture
def test_helper():
    """Provide TestHelper instance for tests."""
    return TestHelper
