"""Unit tests for mesh extraction, quads, UV atlases, baking and OBJ export."""

import numpy as np
import pytest
from PIL import Image

from desk3d.camgeom import pose_ring
from desk3d.exceptions import Desk3DMeshError, Desk3DValidationError
from desk3d.meshops import (
    AssetBundle,
    ProjectionView,
    QuadMesh,
    SceneInstance,
    TriMesh,
    backproject_refine,
    bake_textures,
    export_obj,
    marching_cubes,
    rasterize_uv,
    read_obj,
    sample_texture,
    transform_vertices,
    tris_to_quads,
    uv_atlas,
    weld,
    write_scene_obj,
)
from desk3d.render import trace_channels

ALBEDO = (0.2, 0.6, 0.4)


class ConstantSource:
    """Attribute source with one albedo and material everywhere."""

    def attributes(self, points):
        count = len(points)
        return np.tile(ALBEDO, (count, 1)), np.full(count, 0.3), np.full(count, 1.0)


def _box_sdf(points, half=0.5):
    q = np.abs(np.asarray(points, dtype=np.float64).reshape(-1, 3)) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    return outside + np.minimum(q.max(axis=1), 0.0)


@pytest.fixture(scope="module")
def sphere_mesh():
    """Unit sphere extracted on a 32^3 grid."""
    return marching_cubes(lambda p: np.linalg.norm(p, axis=1) - 1.0, grid_n=32)


@pytest.fixture
def box_bundle():
    """Unit box (half extent 0.5) with quads, UVs and a constant bake."""
    quads = uv_atlas(tris_to_quads(TriMesh.box()), texture_w=32)
    return bake_textures(ConstantSource(), quads, texture_w=32, provenance={"prompt": "a cube"})


class TestMarchingCubes:
    """Test suite for SDF mesh extraction."""

    def test_sphere_is_closed_and_accurate(self, sphere_mesh, test_helper):
        """Test watertightness, genus zero and radial accuracy on the unit sphere."""
        cell = 2.0 / 32
        assert sphere_mesh.is_watertight()
        test_helper.assert_two_manifold(sphere_mesh)
        assert sphere_mesh.euler_characteristic() == 2
        assert sphere_mesh.components()[0] == 1
        assert test_helper.radial_deviation(sphere_mesh) <= 1.5 * cell

    def test_sphere_faces_point_outward(self, sphere_mesh):
        """Test that face normals agree with the SDF gradient."""
        centroids = sphere_mesh.vertices[sphere_mesh.triangles].mean(axis=1)
        outward = np.sum(sphere_mesh.face_normals() * centroids, axis=1) > 0
        assert outward.all()

    def test_accepts_sdf_sources(self, sphere_scene):
        """Test extraction from an object with an sdf method."""
        mesh = marching_cubes(sphere_scene, grid_n=16)
        assert mesh.is_watertight()

    def test_no_crossing_is_empty(self):
        """Test that a field without a zero crossing yields an empty mesh."""
        mesh = marching_cubes(lambda p: np.ones(len(p)), grid_n=8)
        assert mesh.is_empty

    def test_grid_validation(self, unit_sphere_sdf):
        """Test the minimum grid size."""
        with pytest.raises(Desk3DValidationError, match="grid_n"):
            marching_cubes(unit_sphere_sdf, grid_n=4)


class TestTriMesh:
    """Test suite for TriMesh helpers."""

    def test_box_is_closed(self):
        """Test the built-in box."""
        box = TriMesh.box()
        assert box.is_watertight()
        assert box.euler_characteristic() == 2
        assert box.areas().sum() == pytest.approx(6.0)

    def test_weld_merges_and_drops_degenerates(self):
        """Test vertex merging and removal of collapsed triangles."""
        vertices = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [2, 2, 0]], float)
        triangles = np.array([[0, 1, 2], [3, 4, 5], [1, 3, 6]])
        mesh = weld(vertices, triangles)
        assert len(mesh.vertices) == 4
        assert len(mesh.triangles) == 2

    def test_index_validation(self):
        """Test that out-of-range indices are rejected."""
        with pytest.raises(Desk3DMeshError, match="out of range"):
            TriMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))


class TestQuads:
    """Test suite for triangle pairing."""

    def test_box_becomes_six_quads(self):
        """Test that each box side pairs into one quad."""
        quads = tris_to_quads(TriMesh.box())
        assert quads.quad_count == 6
        assert quads.triangle_count == 0
        assert quads.quad_coverage() == 1.0

    def test_quads_keep_geometry_and_orientation(self):
        """Test that pairing moves no vertex and triangulates back to a closed outward mesh."""
        box = TriMesh.box()
        quads = tris_to_quads(box)
        np.testing.assert_array_equal(quads.vertices, box.vertices)
        back = quads.to_trimesh()
        assert back.is_watertight()
        centroids = back.vertices[back.triangles].mean(axis=1)
        assert np.all(np.sum(back.face_normals() * centroids, axis=1) > 0)

    def test_sphere_mostly_quads(self, sphere_mesh):
        """Test that most sphere triangles end up in quads."""
        quads = tris_to_quads(sphere_mesh)
        assert quads.quad_coverage() >= 0.6
        assert quads.to_trimesh().is_watertight()

    def test_strict_angle_keeps_triangles(self, sphere_mesh):
        """Test that a zero angle tolerance pairs far fewer triangles."""
        assert tris_to_quads(sphere_mesh, angle_tol=0.0).quad_count < tris_to_quads(sphere_mesh).quad_count

    def test_non_manifold_rejected(self):
        """Test that an edge with three triangles is refused."""
        vertices = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]], float)
        mesh = TriMesh(vertices, np.array([[0, 1, 2], [1, 0, 3], [0, 1, 4]]))
        with pytest.raises(Desk3DMeshError, match="Non-manifold"):
            tris_to_quads(mesh)


class TestUvAtlas:
    """Test suite for charting and packing."""

    def test_box_has_six_charts(self):
        """Test one chart per box side and UVs inside the unit square."""
        atlas = uv_atlas(tris_to_quads(TriMesh.box()), texture_w=64)
        assert atlas.charts is not None and atlas.uv is not None
        assert int(atlas.charts.max()) + 1 == 6
        corners = np.concatenate(atlas.uv)
        assert corners.min() >= 0.0 and corners.max() <= 1.0

    def test_sphere_charts_do_not_overlap(self, sphere_mesh):
        """Test that rasterized sphere charts never share a texel."""
        atlas = uv_atlas(tris_to_quads(sphere_mesh), texture_w=128)
        texels = rasterize_uv(atlas, 128)
        assert texels.overlaps == 0
        assert texels.covered.mean() > 0.2

    @pytest.mark.parametrize("folded,expect_overlap", [(False, False), (True, True)])
    def test_fold_inside_one_chart_is_counted(self, folded, expect_overlap):
        """Test that two faces of the same chart covering the same texels count as overlap."""
        vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.5]])
        far = (0.2, 0.2) if folded else (0.9, 0.9)
        uv = [np.array([(0.1, 0.1), (0.9, 0.1), (0.1, 0.9)]), np.array([(0.9, 0.1), far, (0.1, 0.9)])]
        mesh = QuadMesh(vertices, [(0, 1, 2), (1, 3, 2)], uv, np.zeros(2, dtype=np.int64))
        texels = rasterize_uv(mesh, 32)
        assert (texels.overlaps > 0) is expect_overlap

    def test_errors(self):
        """Test empty meshes and missing layouts."""
        with pytest.raises(Desk3DMeshError, match="without faces"):
            uv_atlas(QuadMesh(np.zeros((0, 3)), []))
        with pytest.raises(Desk3DMeshError, match="no UV layout"):
            rasterize_uv(tris_to_quads(TriMesh.box()), 32)


class TestBake:
    """Test suite for texture baking and back-projection."""

    def test_constant_field_bakes_constant_texture(self, box_bundle):
        """Test that covered texels carry the field values."""
        covered = box_bundle.texels.covered
        assert covered.any()
        np.testing.assert_allclose(box_bundle.albedo[covered], np.tile(ALBEDO, (covered.sum(), 1)))
        np.testing.assert_allclose(box_bundle.material[covered, 0], 0.3)
        np.testing.assert_allclose(box_bundle.material[covered, 1], 1.0)
        assert box_bundle.provenance == {"prompt": "a cube"}

    def test_texel_points_lie_on_surface(self, box_bundle):
        """Test that texel surface samples lie on the box."""
        points = box_bundle.texels.points[box_bundle.texels.covered]
        np.testing.assert_allclose(np.abs(points).max(axis=1), 0.5, atol=1e-9)

    def test_dilation_fills_gutters(self, box_bundle):
        """Test that texels just outside the charts take the neighboring value."""
        covered = box_bundle.texels.covered
        filled = np.any(box_bundle.albedo > 0, axis=-1)
        assert filled.sum() > covered.sum()

    def test_texture_width_validation(self):
        """Test the power-of-two requirement."""
        atlas = uv_atlas(tris_to_quads(TriMesh.box()), texture_w=32)
        with pytest.raises(Desk3DValidationError, match="power of two"):
            bake_textures(ConstantSource(), atlas, texture_w=48)

    def test_sample_texture_at_texel_centers(self):
        """Test bilinear lookups at texel centers."""
        texture = np.arange(4 * 4 * 3, dtype=np.float64).reshape(4, 4, 3)
        uv = np.array([[0.125, 0.875], [0.625, 0.375]])
        np.testing.assert_allclose(sample_texture(texture, uv), [texture[0, 0], texture[2, 2]])

    def test_backprojection_blends_visible_texels(self, box_bundle):
        """Test that visible texels take the view color and hidden ones keep their bake."""
        pose = pose_ring(4, image_size=32)[0]

        def attributes(points):
            count = len(points)
            return np.zeros((count, 3)), np.zeros(count), np.zeros(count)

        traced = trace_channels(_box_sdf, attributes, pose)
        green = np.zeros((32, 32, 3))
        green[..., 1] = 1.0
        refined = backproject_refine(box_bundle, [ProjectionView(pose, green, traced.depth)])
        covered = box_bundle.texels.covered
        changed = np.any(np.abs(refined.albedo - box_bundle.albedo) > 1e-9, axis=-1) & covered
        assert 0 < changed.sum() < covered.sum()
        np.testing.assert_allclose(refined.albedo[changed], np.tile([0.0, 1.0, 0.0], (changed.sum(), 1)))
        points = box_bundle.texels.points[changed]
        assert np.all((points[:, 0] > 0.49) | (points[:, 2] > 0.49))

    def test_backprojection_needs_depth(self, box_bundle):
        """Test that a view without depth is rejected."""
        view = ProjectionView(pose_ring(4, image_size=8)[0], np.zeros((8, 8, 3)), None)
        with pytest.raises(Desk3DMeshError, match="depth"):
            backproject_refine(box_bundle, [view])


class TestExport:
    """Test suite for OBJ, MTL and texture export."""

    def test_asset_files(self, box_bundle, tmp_path):
        """Test that quads, UVs and textures survive an export and read."""
        paths = export_obj(box_bundle, tmp_path, "desk_cube")
        data = read_obj(paths.obj)
        assert data.mtllib == "desk_cube.mtl"
        assert len(data.faces) == 6 and all(len(face) == 4 for face in data.faces)
        np.testing.assert_allclose(data.vertices, box_bundle.mesh.vertices)
        for read_uv, written_uv in zip(data.uv, box_bundle.mesh.uv):
            np.testing.assert_allclose(read_uv, written_uv)
        mtl = paths.mtl.read_text(encoding="utf-8")
        assert "map_Kd desk_cube_albedo.png" in mtl
        assert "map_Pr desk_cube_material.png" in mtl

    def test_textures_quantize_within_two_levels(self, box_bundle, tmp_path):
        """Test that the exported albedo of a constant field stays within 2/255."""
        paths = export_obj(box_bundle, tmp_path)
        with Image.open(paths.albedo) as image:
            albedo = np.asarray(image, dtype=np.float64) / 255.0
        covered = box_bundle.texels.covered
        assert np.abs(albedo[covered] - np.array(ALBEDO)).max() < 2.0 / 255.0

    def test_export_is_deterministic(self, box_bundle, tmp_path):
        """Test byte-identical output for identical bundles."""
        first = export_obj(box_bundle, tmp_path / "a")
        second = export_obj(box_bundle, tmp_path / "b")
        for one, two in ((first.obj, second.obj), (first.albedo, second.albedo), (first.material, second.material)):
            assert one.read_bytes() == two.read_bytes()

    def test_scene_groups(self, box_bundle, tmp_path):
        """Test one group per instance and shared materials per asset."""
        other = AssetBundle(box_bundle.mesh, box_bundle.albedo * 0.5, box_bundle.material, box_bundle.texels)
        instances = [
            SceneInstance("cube_0", "cube", box_bundle, 1.0, 0.0, (0.0, 0.0, 0.0)),
            SceneInstance("cube_1", "cube", box_bundle, 2.0, 90.0, (3.0, 0.0, 0.0)),
            SceneInstance("dim_cube_0", "dim_cube", other, 1.0, 0.0, (0.0, 3.0, 0.0)),
        ]
        path = write_scene_obj(instances, tmp_path)
        data = read_obj(path)
        assert list(data.groups) == ["cube_0", "cube_1", "dim_cube_0"]
        assert [len(faces) for faces in data.groups.values()] == [6, 6, 6]
        assert len(data.vertices) == 3 * len(box_bundle.mesh.vertices)
        second = [data.faces[i] for i in data.groups["cube_1"]]
        assert min(v for face in second for v in face) == len(box_bundle.mesh.vertices)
        assert (tmp_path / "scene.mtl").read_text(encoding="utf-8").count("newmtl") == 2
        assert (tmp_path / "dim_cube_albedo.png").is_file()

    def test_scene_needs_instances(self, tmp_path):
        """Test that an empty scene is refused."""
        with pytest.raises(Desk3DValidationError):
            write_scene_obj([], tmp_path)

    def test_transform_vertices(self):
        """Test scale, yaw and translation order."""
        placed = transform_vertices(np.array([[1.0, 0.0, 0.0]]), 2.0, 90.0, (0.0, 0.0, 1.0))
        np.testing.assert_allclose(placed, [[0.0, 2.0, 1.0]], atol=1e-12)

    def test_read_errors(self, tmp_path):
        """Test missing and malformed OBJ files."""
        with pytest.raises(Desk3DMeshError, match="Cannot read"):
            read_obj(tmp_path / "missing.obj")
        bad = tmp_path / "bad.obj"
        bad.write_text("v 1 2 x\n", encoding="utf-8")
        with pytest.raises(Desk3DMeshError, match="malformed"):
            read_obj(bad)
