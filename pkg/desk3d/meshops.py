"""Mesh extraction and post-processing.

The chain is: marching cubes over an SDF, greedy triangle pairing into quads,
axis-binned UV charts packed on shelves, field baking into albedo/material
textures, multi-view back-projection of colors, and OBJ/MTL/PNG export.

Texture convention: texel row 0 is ``v = 1``; pixel coordinates are
``x = u * W`` and ``y = (1 - v) * W``, with texel centers at half-integers.
The material texture holds roughness in R and metallic in G.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage import measure

from .camgeom import CameraPose, project_points
from .exceptions import Desk3DMeshError, Desk3DValidationError

logger = logging.getLogger(__name__)

SdfFn = Callable[[np.ndarray], np.ndarray]

MIN_AREA = 1e-12
GUTTER = 2
SHRINK = 0.85
VISIBILITY_TOLERANCE = 1e-2
BLEND_POWER = 3


class SdfSource(Protocol):
    def sdf(self, points: np.ndarray) -> np.ndarray:
        ...


class AttributeSource(Protocol):
    def attributes(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        ...


def _triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    if len(triangles) == 0:
        return np.zeros(0)
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    return np.asarray(0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1))


def _edge_counts(faces: Sequence[Sequence[int]]) -> Dict[Tuple[int, int], int]:
    counts: Dict[Tuple[int, int], int] = {}
    for face in faces:
        n = len(face)
        for i in range(n):
            a, b = int(face[i]), int(face[(i + 1) % n])
            key = (a, b) if a < b else (b, a)
            counts[key] = counts.get(key, 0) + 1
    return counts


@dataclass
class TriMesh:
    """Indexed triangle mesh with optional per-vertex normals."""

    vertices: np.ndarray
    triangles: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise Desk3DMeshError("Triangle indices out of range")

    @classmethod
    def box(cls, half: float = 0.5) -> "TriMesh":
        """Axis-aligned cube, two outward-facing triangles per side."""
        corners = np.array([[(i & 1) * 2 - 1, (i >> 1 & 1) * 2 - 1, (i >> 2 & 1) * 2 - 1] for i in range(8)], float)
        sides = [(1, 3, 7, 5), (0, 4, 6, 2), (2, 6, 7, 3), (0, 1, 5, 4), (4, 5, 7, 6), (0, 2, 3, 1)]
        triangles = [tri for a, b, c, d in sides for tri in ((a, b, c), (a, c, d))]
        return cls(corners * half, np.array(triangles))

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        return _triangle_areas(self.vertices, self.triangles)

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        cross = np.cross(b - a, c - a)
        return np.asarray(cross / np.maximum(np.linalg.norm(cross, axis=1, keepdims=True), 1e-300))

    def edge_counts(self) -> Dict[Tuple[int, int], int]:
        return _edge_counts(self.triangles.tolist())

    def is_watertight(self) -> bool:
        """Every undirected edge is shared by exactly two triangles."""
        counts = self.edge_counts()
        return bool(counts) and all(count == 2 for count in counts.values())

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        return int(len(used) - len(self.edge_counts()) + len(self.triangles))

    def components(self) -> Tuple[int, np.ndarray]:
        """Connected components over shared vertices: ``(count, per-triangle label)``."""
        if self.is_empty:
            return 0, np.zeros(0, dtype=np.int64)
        t = self.triangles
        rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
        cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(self.vertices),) * 2)
        _, vertex_labels = connected_components(graph, directed=False)
        labels = np.unique(vertex_labels[t[:, 0]], return_inverse=True)[1]
        return int(labels.max()) + 1, labels.astype(np.int64)


def weld(vertices: np.ndarray, triangles: np.ndarray, tolerance: float = 1e-9) -> TriMesh:
    """Merge coincident vertices and drop triangles that collapse or have no area."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(vertices) == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    keys = np.round(vertices / tolerance).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    merged = vertices[first]
    faces = inverse[triangles]
    distinct = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[distinct]
    faces = faces[_triangle_areas(merged, faces) > MIN_AREA]
    used, compact = np.unique(faces, return_inverse=True)
    return TriMesh(merged[used], compact.reshape(-1, 3))


def _sdf_callable(source: Union[SdfFn, SdfSource]) -> SdfFn:
    if callable(source):
        return source
    return source.sdf


def grid_axis(grid_n: int, bound: float = 1.0) -> np.ndarray:
    """Cell-center coordinates of the padded sampling grid over ``[-bound - 2c, bound + 2c]``."""
    cell = 2.0 * bound / grid_n
    return -bound - 2.0 * cell + (np.arange(grid_n + 4) + 0.5) * cell


def marching_cubes(source: Union[SdfFn, SdfSource], grid_n: int = 32, iso: float = 0.0, bound: float = 1.0) -> TriMesh:
    """Extract the ``iso`` level set of an SDF as a welded, outward-oriented triangle mesh.

    Args:
        source: SDF callable or any object with an ``sdf(points)`` method
        grid_n: Cells across ``[-bound, bound]`` (>= 8)
        iso: Level to extract
        bound: Half-extent of the sampled cube (before padding)

    Returns:
        The mesh; empty when the sampled field never crosses ``iso``

    Raises:
        Desk3DValidationError: If ``grid_n < 8``
    """
    if grid_n < 8:
        raise Desk3DValidationError(f"grid_n must be >= 8, got {grid_n}")
    sdf_fn = _sdf_callable(source)
    axis = grid_axis(grid_n, bound)
    cell = float(axis[1] - axis[0])
    points = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    volume = np.asarray(sdf_fn(points), dtype=np.float64).reshape((len(axis),) * 3)
    if not (volume.min() < iso < volume.max()):
        logger.info("SDF has no %g crossing on a %d^3 grid; returning an empty mesh", iso, grid_n)
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(volume, level=iso, spacing=(cell, cell, cell), allow_degenerate=False)
    mesh = weld(verts + axis[0], faces)
    if mesh.is_empty:
        return mesh
    centroids = mesh.vertices[mesh.triangles].mean(axis=1)
    gradient = np.zeros_like(centroids)
    step = 0.25 * cell
    for k in range(3):
        offset = np.zeros(3)
        offset[k] = step
        gradient[:, k] = sdf_fn(centroids + offset) - sdf_fn(centroids - offset)
    agree = np.sum(mesh.face_normals() * gradient, axis=1) > 0
    if agree.mean() < 0.5:
        mesh = TriMesh(mesh.vertices, mesh.triangles[:, ::-1].copy())
    logger.debug("Marching cubes: %d vertices, %d triangles", len(mesh.vertices), len(mesh.triangles))
    return mesh


# ---------------------------------------------------------------------------
# Quads
# ---------------------------------------------------------------------------


def _newell_normal(points: np.ndarray) -> np.ndarray:
    nxt = np.roll(points, -1, axis=0)
    normal = np.array(
        [
            np.sum((points[:, 1] - nxt[:, 1]) * (points[:, 2] + nxt[:, 2])),
            np.sum((points[:, 2] - nxt[:, 2]) * (points[:, 0] + nxt[:, 0])),
            np.sum((points[:, 0] - nxt[:, 0]) * (points[:, 1] + nxt[:, 1])),
        ]
    )
    length = np.linalg.norm(normal)
    return normal / length if length > 0 else normal


@dataclass
class QuadMesh:
    """Mixed quad/triangle mesh with optional per-corner UVs and chart ids.

    Quads produced from a triangle pair ``(a, b, c) + (b, a, d)`` are stored as
    ``(a, d, b, c)`` and split back along the ``a-b`` diagonal.
    """

    vertices: np.ndarray
    faces: List[Tuple[int, ...]]
    uv: Optional[List[np.ndarray]] = None
    charts: Optional[np.ndarray] = None

    @property
    def quad_count(self) -> int:
        return sum(1 for f in self.faces if len(f) == 4)

    @property
    def triangle_count(self) -> int:
        return sum(1 for f in self.faces if len(f) == 3)

    def quad_coverage(self) -> float:
        """Share of the underlying triangles that ended up inside quads."""
        total = 2 * self.quad_count + self.triangle_count
        return 2 * self.quad_count / total if total else 0.0

    def face_normals(self) -> np.ndarray:
        return np.array([_newell_normal(self.vertices[list(f)]) for f in self.faces]).reshape(-1, 3)

    def triangulate(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Split quads along their stored diagonal.

        Returns:
            ``(triangles [T, 3], source face [T], corner index within the face [T, 3])``
        """
        triangles, source, corners = [], [], []
        for index, face in enumerate(self.faces):
            splits = [(0, 1, 2)] if len(face) == 3 else [(0, 1, 2), (0, 2, 3)]
            for split in splits:
                triangles.append([face[k] for k in split])
                source.append(index)
                corners.append(split)
        shape = (-1, 3)
        return (
            np.array(triangles, dtype=np.int64).reshape(shape),
            np.array(source, dtype=np.int64),
            np.array(corners, dtype=np.int64).reshape(shape),
        )

    def to_trimesh(self) -> TriMesh:
        return TriMesh(self.vertices, self.triangulate()[0])


def _corner_angles(points: np.ndarray) -> np.ndarray:
    prev = np.roll(points, 1, axis=0) - points
    nxt = np.roll(points, -1, axis=0) - points
    cosine = np.sum(prev * nxt, axis=1) / np.maximum(np.linalg.norm(prev, axis=1) * np.linalg.norm(nxt, axis=1), 1e-300)
    return np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0)))


def _is_convex(points: np.ndarray, normal: np.ndarray) -> bool:
    for i in range(len(points)):
        e1 = points[(i + 1) % len(points)] - points[i]
        e2 = points[(i + 2) % len(points)] - points[(i + 1) % len(points)]
        if np.dot(np.cross(e1, e2), normal) <= 0:
            return False
    return True


def tris_to_quads(mesh: TriMesh, angle_tol: float = 30.0) -> QuadMesh:
    """Greedily pair adjacent triangles into convex quads.

    Candidate pairs share an edge and have face normals within ``angle_tol``
    degrees. Pairs are accepted best-first by a score of corner right-angle
    deviation plus normal deviation. Vertex positions are never moved.

    Raises:
        Desk3DMeshError: If an edge has more than two incident triangles
    """
    owners: Dict[Tuple[int, int], List[int]] = {}
    for index, tri in enumerate(mesh.triangles.tolist()):
        for i in range(3):
            a, b = tri[i], tri[(i + 1) % 3]
            owners.setdefault((min(a, b), max(a, b)), []).append(index)
    bad = [edge for edge, faces in owners.items() if len(faces) > 2]
    if bad:
        raise Desk3DMeshError(f"Non-manifold input: edge {bad[0]} has {len(owners[bad[0]])} incident triangles")

    normals = mesh.face_normals() if not mesh.is_empty else np.zeros((0, 3))
    candidates = []
    for (lo, hi), faces in owners.items():
        if len(faces) != 2:
            continue
        first, second = faces
        cos_angle = float(np.clip(np.dot(normals[first], normals[second]), -1.0, 1.0))
        dihedral = math.degrees(math.acos(cos_angle))
        if dihedral > angle_tol:
            continue
        quad = _pair_to_quad(mesh.triangles[first].tolist(), mesh.triangles[second].tolist(), lo, hi)
        if quad is None:
            continue
        points = mesh.vertices[list(quad)]
        average = normals[first] + normals[second]
        if not _is_convex(points, average):
            continue
        score = float(np.mean(np.abs(_corner_angles(points) - 90.0)) / 90.0 + dihedral / 90.0)
        candidates.append((score, first, second, quad))

    candidates.sort(key=lambda item: (item[0], item[1], item[2]))
    used = np.zeros(len(mesh.triangles), dtype=bool)
    faces_out: List[Tuple[int, ...]] = []
    for _, first, second, quad in candidates:
        if used[first] or used[second]:
            continue
        used[first] = used[second] = True
        faces_out.append(quad)
    faces_out.extend(tuple(int(v) for v in tri) for tri, done in zip(mesh.triangles.tolist(), used) if not done)
    result = QuadMesh(mesh.vertices.copy(), faces_out)
    logger.debug("Paired %d quads, %d triangles left", result.quad_count, result.triangle_count)
    return result


def _pair_to_quad(t1: List[int], t2: List[int], lo: int, hi: int) -> Optional[Tuple[int, int, int, int]]:
    for shift in range(3):
        a, b, c = t1[shift:] + t1[:shift]
        if {a, b} == {lo, hi}:
            break
    else:
        return None
    for shift in range(3):
        p, q, d = t2[shift:] + t2[:shift]
        if (p, q) == (b, a):
            return (a, d, b, c)
    return None


# ---------------------------------------------------------------------------
# UV atlas
# ---------------------------------------------------------------------------

# Projection axes per normal bin: (u axis, v axis, flip u).
_BIN_AXES = {0: (1, 2, False), 1: (1, 2, True), 2: (2, 0, False), 3: (2, 0, True), 4: (0, 1, False), 5: (0, 1, True)}


def _face_bins(normals: np.ndarray) -> np.ndarray:
    axis = np.argmax(np.abs(normals), axis=1)
    negative = normals[np.arange(len(normals)), axis] < 0
    return np.asarray(axis * 2 + negative.astype(np.int64))


def _chart_labels(mesh: QuadMesh, bins: np.ndarray) -> np.ndarray:
    edge_faces: Dict[Tuple[int, int], List[int]] = {}
    for index, face in enumerate(mesh.faces):
        for i in range(len(face)):
            a, b = face[i], face[(i + 1) % len(face)]
            edge_faces.setdefault((min(a, b), max(a, b)), []).append(index)
    rows, cols = [], []
    for faces in edge_faces.values():
        for i in range(len(faces)):
            for j in range(i + 1, len(faces)):
                if bins[faces[i]] == bins[faces[j]]:
                    rows.append(faces[i])
                    cols.append(faces[j])
    count = len(mesh.faces)
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(count, count))
    _, labels = connected_components(graph, directed=False)
    # renumber in order of first face so chart ids are stable
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(np.argsort(first))
    return np.asarray(order[labels], dtype=np.int64)


def _shelf_pack(sizes: Sequence[Tuple[int, int]], texture_w: int, gutter: int) -> Optional[List[Tuple[int, int]]]:
    order = sorted(range(len(sizes)), key=lambda i: (-sizes[i][1], i))
    origins: List[Tuple[int, int]] = [(0, 0)] * len(sizes)
    x = y = gutter
    shelf = 0
    for i in order:
        width, height = sizes[i]
        if x + width + gutter > texture_w:
            x = gutter
            y += shelf + gutter
            shelf = 0
        if x + width + gutter > texture_w or y + height + gutter > texture_w:
            return None
        origins[i] = (x, y)
        x += width + gutter
        shelf = max(shelf, height)
    return origins


def uv_atlas(mesh: QuadMesh, texture_w: int = 256, gutter: int = GUTTER, max_shrinks: int = 60) -> QuadMesh:
    """Chart faces by dominant normal axis and connectivity, project, and shelf-pack.

    All charts share one texel density. Each chart occupies an integer texel
    rectangle and rectangles are separated by at least ``gutter`` texels.

    Raises:
        Desk3DMeshError: If there are no faces, or the charts cannot fit even when shrunk
    """
    if not mesh.faces:
        raise Desk3DMeshError("Cannot build a UV atlas for a mesh without faces")
    bins = _face_bins(mesh.face_normals())
    charts = _chart_labels(mesh, bins)
    chart_count = int(charts.max()) + 1
    extents = np.zeros((chart_count, 4))
    chart_bins = np.zeros(chart_count, dtype=np.int64)
    for chart in range(chart_count):
        faces = np.flatnonzero(charts == chart)
        chart_bins[chart] = bins[faces[0]]
        u_axis, v_axis, flip = _BIN_AXES[int(chart_bins[chart])]
        verts = np.unique(np.concatenate([list(mesh.faces[f]) for f in faces]))
        u = -mesh.vertices[verts, u_axis] if flip else mesh.vertices[verts, u_axis]
        v = mesh.vertices[verts, v_axis]
        extents[chart] = (u.min(), v.min(), u.max() - u.min(), v.max() - v.min())
    area = float(np.sum((extents[:, 2] + 1e-9) * (extents[:, 3] + 1e-9)))
    scale = math.sqrt(0.5 * texture_w * texture_w / max(area, 1e-12))
    placements = None
    for _ in range(max_shrinks):
        sizes = [(int(math.ceil(e[2] * scale)) + 1, int(math.ceil(e[3] * scale)) + 1) for e in extents]
        placements = _shelf_pack(sizes, texture_w, gutter)
        if placements is not None:
            break
        scale *= SHRINK
    if placements is None:
        biggest = int(np.argmax(extents[:, 2] * extents[:, 3]))
        raise Desk3DMeshError(f"Chart {biggest} does not fit in a {texture_w}x{texture_w} texture")
    logger.debug("Packed %d charts at %.2f texels per unit", chart_count, scale)

    uv: List[np.ndarray] = []
    for index, face in enumerate(mesh.faces):
        chart = int(charts[index])
        u_axis, v_axis, flip = _BIN_AXES[int(chart_bins[chart])]
        points = mesh.vertices[list(face)]
        u = -points[:, u_axis] if flip else points[:, u_axis]
        x0, y0 = placements[chart]
        px = x0 + 0.5 + (u - extents[chart, 0]) * scale
        py = y0 + 0.5 + (points[:, v_axis] - extents[chart, 1]) * scale
        uv.append(np.stack([px / texture_w, 1.0 - py / texture_w], axis=1))
    return QuadMesh(mesh.vertices.copy(), list(mesh.faces), uv, charts)


@dataclass
class TexelMap:
    """Surface sample behind every covered texel of a UV layout.

    ``face`` and ``chart`` are -1 on uncovered texels; ``overlaps`` counts
    texels lying strictly inside two UV triangles, within one chart or across charts.
    """

    face: np.ndarray
    chart: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    overlaps: int

    @property
    def covered(self) -> np.ndarray:
        return np.asarray(self.face >= 0)


def rasterize_uv(mesh: QuadMesh, texture_w: int) -> TexelMap:
    """Map texel centers to surface points through the per-corner UVs.

    Raises:
        Desk3DMeshError: If the mesh has no UVs
    """
    if mesh.uv is None or mesh.charts is None:
        raise Desk3DMeshError("Mesh has no UV layout; run uv_atlas first")
    face_map = np.full((texture_w, texture_w), -1, dtype=np.int64)
    chart_map = np.full((texture_w, texture_w), -1, dtype=np.int64)
    points = np.zeros((texture_w, texture_w, 3))
    normals = np.zeros((texture_w, texture_w, 3))
    face_normals = mesh.face_normals()
    triangles, source, corners = mesh.triangulate()
    interior = np.zeros((texture_w, texture_w), dtype=bool)
    overlaps = 0
    for tri, face, corner in zip(triangles, source, corners):
        uv = mesh.uv[face][corner]
        pix = np.stack([uv[:, 0] * texture_w, (1.0 - uv[:, 1]) * texture_w], axis=1)
        x_lo, y_lo = np.maximum(np.floor(pix.min(axis=0) - 0.5), 0).astype(int)
        x_hi, y_hi = np.minimum(np.ceil(pix.max(axis=0) + 0.5), texture_w - 1).astype(int)
        if x_lo > x_hi or y_lo > y_hi:
            continue
        cols, rows = np.meshgrid(np.arange(x_lo, x_hi + 1), np.arange(y_lo, y_hi + 1))
        centers = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=1)
        bary = _barycentric(pix, centers)
        if bary is None:
            continue
        inside = np.all(bary >= -1e-9, axis=1)
        if not inside.any():
            continue
        r, c = rows.ravel()[inside], cols.ravel()[inside]
        strict = np.all(bary[inside] > 1e-6, axis=1)
        overlaps += int(np.sum(strict & interior[r, c]))
        interior[r[strict], c[strict]] = True
        chart = int(mesh.charts[face])
        free = face_map[r, c] < 0
        r, c = r[free], c[free]
        face_map[r, c] = face
        chart_map[r, c] = chart
        points[r, c] = bary[inside][free] @ mesh.vertices[tri]
        normals[r, c] = face_normals[face]
    return TexelMap(face_map, chart_map, points, normals, overlaps)


def _barycentric(triangle: np.ndarray, points: np.ndarray) -> Optional[np.ndarray]:
    a, b, c = triangle
    v0, v1 = b - a, c - a
    det = v0[0] * v1[1] - v0[1] * v1[0]
    if abs(det) < 1e-14:
        return None
    d = points - a
    beta = (d[:, 0] * v1[1] - d[:, 1] * v1[0]) / det
    gamma = (v0[0] * d[:, 1] - v0[1] * d[:, 0]) / det
    return np.stack([1.0 - beta - gamma, beta, gamma], axis=1)


# ---------------------------------------------------------------------------
# Baking and back-projection
# ---------------------------------------------------------------------------


@dataclass
class AssetBundle:
    """Textured quad mesh plus provenance.

    Attributes:
        mesh: Quad mesh with UVs and charts
        albedo: ``[W, W, 3]`` in [0, 1]
        material: ``[W, W, 3]`` in [0, 1]; R roughness, G metallic, B unused
        texels: Surface samples behind the texels
        provenance: Prompt, seeds, model checksums
    """

    mesh: QuadMesh
    albedo: np.ndarray
    material: np.ndarray
    texels: TexelMap
    provenance: Dict[str, str] = field(default_factory=dict)

    @property
    def texture_w(self) -> int:
        return int(self.albedo.shape[0])


def _dilate(texture: np.ndarray, covered: np.ndarray, texels: int) -> np.ndarray:
    if not covered.any() or covered.all():
        return texture
    distance, (rows, cols) = ndimage.distance_transform_edt(~covered, return_indices=True)
    filled = texture[rows, cols]
    reach = (distance <= texels)[..., None]
    return np.asarray(np.where(reach, filled, texture))


def bake_textures(
    source: AttributeSource,
    mesh: QuadMesh,
    texture_w: int = 256,
    dilation: int = 2,
    provenance: Optional[Dict[str, str]] = None,
) -> AssetBundle:
    """Query the field's albedo and material at the surface point of every covered texel.

    Raises:
        Desk3DValidationError: If ``texture_w`` is not a power of two
        Desk3DMeshError: If the mesh has no UVs
    """
    if texture_w < 1 or texture_w & (texture_w - 1):
        raise Desk3DValidationError(f"texture_w must be a power of two, got {texture_w}")
    texels = rasterize_uv(mesh, texture_w)
    if texels.overlaps:
        logger.warning("UV layout has %d overlapping texels", texels.overlaps)
    covered = texels.covered
    albedo = np.zeros((texture_w, texture_w, 3))
    material = np.zeros((texture_w, texture_w, 3))
    if covered.any():
        color, roughness, metallic = source.attributes(texels.points[covered])
        albedo[covered] = np.clip(color, 0.0, 1.0)
        material[covered, 0] = np.clip(roughness, 0.0, 1.0)
        material[covered, 1] = np.clip(metallic, 0.0, 1.0)
    albedo = _dilate(albedo, covered, dilation)
    material = _dilate(material, covered, dilation)
    logger.debug("Baked %d of %d texels", int(covered.sum()), texture_w * texture_w)
    return AssetBundle(mesh, albedo, material, texels, dict(provenance or {}))


def sample_texture(texture: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup of ``[N, 2]`` UVs (row 0 is ``v = 1``)."""
    width = texture.shape[0]
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    coords = np.stack([(1.0 - uv[:, 1]) * width - 0.5, uv[:, 0] * width - 0.5])
    planes = np.moveaxis(texture, -1, 0)
    channels = [ndimage.map_coordinates(plane, coords, order=1, mode="nearest") for plane in planes]
    return np.stack(channels, axis=1)


@dataclass
class ProjectionView:
    """Image used for back-projection; ``depth`` is ray distance with 0 on background."""

    pose: CameraPose
    color: np.ndarray
    depth: Optional[np.ndarray]


def backproject_refine(
    bundle: AssetBundle,
    views: Sequence[ProjectionView],
    tolerance: float = VISIBILITY_TOLERANCE,
    power: int = BLEND_POWER,
) -> AssetBundle:
    """Blend view colors into the albedo texture where texels are visible.

    Each covered texel is projected into every view; it is visible when its
    distance to the camera matches the view's depth buffer within
    ``tolerance``. Visible samples are weighted by ``max(0, n . v) ** power``.
    Texels with no visible sample keep their baked value.

    Raises:
        Desk3DMeshError: If a view has no depth buffer
    """
    covered = bundle.texels.covered
    points = bundle.texels.points[covered]
    normals = bundle.texels.normals[covered]
    total = np.zeros((len(points), 3))
    weight = np.zeros(len(points))
    for index, view in enumerate(views):
        if view.depth is None:
            raise Desk3DMeshError(f"View {index} has no depth buffer")
        size = view.depth.shape[0]
        pixels, z = project_points(view.pose, points, size)
        col, row = pixels[:, 0], pixels[:, 1]
        inside = (z > 0) & (col > -0.5) & (col < size - 0.5) & (row > -0.5) & (row < size - 0.5)
        ci = np.clip(np.round(col).astype(int), 0, size - 1)
        ri = np.clip(np.round(row).astype(int), 0, size - 1)
        hit = inside & (view.depth[ri, ci] > 0)
        buffer = ndimage.map_coordinates(view.depth, np.stack([row, col]), order=1, mode="nearest")
        offset = view.pose.position - points
        distance = np.linalg.norm(offset, axis=1)
        visible = hit & (np.abs(distance - buffer) < tolerance)
        facing = np.clip(np.sum(normals * offset, axis=1) / np.maximum(distance, 1e-12), 0.0, None) ** power
        w = np.where(visible, facing, 0.0)
        total += w[:, None] * view.color[ri, ci]
        weight += w
    refined = bundle.albedo.copy()
    seen = weight > 0
    values = refined[covered]
    values[seen] = total[seen] / weight[seen, None]
    refined[covered] = values
    logger.debug("Back-projection updated %d of %d texels", int(seen.sum()), len(points))
    return AssetBundle(bundle.mesh, refined, bundle.material, bundle.texels, dict(bundle.provenance))


# ---------------------------------------------------------------------------
# OBJ export
# ---------------------------------------------------------------------------


@dataclass
class ExportPaths:
    obj: Path
    mtl: Path
    albedo: Path
    material: Path


@dataclass
class ObjData:
    """Geometry read back from an OBJ file; ``uv`` is per face corner."""

    vertices: np.ndarray
    faces: List[Tuple[int, ...]]
    uv: List[np.ndarray]
    groups: Dict[str, List[int]]
    mtllib: Optional[str] = None


def _png(values: np.ndarray) -> Image.Image:
    return Image.fromarray(np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8))


def _material_lines(name: str) -> List[str]:
    return [
        f"newmtl {name}",
        "Kd 1 1 1",
        f"map_Kd {name}_albedo.png",
        f"map_Pr {name}_material.png",
        f"map_Pm {name}_material.png",
    ]


def _face_lines(mesh: QuadMesh, vertex_base: int, uv_base: int) -> Tuple[List[str], List[str]]:
    vt_lines, f_lines = [], []
    uv_index = uv_base
    for index, face in enumerate(mesh.faces):
        corners = []
        for corner, vertex in enumerate(face):
            if mesh.uv is not None:
                u, v = mesh.uv[index][corner]
                vt_lines.append(f"vt {float(u)!r} {float(v)!r}")
                uv_index += 1
                corners.append(f"{vertex + vertex_base}/{uv_index}")
            else:
                corners.append(str(vertex + vertex_base))
        f_lines.append("f " + " ".join(corners))
    return vt_lines, f_lines


def _write_textures(bundle: AssetBundle, directory: Path, name: str) -> Tuple[Path, Path]:
    albedo_path = directory / f"{name}_albedo.png"
    material_path = directory / f"{name}_material.png"
    _png(bundle.albedo).save(albedo_path, format="PNG")
    _png(bundle.material).save(material_path, format="PNG")
    return albedo_path, material_path


def export_obj(bundle: AssetBundle, directory: Union[str, Path], name: str = "asset") -> ExportPaths:
    """Write ``<name>.obj``, ``<name>.mtl`` and the two texture PNGs (deterministic bytes).

    The MTL uses ``map_Kd`` for albedo plus ``map_Pr`` / ``map_Pm`` pointing at
    the material texture (roughness in R, metallic in G).

    Raises:
        Desk3DMeshError: On I/O failure
    """
    directory = Path(directory)
    obj_path, mtl_path = directory / f"{name}.obj", directory / f"{name}.mtl"
    mesh = bundle.mesh
    lines = ["# desk3d asset", f"mtllib {name}.mtl", f"o {name}"]
    lines += [f"v {float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in mesh.vertices]
    vt_lines, f_lines = _face_lines(mesh, 1, 0)
    lines += vt_lines + [f"usemtl {name}"] + f_lines
    try:
        directory.mkdir(parents=True, exist_ok=True)
        obj_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        mtl_path.write_text("\n".join(_material_lines(name)) + "\n", encoding="utf-8")
        albedo_path, material_path = _write_textures(bundle, directory, name)
    except OSError as err:
        raise Desk3DMeshError(f"Failed to export {name} to {directory}: {err}") from err
    logger.info("Exported %s (%d quads, %d triangles)", obj_path, mesh.quad_count, mesh.triangle_count)
    return ExportPaths(obj_path, mtl_path, albedo_path, material_path)


def transform_vertices(vertices: np.ndarray, scale: float, yaw_deg: float, position: Sequence[float]) -> np.ndarray:
    """Scale, rotate about +z, then translate."""
    yaw = math.radians(yaw_deg)
    rotation = np.array([[math.cos(yaw), -math.sin(yaw), 0.0], [math.sin(yaw), math.cos(yaw), 0.0], [0.0, 0.0, 1.0]])
    return np.asarray(vertices) * scale @ rotation.T + np.asarray(position, dtype=np.float64)


@dataclass
class SceneInstance:
    group: str
    asset: str
    bundle: AssetBundle
    scale: float = 1.0
    yaw_deg: float = 0.0
    position: Tuple[float, float, float] = (0.0, 0.0, 0.0)


def write_scene_obj(instances: Sequence[SceneInstance], directory: Union[str, Path], name: str = "scene") -> Path:
    """Merge placed assets into one OBJ with a ``g`` group per instance.

    Instances of the same asset share one material and one texture pair but
    never share vertices.

    Raises:
        Desk3DValidationError: If there are no instances
        Desk3DMeshError: On I/O failure
    """
    if not instances:
        raise Desk3DValidationError("A scene needs at least one instance")
    directory = Path(directory)
    lines = ["# desk3d scene", f"mtllib {name}.mtl"]
    materials: Dict[str, AssetBundle] = {}
    vertex_base, uv_base = 1, 0
    for instance in instances:
        mesh = instance.bundle.mesh
        placed = transform_vertices(mesh.vertices, instance.scale, instance.yaw_deg, instance.position)
        lines.append(f"g {instance.group}")
        lines += [f"v {float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in placed]
        vt_lines, f_lines = _face_lines(mesh, vertex_base, uv_base)
        lines += vt_lines + [f"usemtl {instance.asset}"] + f_lines
        vertex_base += len(mesh.vertices)
        uv_base += len(vt_lines)
        materials.setdefault(instance.asset, instance.bundle)
    obj_path = directory / f"{name}.obj"
    try:
        directory.mkdir(parents=True, exist_ok=True)
        obj_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        mtl = [line for asset in sorted(materials) for line in _material_lines(asset) + [""]]
        (directory / f"{name}.mtl").write_text("\n".join(mtl), encoding="utf-8")
        for asset in sorted(materials):
            _write_textures(materials[asset], directory, asset)
    except OSError as err:
        raise Desk3DMeshError(f"Failed to export scene {name} to {directory}: {err}") from err
    logger.info("Exported scene %s with %d instances", obj_path, len(instances))
    return obj_path


def read_obj(path: Union[str, Path]) -> ObjData:
    """Parse the subset of OBJ written by this module (``v``, ``vt``, ``f``, ``g``/``o``, ``mtllib``).

    Raises:
        Desk3DMeshError: If the file is unreadable or malformed
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise Desk3DMeshError(f"Cannot read OBJ {path}: {err}") from err
    vertices: List[List[float]] = []
    texcoords: List[List[float]] = []
    faces: List[Tuple[int, ...]] = []
    uv: List[np.ndarray] = []
    groups: Dict[str, List[int]] = {}
    current: Optional[str] = None
    mtllib = None
    for number, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                vertices.append([float(p) for p in parts[1:4]])
            elif parts[0] == "vt":
                texcoords.append([float(p) for p in parts[1:3]])
            elif parts[0] in ("g", "o"):
                current = " ".join(parts[1:])
                groups.setdefault(current, [])
            elif parts[0] == "mtllib":
                mtllib = " ".join(parts[1:])
            elif parts[0] == "f":
                refs = [p.split("/") for p in parts[1:]]
                faces.append(tuple(int(r[0]) - 1 for r in refs))
                if all(len(r) > 1 and r[1] for r in refs):
                    uv.append(np.array([texcoords[int(r[1]) - 1] for r in refs]))
                if current is not None:
                    groups[current].append(len(faces) - 1)
        except (ValueError, IndexError) as err:
            raise Desk3DMeshError(f"{path}:{number}: malformed line {raw!r}") from err
    return ObjData(np.array(vertices, dtype=np.float64).reshape(-1, 3), faces, uv, groups, mtllib)
