"""Sphere-traced supervision renderer and the rendered-dataset writer/reader.

Channel stacks on disk, one directory per view::

    <root>/manifest.tsv
    <root>/asset_00007/view_03/{rgb,albedo,normal,depth,mask,edge,roughness,metallic}.png
    <root>/asset_00007/view_03/header.txt

rgb/albedo/roughness/metallic are 8-bit, normals are 8-bit with ``(n + 1) / 2``
remapping, depth is 16-bit with ``value = round(depth * DEPTH_SCALE)``, and
mask/edge are 8-bit 0/255. The header holds the asset id, prompt, pose
features, fov_y, resolution and whether the view belongs to the fixed ring.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from .camgeom import (
    DEFAULT_ELEVATION,
    DEFAULT_FOV_Y,
    DEFAULT_RADIUS,
    CameraPose,
    PoseSet,
    generate_rays,
    pose_ring,
    random_pose,
)
from .exceptions import Desk3DDatasetError, Desk3DValidationError
from .promptgen import ManifestRecord, SceneSpec, read_manifest, scene_for_record, write_manifest

logger = logging.getLogger(__name__)

SdfFn = Callable[[np.ndarray], np.ndarray]
AttributeFn = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray, np.ndarray]]

MAX_STEPS = 128
HIT_THRESHOLD = 1e-4
NORMAL_STEP = 1e-4
AMBIENT = 0.2
DIFFUSE = 0.8
DEPTH_SCALE = 10000.0
CHANNEL_FILES = ("rgb", "albedo", "normal", "depth", "mask", "edge", "roughness", "metallic")


@dataclass
class ChannelImage:
    """All supervision channels of one view.

    Attributes:
        rgb: shaded color ``[R, R, 3]`` in [0, 1]
        albedo: base color ``[R, R, 3]`` in [0, 1]
        normal: unit normals in the camera frame ``[R, R, 3]`` (zero on background)
        depth: distance along the ray ``[R, R]`` (zero on background)
        mask: object coverage ``[R, R]`` in {0, 1}
        roughness: ``[R, R]`` in [0, 1]
        metallic: ``[R, R]`` in [0, 1]
        edge: mask-boundary band ``[R, R]`` (bool), excluded from losses and metrics
    """

    rgb: np.ndarray
    albedo: np.ndarray
    normal: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray
    edge: np.ndarray

    @property
    def resolution(self) -> int:
        return int(self.mask.shape[0])

    def interior(self) -> np.ndarray:
        """Pixels inside the object and away from its boundary."""
        return (self.mask > 0.5) & ~self.edge.astype(bool)


@dataclass
class RenderedAsset:
    """All rendered views of one asset; the first ``ring_count`` views form the fixed ring."""

    asset_id: int
    prompt: str
    poses: PoseSet
    views: List[ChannelImage]
    ring_count: int = 0

    def ring(self) -> Tuple[PoseSet, List[ChannelImage]]:
        count = self.ring_count or len(self.views)
        return self.poses.subset(range(count), self.poses.label), self.views[:count]


@dataclass
class RenderedDataset:
    """In-memory collection of rendered assets, ordered by asset id."""

    assets: List[RenderedAsset] = field(default_factory=list)
    resolution: int = 0

    def __len__(self) -> int:
        return len(self.assets)

    @classmethod
    def load(cls, root: Union[str, Path]) -> "RenderedDataset":
        """Read every accepted asset listed in ``<root>/manifest.tsv``.

        Raises:
            Desk3DDatasetError: If the manifest or any view directory is unreadable
        """
        root = Path(root)
        assets = []
        for record in read_manifest(root / "manifest.tsv"):
            if not record.accepted:
                continue
            asset_dir = root / f"asset_{record.asset_id:05d}"
            view_dirs = sorted(asset_dir.glob("view_*"))
            if not view_dirs:
                raise Desk3DDatasetError(f"Asset {record.asset_id}: no rendered views under {asset_dir}")
            poses: List[CameraPose] = []
            views: List[ChannelImage] = []
            ring_count = 0
            for view_dir in view_dirs:
                pose, in_ring = read_header(view_dir / "header.txt")
                poses.append(pose)
                views.append(load_channels(view_dir))
                ring_count += int(in_ring)
            assets.append(RenderedAsset(record.asset_id, record.prompt, PoseSet(poses, "custom"), views, ring_count))
        resolution = assets[0].views[0].resolution if assets else 0
        logger.info("Loaded %d rendered assets from %s", len(assets), root)
        return cls(assets, resolution)


@dataclass(frozen=True)
class PosePolicy:
    """Which cameras render_dataset uses per asset.

    The fixed half is a ring at ``elevation``; the random half adds
    ``random_views`` cameras with elevation and fov drawn from the given ranges.
    """

    ring_views: int = 16
    elevation: float = DEFAULT_ELEVATION
    radius: float = DEFAULT_RADIUS
    fov_y: float = DEFAULT_FOV_Y
    random_views: int = 0
    random_elevation: Tuple[float, float] = (-10.0, 40.0)
    random_fov_deg: Tuple[float, float] = (30.0, 50.0)


def sphere_trace(
    sdf_fn: SdfFn,
    origins: np.ndarray,
    directions: np.ndarray,
    max_steps: int = MAX_STEPS,
    threshold: float = HIT_THRESHOLD,
    t_far: Optional[float] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """March rays through a signed distance field.

    Args:
        sdf_fn: Maps ``[M, 3]`` points to ``[M]`` signed distances
        origins: Ray origins ``[N, 3]``
        directions: Unit ray directions ``[N, 3]``
        max_steps: Step budget; rays still marching afterwards count as misses
        threshold: A ray hits once ``|sdf| < threshold``
        t_far: Give up beyond this distance (default: origin distance + 2)

    Returns:
        ``(t, hit)``: distance along each ray and the hit flags
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    count = origins.shape[0]
    if t_far is None:
        t_far = float(np.max(np.linalg.norm(origins, axis=1), initial=0.0)) + 2.0
    t = np.zeros(count)
    hit = np.zeros(count, dtype=bool)
    active = np.ones(count, dtype=bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        distance = sdf_fn(origins[idx] + t[idx, None] * directions[idx])
        converged = np.abs(distance) < threshold
        hit[idx[converged]] = True
        t[idx[~converged]] += distance[~converged]
        escaped = t[idx] > t_far
        active[idx[converged | escaped]] = False
    t[~hit] = 0.0
    return t, hit


def sdf_normals(sdf_fn: SdfFn, points: np.ndarray, h: float = NORMAL_STEP) -> np.ndarray:
    """Unit SDF gradients by central differences."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    grad = np.zeros_like(points)
    for axis in range(3):
        offset = np.zeros(3)
        offset[axis] = h
        grad[:, axis] = sdf_fn(points + offset) - sdf_fn(points - offset)
    norm = np.linalg.norm(grad, axis=1, keepdims=True)
    return np.asarray(grad / np.maximum(norm, 1e-12))


def shade(albedo: np.ndarray, normals: np.ndarray, view_dirs: np.ndarray) -> np.ndarray:
    """Headlight shading ``albedo * (ambient + diffuse * max(0, n . l))`` with ``l = -view_dir``."""
    cosine = np.clip(-np.sum(normals * view_dirs, axis=-1, keepdims=True), 0.0, None)
    return np.asarray(albedo * (AMBIENT + DIFFUSE * cosine))


def edge_band(mask: np.ndarray) -> np.ndarray:
    """One-pixel band around the mask boundary (both sides)."""
    solid = np.asarray(mask) > 0.5
    return np.asarray(ndimage.binary_dilation(solid) ^ ndimage.binary_erosion(solid))


def trace_channels(
    sdf_fn: SdfFn,
    attribute_fn: AttributeFn,
    pose: CameraPose,
    resolution: Optional[int] = None,
    normal_step: float = NORMAL_STEP,
) -> ChannelImage:
    """Render every channel of any SDF with a point-attribute lookup."""
    size = pose.image_size if resolution is None else resolution
    rays = generate_rays(pose, size)
    origins = rays.origins.reshape(-1, 3)
    directions = rays.directions.reshape(-1, 3)
    t, hit = sphere_trace(sdf_fn, origins, directions)
    pixels = size * size
    rgb = np.zeros((pixels, 3))
    albedo = np.zeros((pixels, 3))
    normal = np.zeros((pixels, 3))
    roughness = np.zeros(pixels)
    metallic = np.zeros(pixels)
    if hit.any():
        points = origins[hit] + t[hit, None] * directions[hit]
        world_normals = sdf_normals(sdf_fn, points, normal_step)
        albedo[hit], roughness[hit], metallic[hit] = attribute_fn(points)
        rgb[hit] = shade(albedo[hit], world_normals, directions[hit])
        normal[hit] = world_normals @ pose.rotation.T
    mask = hit.reshape(size, size)
    return ChannelImage(
        rgb=rgb.reshape(size, size, 3).astype(np.float32),
        albedo=albedo.reshape(size, size, 3).astype(np.float32),
        normal=normal.reshape(size, size, 3).astype(np.float32),
        depth=t.reshape(size, size).astype(np.float32),
        mask=mask.astype(np.float32),
        roughness=roughness.reshape(size, size).astype(np.float32),
        metallic=metallic.reshape(size, size).astype(np.float32),
        edge=edge_band(mask),
    )


def render_channels(scene: SceneSpec, pose: CameraPose, resolution: Optional[int] = None) -> ChannelImage:
    """Sphere-trace a procedural scene into its supervision channels (deterministic)."""
    return trace_channels(scene.sdf, scene.attributes, pose, resolution)


def render_views(scene: SceneSpec, poses: PoseSet, resolution: Optional[int] = None) -> List[ChannelImage]:
    return [render_channels(scene, pose, resolution) for pose in poses]


def policy_poses(policy: PosePolicy, resolution: int, seed: int) -> Tuple[PoseSet, int]:
    """Cameras for one asset: the fixed ring followed by the random views."""
    ring = pose_ring(policy.ring_views, policy.elevation, 0.0, policy.radius, policy.fov_y, resolution)
    poses = list(ring.poses)
    rng = np.random.default_rng(seed)
    for _ in range(policy.random_views):
        poses.append(random_pose(rng, policy.random_elevation, policy.random_fov_deg, resolution))
    return PoseSet(poses, ring.label if not policy.random_views else "custom"), len(ring)


def render_asset(
    scene: SceneSpec, asset_id: int, policy: PosePolicy = PosePolicy(), resolution: int = 32, seed: int = 0
) -> RenderedAsset:
    poses, ring_count = policy_poses(policy, resolution, seed)
    return RenderedAsset(asset_id, scene.prompt, poses, render_views(scene, poses, resolution), ring_count)


def render_dataset(
    records: Sequence[ManifestRecord],
    out_dir: Union[str, Path],
    policy: PosePolicy = PosePolicy(),
    resolution: int = 32,
    seed: int = 0,
) -> List[Path]:
    """Render every accepted manifest record to channel stacks on disk.

    Returns:
        The written view directories, in asset then view order

    Raises:
        Desk3DDatasetError: If there are no accepted assets or a file cannot be written
    """
    accepted = [r for r in records if r.accepted]
    if not accepted:
        raise Desk3DDatasetError("No accepted assets to render")
    root = Path(out_dir)
    written: List[Path] = []
    write_manifest(records, root / "manifest.tsv")
    for record in accepted:
        asset_seed = seed * 1_000_003 + record.asset_id
        asset = render_asset(scene_for_record(record), record.asset_id, policy, resolution, asset_seed)
        for index, (pose, view) in enumerate(zip(asset.poses, asset.views)):
            view_dir = root / f"asset_{record.asset_id:05d}" / f"view_{index:02d}"
            try:
                save_channels(view, view_dir)
                write_header(view_dir / "header.txt", record, pose, index < asset.ring_count)
            except (OSError, Desk3DDatasetError) as err:
                raise Desk3DDatasetError(f"Asset {record.asset_id}: cannot write {view_dir}: {err}") from err
            written.append(view_dir)
        logger.info("Rendered asset %d (%s): %d views", record.asset_id, record.prompt, len(asset.views))
    return written


# ---------------------------------------------------------------------------
# Channel I/O
# ---------------------------------------------------------------------------


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.asarray(np.round(np.clip(values, 0.0, 1.0) * 255.0), dtype=np.uint8)


def save_channels(view: ChannelImage, view_dir: Union[str, Path]) -> None:
    """Write a view's channels as PNG files."""
    view_dir = Path(view_dir)
    view_dir.mkdir(parents=True, exist_ok=True)
    depth = np.round(np.clip(view.depth, 0.0, 65535.0 / DEPTH_SCALE) * DEPTH_SCALE).astype(np.uint16)
    images: Dict[str, np.ndarray] = {
        "rgb": to_uint8(view.rgb),
        "albedo": to_uint8(view.albedo),
        "normal": to_uint8((view.normal + 1.0) * 0.5),
        "depth": depth,
        "mask": to_uint8(view.mask),
        "edge": to_uint8(view.edge.astype(np.float32)),
        "roughness": to_uint8(view.roughness),
        "metallic": to_uint8(view.metallic),
    }
    for name, array in images.items():
        Image.fromarray(array).save(view_dir / f"{name}.png")


def load_channels(view_dir: Union[str, Path]) -> ChannelImage:
    """Read a view written by :func:`save_channels` (values are quantized).

    Raises:
        Desk3DDatasetError: If a channel file is missing or unreadable
    """
    view_dir = Path(view_dir)
    raw: Dict[str, np.ndarray] = {}
    for name in CHANNEL_FILES:
        try:
            with Image.open(view_dir / f"{name}.png") as image:
                raw[name] = np.array(image)
        except OSError as err:
            raise Desk3DDatasetError(f"Cannot read channel '{name}' in {view_dir}: {err}") from err
    mask = (raw["mask"] > 127).astype(np.float32)
    normal = raw["normal"].astype(np.float32) / 255.0 * 2.0 - 1.0
    norm = np.linalg.norm(normal, axis=-1, keepdims=True)
    normal = np.where(mask[..., None] > 0, normal / np.maximum(norm, 1e-6), 0.0).astype(np.float32)
    return ChannelImage(
        rgb=raw["rgb"].astype(np.float32) / 255.0,
        albedo=raw["albedo"].astype(np.float32) / 255.0,
        normal=normal,
        depth=raw["depth"].astype(np.float32) / DEPTH_SCALE,
        mask=mask,
        roughness=raw["roughness"].astype(np.float32) / 255.0,
        metallic=raw["metallic"].astype(np.float32) / 255.0,
        edge=raw["edge"] > 127,
    )


def write_header(path: Union[str, Path], record: ManifestRecord, pose: CameraPose, in_ring: bool) -> None:
    lines = [
        f"asset_id {record.asset_id}",
        f"prompt {record.prompt}",
        "pose " + " ".join(repr(float(v)) for v in np.concatenate([pose.rotation.reshape(-1), pose.translation])),
        f"fov_y {pose.fov_y!r}",
        f"resolution {pose.image_size}",
        f"ring {int(in_ring)}",
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_header(path: Union[str, Path]) -> Tuple[CameraPose, bool]:
    """Return the pose stored in a view header and whether the view is part of the fixed ring."""
    try:
        entries: Dict[str, str] = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            key, _, value = line.partition(" ")
            if key:
                entries[key] = value
        values = [float(v) for v in entries["pose"].split()]
        rotation, translation = np.array(values[:9]).reshape(3, 3), np.array(values[9:12])
        pose = CameraPose(rotation, translation, float(entries["fov_y"]), int(entries["resolution"]))
        return pose, entries.get("ring", "1") == "1"
    except (OSError, KeyError, ValueError, Desk3DValidationError) as err:
        raise Desk3DDatasetError(f"Cannot read view header {path}: {err}") from err
