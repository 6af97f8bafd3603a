"""Camera poses, pose rings, rays and pose features.

Conventions: world up is +z, objects sit at the origin normalized to unit
bounding radius, azimuth 0 lies on +x. A pose stores the world-to-camera
rotation whose rows are the camera's (right, down, forward) axes, so camera
space has +z along the view axis and +y pointing down the image.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import Desk3DDatasetError, Desk3DValidationError

logger = logging.getLogger(__name__)

DEFAULT_RADIUS = 2.7
DEFAULT_ELEVATION = 20.0
DEFAULT_FOV_Y = math.radians(60.0)
DEFAULT_IMAGE_SIZE = 32

POSE_SET_LABELS = ("4", "4-diagonal", "8", "16")
WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Pinhole camera with square images.

    Attributes:
        rotation: 3x3 world-to-camera rotation (rows: right, down, forward)
        translation: camera-frame offset, ``x_cam = rotation @ x_world + translation``
        fov_y: vertical field of view in radians
        image_size: image width and height in pixels
    """

    rotation: np.ndarray
    translation: np.ndarray
    fov_y: float = DEFAULT_FOV_Y
    image_size: int = DEFAULT_IMAGE_SIZE

    def __post_init__(self) -> None:
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-5):
            raise Desk3DValidationError("Camera rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > 1e-5:
            raise Desk3DValidationError("Camera rotation must have determinant +1")
        if not 0.0 < self.fov_y < math.pi:
            raise Desk3DValidationError(f"fov_y must lie in (0, pi), got {self.fov_y}")
        if self.image_size < 1:
            raise Desk3DValidationError(f"image_size must be >= 1, got {self.image_size}")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2].copy()

    def focal(self, resolution: Optional[int] = None) -> float:
        """Focal length in pixels at the given resolution (default: image_size)."""
        size = resolution or self.image_size
        return 0.5 * size / math.tan(0.5 * self.fov_y)

    def with_image_size(self, image_size: int) -> "CameraPose":
        return CameraPose(self.rotation, self.translation, self.fov_y, image_size)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CameraPose):
            return NotImplemented
        return (
            bool(np.array_equal(pose_features(self), pose_features(other)))
            and self.fov_y == other.fov_y
            and self.image_size == other.image_size
        )


@dataclass
class PoseSet:
    """Ordered cameras plus a label from ``{4, 4-diagonal, 8, 16, custom}``."""

    poses: List[CameraPose] = field(default_factory=list)
    label: str = "custom"

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self) -> Iterator[CameraPose]:
        return iter(self.poses)

    def __getitem__(self, index: int) -> CameraPose:
        return self.poses[index]

    def features(self) -> np.ndarray:
        """Stacked pose features, shape ``[V, 12]``."""
        return np.stack([pose_features(p) for p in self.poses]) if self.poses else np.zeros((0, 12), np.float32)

    def subset(self, indices: Sequence[int], label: str = "custom") -> "PoseSet":
        return PoseSet([self.poses[i] for i in indices], label)

    def with_image_size(self, image_size: int) -> "PoseSet":
        return PoseSet([p.with_image_size(image_size) for p in self.poses], self.label)


@dataclass(frozen=True)
class RayBundle:
    """Per-pixel ray origins and unit directions, both ``[H, W, 3]``."""

    origins: np.ndarray
    directions: np.ndarray


def look_at(position: Sequence[float], target: Sequence[float] = (0.0, 0.0, 0.0)) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(rotation, translation)`` for a camera at ``position`` looking at ``target``."""
    pos = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - pos
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise Desk3DValidationError("Camera position coincides with the look-at target")
    forward /= norm
    right = np.cross(forward, WORLD_UP)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    return rotation, -rotation @ pos


def orbit_position(azimuth_deg: float, elevation_deg: float, radius: float) -> np.ndarray:
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    return radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])


def _ring_label(n: int, azimuth_offset: float) -> str:
    offset = azimuth_offset % 360.0
    if n == 4 and math.isclose(offset, 45.0):
        return "4-diagonal"
    if n in (4, 8, 16) and math.isclose(offset, 0.0):
        return str(n)
    return "custom"


def pose_ring(
    n: int,
    elevation: float = DEFAULT_ELEVATION,
    azimuth_offset: float = 0.0,
    radius: float = DEFAULT_RADIUS,
    fov_y: float = DEFAULT_FOV_Y,
    image_size: int = DEFAULT_IMAGE_SIZE,
) -> PoseSet:
    """Cameras at azimuths ``offset + k * 360 / n`` on a fixed-elevation circle, looking at the origin.

    Args:
        n: Number of cameras
        elevation: Elevation in degrees above the xy-plane
        azimuth_offset: Azimuth of the first camera in degrees
        radius: Distance from the origin
        fov_y: Vertical field of view in radians
        image_size: Image size in pixels

    Returns:
        The pose set; the first camera of an unshifted ring is the frontal pose

    Raises:
        Desk3DValidationError: If n < 1 or radius <= 0
    """
    if n < 1:
        raise Desk3DValidationError(f"pose_ring needs at least one camera, got n={n}")
    if radius <= 0:
        raise Desk3DValidationError(f"radius must be positive, got {radius}")
    poses = []
    for k in range(n):
        rotation, translation = look_at(orbit_position(azimuth_offset + k * 360.0 / n, elevation, radius))
        poses.append(CameraPose(rotation, translation, fov_y, image_size))
    return PoseSet(poses, _ring_label(n, azimuth_offset))


def standard_pose_set(
    label: str, radius: float = DEFAULT_RADIUS, fov_y: float = DEFAULT_FOV_Y, image_size: int = DEFAULT_IMAGE_SIZE
) -> PoseSet:
    """One of the four ablation sets; all are subsets of the 16-camera ring at 20 degrees."""
    if label == "4":
        return pose_ring(4, DEFAULT_ELEVATION, 0.0, radius, fov_y, image_size)
    if label == "4-diagonal":
        return pose_ring(4, DEFAULT_ELEVATION, 45.0, radius, fov_y, image_size)
    if label == "8":
        return pose_ring(8, DEFAULT_ELEVATION, 0.0, radius, fov_y, image_size)
    if label == "16":
        return pose_ring(16, DEFAULT_ELEVATION, 0.0, radius, fov_y, image_size)
    raise Desk3DValidationError(f"Unknown pose set label {label!r}; expected one of {POSE_SET_LABELS}")


def ring_indices(label: str) -> List[int]:
    """Indices of a standard pose set within the 16-camera ring."""
    step = {"4": 4, "8": 2, "16": 1}
    if label == "4-diagonal":
        return [2, 6, 10, 14]
    if label not in step:
        raise Desk3DValidationError(f"Unknown pose set label {label!r}; expected one of {POSE_SET_LABELS}")
    return list(range(0, 16, step[label]))


def random_pose(
    rng: np.random.Generator,
    elevation_range: Tuple[float, float] = (-10.0, 40.0),
    fov_range_deg: Tuple[float, float] = (30.0, 50.0),
    image_size: int = DEFAULT_IMAGE_SIZE,
) -> CameraPose:
    """Random elevation/azimuth/fov camera whose distance keeps the object's frame fill constant.

    The fill fraction is the one a unit-radius object has at the default radius
    and field of view.
    """
    fill = 1.0 / (math.sqrt(DEFAULT_RADIUS**2 - 1.0) * math.tan(0.5 * DEFAULT_FOV_Y))
    fov = math.radians(float(rng.uniform(*fov_range_deg)))
    radius = math.sqrt(1.0 + 1.0 / (fill * math.tan(0.5 * fov)) ** 2)
    elevation = float(rng.uniform(*elevation_range))
    azimuth = float(rng.uniform(0.0, 360.0))
    rotation, translation = look_at(orbit_position(azimuth, elevation, radius))
    return CameraPose(rotation, translation, fov, image_size)


def generate_rays(pose: CameraPose, resolution: Optional[int] = None, pixel_offset: float = 0.5) -> RayBundle:
    """Per-pixel world-space rays.

    Pixel ``(row i, col j)`` looks through image point ``(j + pixel_offset, i + pixel_offset)``
    measured from the top-left image corner; ``pixel_offset=0`` samples pixel corners.

    Raises:
        Desk3DValidationError: If resolution < 1
    """
    size = pose.image_size if resolution is None else resolution
    if size < 1:
        raise Desk3DValidationError(f"resolution must be >= 1, got {size}")
    focal = pose.focal(size)
    coords = (np.arange(size, dtype=np.float64) + pixel_offset - 0.5 * size) / focal
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    cam = np.stack([xs, ys, np.ones_like(xs)], axis=-1)
    cam /= np.linalg.norm(cam, axis=-1, keepdims=True)
    directions = cam @ pose.rotation
    origins = np.broadcast_to(pose.position, directions.shape).copy()
    return RayBundle(origins, directions)


def project_points(
    pose: CameraPose, points: np.ndarray, resolution: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Project world points to continuous pixel coordinates.

    Returns:
        ``(pixels, depth)`` where ``pixels[:, 0]`` is the column and ``pixels[:, 1]``
        the row, with integer values at pixel centers, and ``depth`` is the
        camera-space z (positive in front of the camera)
    """
    size = pose.image_size if resolution is None else resolution
    cam = pose.world_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    focal = pose.focal(size)
    z = cam[:, 2]
    safe = np.where(np.abs(z) < 1e-12, 1e-12, z)
    cols = focal * cam[:, 0] / safe + 0.5 * size - 0.5
    rows = focal * cam[:, 1] / safe + 0.5 * size - 0.5
    return np.stack([cols, rows], axis=1), z


def pose_features(pose: CameraPose) -> np.ndarray:
    """Flattened rotation (9) followed by translation (3), float32."""
    return np.concatenate([pose.rotation.reshape(-1), pose.translation]).astype(np.float32)


def save_pose_set(pose_set: PoseSet, path: Union[str, Path]) -> None:
    """Write one line per camera: 12 feature floats, fov_y, image size."""
    lines = [f"# label {pose_set.label}"]
    for pose in pose_set:
        values = list(pose.rotation.reshape(-1)) + list(pose.translation)
        lines.append(" ".join(repr(float(v)) for v in values) + f" {pose.fov_y!r} {pose.image_size}")
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as err:
        raise Desk3DDatasetError(f"Cannot write pose set {path}: {err}") from err


def load_pose_set(path: Union[str, Path]) -> PoseSet:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise Desk3DDatasetError(f"Cannot read pose set {path}: {err}") from err
    label = "custom"
    poses = []
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "label":
                label = parts[1]
            continue
        fields = line.split()
        if len(fields) != 14:
            raise Desk3DDatasetError(f"{path}:{number}: expected 14 fields, got {len(fields)}")
        try:
            values = [float(v) for v in fields[:13]]
            size = int(fields[13])
        except ValueError as err:
            raise Desk3DDatasetError(f"{path}:{number}: {err}") from err
        poses.append(CameraPose(np.array(values[:9]).reshape(3, 3), np.array(values[9:12]), values[12], size))
    return PoseSet(poses, label)
