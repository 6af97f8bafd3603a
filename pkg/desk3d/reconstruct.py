"""Triplane reconstruction: transformer encoder, neural SDF/PBR field and SDF volume rendering.

A learned grid of triplane tokens is refined by transformer blocks that
cross-attend to patch tokens of the posed input views. The refined tokens are
unpatchified into three ``P x P x C`` feature planes (XY, XZ, YZ). A field
query sums the bilinear samples of the three planes and decodes the feature
with separate SDF, albedo and material heads.
"""

import contextlib
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import gradcore as G
from .camgeom import DEFAULT_FOV_Y, DEFAULT_RADIUS, CameraPose, PoseSet, generate_rays
from .exceptions import Desk3DCheckpointError, Desk3DDatasetError, Desk3DShapeError, Desk3DValidationError
from .nn import (
    MLP,
    Linear,
    ParamStore,
    TransformerBlock,
    ema_update,
    load_checkpoint,
    load_store,
    optimizer_step,
    save_store,
)
from .promptgen import SceneSpec
from .render import ChannelImage, RenderedDataset, edge_band, shade

logger = logging.getLogger(__name__)

NORMAL_STEP = 1e-2
BCE_CLAMP = 1e-4
QUERY_CHUNK = 65536


@dataclass(frozen=True)
class ReconConfig:
    """Architecture of the reconstruction model.

    ``triplane_res`` (P) may change without changing the parameter count: the
    learned ``base_grid`` tokens are resampled to ``(P / 2)^2`` tokens per plane,
    each token decoding to a 2x2 texel block.
    """

    resolution: int = 32
    patch: int = 4
    dim: int = 64
    heads: int = 4
    depth: int = 2
    triplane_res: int = 16
    plane_channels: int = 16
    base_grid: int = 4
    head_hidden: int = 32
    sdf_prior_radius: float = 0.6

    @property
    def token_grid(self) -> int:
        return self.triplane_res // 2


@dataclass(frozen=True)
class LossWeights:
    mask: float = 1.0
    depth: float = 1.0
    albedo: float = 1.0
    material: float = 0.5
    normal: float = 0.5


@dataclass
class ReconInputs:
    """Posed input views: rgb in [0, 1], camera-frame normals, pose features ``[V, 12]``."""

    rgb: np.ndarray
    normal: np.ndarray
    pose_feats: np.ndarray

    @classmethod
    def from_views(cls, views: Sequence[ChannelImage], poses: PoseSet) -> "ReconInputs":
        return cls(
            np.stack([v.rgb for v in views]).astype(np.float32),
            np.stack([v.normal for v in views]).astype(np.float32),
            poses.features(),
        )

    def permuted(self, order: Sequence[int]) -> "ReconInputs":
        index = list(order)
        return ReconInputs(self.rgb[index], self.normal[index], self.pose_feats[index])


@dataclass
class FieldOutput:
    """Field values at N points; ``material`` holds (roughness, metallic)."""

    sdf: G.Tensor
    albedo: G.Tensor
    material: G.Tensor
    clamped: np.ndarray


@dataclass
class RenderOutput:
    """Volume-rendered channels for the selected pixels (tensors stay differentiable)."""

    pixels: np.ndarray
    mask: G.Tensor
    depth: G.Tensor
    albedo: G.Tensor
    material: G.Tensor
    normal: G.Tensor
    world_normal: np.ndarray
    directions: np.ndarray


class FieldHeads:
    """Decoders from a summed triplane feature to SDF, albedo and material."""

    def __init__(self, store: ParamStore, channels: int, hidden: int, rng: np.random.Generator) -> None:
        self.sdf = MLP(store, "heads.sdf", [channels, hidden, 1], rng)
        self.albedo = MLP(store, "heads.albedo", [channels, hidden, 3], rng)
        self.material = MLP(store, "heads.material", [channels, hidden, 2], rng)


class TriplaneField:
    """Neural SDF + PBR field over ``[-1, 1]^3``.

    Args:
        planes: Feature planes ``[3, P, P, C]`` in XY, XZ, YZ order
        heads: Field decoders
        beta: Laplace density scale used when volume rendering
        prior_radius: Radius of a sphere SDF added to the decoded SDF (0 disables)
    """

    def __init__(self, planes: G.Tensor, heads: FieldHeads, beta: float = 0.1, prior_radius: float = 0.0) -> None:
        if not beta > 0:
            raise Desk3DValidationError(f"beta must be positive, got {beta}")
        self.planes = planes
        self.heads = heads
        self.beta = beta
        self.prior_radius = prior_radius

    def features(self, points: G.Tensor) -> G.Tensor:
        xy = G.bilinear_sample(self.planes[0], points[:, [0, 1]])
        xz = G.bilinear_sample(self.planes[1], points[:, [0, 2]])
        yz = G.bilinear_sample(self.planes[2], points[:, [1, 2]])
        return xy + xz + yz

    def query(self, points: G.Operand) -> FieldOutput:
        """Decode the field at ``[N, 3]`` points; points outside the cube are clamped and flagged."""
        p = G.as_tensor(points)
        clamped = np.any(np.abs(p.data) > 1.0, axis=1)
        if clamped.any():
            logger.debug("Clamped %d field queries outside [-1, 1]^3", int(clamped.sum()))
        feature = self.features(G.clamp(p, -1.0, 1.0))
        sdf = self.heads.sdf(feature).reshape(p.shape[0])
        if self.prior_radius > 0:
            sdf = sdf + G.sqrt(G.tsum(p * p, axis=1) + 1e-12) - self.prior_radius
        return FieldOutput(sdf, G.sigmoid(self.heads.albedo(feature)), G.sigmoid(self.heads.material(feature)), clamped)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
        with G.no_grad():
            chunks = [self.query(points[i : i + QUERY_CHUNK]).sdf.data for i in range(0, len(points), QUERY_CHUNK)]
        return np.concatenate(chunks).astype(np.float64) if chunks else np.zeros(0)

    def attributes(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
        albedo, material = [], []
        with G.no_grad():
            for i in range(0, len(points), QUERY_CHUNK):
                out = self.query(points[i : i + QUERY_CHUNK])
                albedo.append(out.albedo.data)
                material.append(out.material.data)
        if not albedo:
            return np.zeros((0, 3)), np.zeros(0), np.zeros(0)
        mat = np.concatenate(material).astype(np.float64)
        return np.concatenate(albedo).astype(np.float64), mat[:, 0], mat[:, 1]


class AnalyticField:
    """Adapter exposing a procedural scene through the field interface (no gradients)."""

    def __init__(self, scene: SceneSpec, beta: float = 0.01) -> None:
        if not beta > 0:
            raise Desk3DValidationError(f"beta must be positive, got {beta}")
        self.scene = scene
        self.beta = beta

    def query(self, points: G.Operand) -> FieldOutput:
        p = np.asarray(G.as_tensor(points).data, dtype=np.float64)
        albedo, roughness, metallic = self.scene.attributes(p)
        return FieldOutput(
            G.Tensor(self.scene.sdf(p)),
            G.Tensor(albedo),
            G.Tensor(np.stack([roughness, metallic], axis=1)),
            np.any(np.abs(p) > 1.0, axis=1),
        )

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return self.scene.sdf(points)

    def attributes(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.scene.attributes(points)


Field = Union[TriplaneField, AnalyticField]


def query_field(field_: Field, points: G.Operand) -> FieldOutput:
    """Evaluate ``(sdf, albedo, material)`` at ``[N, 3]`` points in ``[-1, 1]^3``."""
    return field_.query(points)


def _interp_matrix(size_out: int, size_in: int) -> np.ndarray:
    """1-D linear resampling matrix with aligned end points, shape ``[size_out, size_in]``."""
    if size_in == 1:
        return np.ones((size_out, 1))
    position = np.linspace(0.0, size_in - 1, size_out)
    low = np.clip(np.floor(position).astype(int), 0, size_in - 2)
    frac = position - low
    matrix = np.zeros((size_out, size_in))
    matrix[np.arange(size_out), low] = 1.0 - frac
    matrix[np.arange(size_out), low + 1] += frac
    return matrix


class ReconModel:
    """Triplane reconstruction transformer.

    Args:
        config: Architecture hyper-parameters
        seed: Initialization seed
    """

    def __init__(self, config: ReconConfig = ReconConfig(), seed: int = 0) -> None:
        if config.triplane_res % 2 or config.triplane_res < 2:
            raise Desk3DValidationError(f"triplane_res must be an even number >= 2, got {config.triplane_res}")
        if config.resolution % config.patch:
            raise Desk3DShapeError(f"patch {config.patch} does not divide resolution {config.resolution}")
        self.config = config
        self.beta = 0.1
        self.trained = False
        self.store = ParamStore()
        rng, dim, store = np.random.default_rng(seed), config.dim, self.store
        tokens = config.base_grid * config.base_grid
        self.base_tokens = store.add("triplane.base_tokens", rng.normal(0.0, 0.5, (3, tokens, dim)))
        self.image_patch = Linear(store, "image.patch", config.patch * config.patch * 6, dim, rng)
        grid = config.resolution // config.patch
        self.image_pos = store.add("image.pos", rng.normal(0.0, 0.02, (grid * grid, dim)))
        self.pose_mlp = MLP(store, "image.pose_mlp", [12, dim, dim], rng)
        self.blocks = [
            TransformerBlock(store, f"blocks.{i}", dim, config.heads, rng, cross_attention=True)
            for i in range(config.depth)
        ]
        self.to_plane = Linear(store, "triplane.to_plane", dim, 4 * config.plane_channels, rng)
        self.heads = FieldHeads(store, config.plane_channels, config.head_hidden, rng)
        side = _interp_matrix(config.token_grid, config.base_grid)
        self._resample = np.kron(side, side).astype(np.float32)

    def image_tokens(self, inputs: ReconInputs) -> G.Tensor:
        cfg = self.config
        views = inputs.rgb.shape[0]
        if views == 0:
            raise Desk3DShapeError("Reconstruction needs at least one input view")
        expected = (views, cfg.resolution, cfg.resolution, 3)
        if inputs.rgb.shape != expected or inputs.normal.shape != expected:
            raise Desk3DShapeError(f"Input views must be {expected}, got {inputs.rgb.shape} and {inputs.normal.shape}")
        if inputs.pose_feats.shape != (views, 12):
            raise Desk3DShapeError(f"Need one 12-float pose per input view, got {inputs.pose_feats.shape}")
        stacked = np.concatenate([inputs.rgb * 2.0 - 1.0, inputs.normal], axis=-1).astype(np.float32)
        grid, p = cfg.resolution // cfg.patch, cfg.patch
        blocks = stacked.reshape(views, grid, p, grid, p, 6).transpose(0, 1, 3, 2, 4, 5)
        patches = blocks.reshape(views, grid * grid, -1)
        pose = self.pose_mlp(inputs.pose_feats.astype(np.float32)).reshape(views, 1, cfg.dim)
        tokens = self.image_patch(np.ascontiguousarray(patches)) + self.image_pos + pose
        return tokens.reshape(views * grid * grid, cfg.dim)

    def encode(self, inputs: ReconInputs, beta: Optional[float] = None) -> TriplaneField:
        """Build a triplane field from posed RGB + normal views.

        Raises:
            Desk3DShapeError: On zero views or mismatched shapes
        """
        cfg = self.config
        context = self.image_tokens(inputs)
        t = cfg.token_grid
        tokens = G.matmul(self._resample, self.base_tokens).reshape(3 * t * t, cfg.dim)
        for block in self.blocks:
            tokens = block(tokens, context=context)
        texels = self.to_plane(tokens).reshape(3, t, t, 2, 2, cfg.plane_channels)
        planes = G.transpose(texels, (0, 1, 3, 2, 4, 5)).reshape(3, 2 * t, 2 * t, cfg.plane_channels)
        return TriplaneField(planes, self.heads, self.beta if beta is None else beta, cfg.sdf_prior_radius)

    def save(self, path: Union[str, Path]) -> None:
        meta = {
            "kind": "recon",
            "config": json.dumps(asdict(self.config), sort_keys=True),
            "beta": repr(self.beta),
            "trained": str(int(self.trained)),
        }
        save_store(path, self.store, meta)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ReconModel":
        _, meta = load_checkpoint(path)
        if meta.get("kind") != "recon":
            raise Desk3DCheckpointError(f"{path} is not a reconstruction checkpoint")
        model = cls(ReconConfig(**json.loads(meta["config"])))
        load_store(path, model.store)
        model.beta = float(meta.get("beta", "0.1"))
        model.trained = meta.get("trained") == "1"
        return model


# ---------------------------------------------------------------------------
# Volume rendering
# ---------------------------------------------------------------------------


def ray_box(origins: np.ndarray, directions: np.ndarray, bound: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Slab intersection with ``[-bound, bound]^3``; misses return ``near == far == 0``."""
    safe = np.where(np.abs(directions) < 1e-12, 1e-12, directions)
    t0 = (-bound - origins) / safe
    t1 = (bound - origins) / safe
    near = np.maximum(np.minimum(t0, t1).max(axis=1), 0.0)
    far = np.maximum(t0, t1).min(axis=1)
    miss = far <= near
    near[miss] = 0.0
    far[miss] = 0.0
    return near, far


def volume_render(
    field_: Field,
    pose: CameraPose,
    resolution: Optional[int] = None,
    n_samples: int = 64,
    pixels: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    beta: Optional[float] = None,
    normal_step: float = NORMAL_STEP,
) -> RenderOutput:
    """Render mask, depth, albedo, material and surface normals by SDF volume rendering.

    Density is ``laplace_density(sdf, beta)``; samples are stratified inside the
    unit cube (jittered when ``rng`` is given, bin midpoints otherwise). Depth
    is the opacity-normalized expected ray distance. The normal is the field's
    SDF gradient at the expected surface point only, in the camera frame.

    Args:
        field_: Field to render
        pose: Camera
        resolution: Image size (default: the pose's image size)
        n_samples: Samples per ray (>= 16)
        pixels: Flat pixel indices to render (default: all)
        rng: Jitter source for training
        beta: Density scale (default: the field's)
        normal_step: Finite-difference step of the surface normal

    Raises:
        Desk3DValidationError: If beta <= 0 or n_samples < 16
    """
    beta = field_.beta if beta is None else beta
    if not beta > 0:
        raise Desk3DValidationError(f"beta must be positive, got {beta}")
    if n_samples < 16:
        raise Desk3DValidationError(f"n_samples must be >= 16, got {n_samples}")
    size = pose.image_size if resolution is None else resolution
    rays = generate_rays(pose, size)
    index = np.arange(size * size) if pixels is None else np.asarray(pixels, dtype=np.int64)
    origins = rays.origins.reshape(-1, 3)[index]
    directions = rays.directions.reshape(-1, 3)[index]
    count = len(index)
    near, far = ray_box(origins, directions)
    offsets = np.full((count, n_samples), 0.5) if rng is None else rng.random((count, n_samples))
    delta = ((far - near) / n_samples)[:, None]
    t = near[:, None] + (np.arange(n_samples)[None, :] + offsets) * delta
    points = (origins[:, None, :] + t[..., None] * directions[:, None, :]).reshape(-1, 3)

    out = field_.query(points.astype(np.float32))
    sigma = G.laplace_density(out.sdf, beta).reshape(count, n_samples)
    optical = sigma * np.broadcast_to(delta, (count, n_samples)).astype(np.float32)
    transmittance = G.exp(-(G.cumsum(optical, axis=1) - optical))
    weights = transmittance * (1.0 - G.exp(-optical))
    mask = G.tsum(weights, axis=1)
    depth = G.tsum(weights * t.astype(np.float32), axis=1) / (mask + 1e-6)
    w3 = weights.reshape(count, n_samples, 1)
    albedo = G.tsum(w3 * out.albedo.reshape(count, n_samples, 3), axis=1)
    material = G.tsum(w3 * out.material.reshape(count, n_samples, 2), axis=1)

    surface = origins + depth.data.astype(np.float64)[:, None] * directions
    gradient = []
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = normal_step
        upper = field_.query((surface + step).astype(np.float32)).sdf
        lower = field_.query((surface - step).astype(np.float32)).sdf
        gradient.append(upper - lower)
    grad = G.stack(gradient, axis=1)
    world = grad / G.sqrt(G.tsum(grad * grad, axis=1, keepdims=True) + 1e-12)
    camera = G.matmul(world, pose.rotation.T.astype(np.float32))
    return RenderOutput(index, mask, depth, albedo, material, camera, world.data.copy(), directions)


def render_output_to_channels(output: RenderOutput, resolution: int) -> ChannelImage:
    """Assemble a full-image render into a channel stack (background zeroed by opacity)."""
    count = resolution * resolution
    if len(output.pixels) != count:
        raise Desk3DShapeError(f"Expected a full render of {count} pixels, got {len(output.pixels)}")
    mask = np.clip(output.mask.data, 0.0, 1.0)
    solid = mask > 0.5
    albedo = np.clip(output.albedo.data, 0.0, 1.0)
    material = np.clip(output.material.data, 0.0, 1.0)
    normal = np.where(solid[:, None], output.normal.data, 0.0)
    rgb = np.where(solid[:, None], shade(albedo, output.world_normal, output.directions), 0.0)
    shape2, shape3 = (resolution, resolution), (resolution, resolution, 3)
    return ChannelImage(
        rgb=rgb.reshape(shape3).astype(np.float32),
        albedo=albedo.reshape(shape3).astype(np.float32),
        normal=normal.reshape(shape3).astype(np.float32),
        depth=np.where(solid, output.depth.data, 0.0).reshape(shape2).astype(np.float32),
        mask=solid.reshape(shape2).astype(np.float32),
        roughness=material[:, 0].reshape(shape2).astype(np.float32),
        metallic=material[:, 1].reshape(shape2).astype(np.float32),
        edge=edge_band(solid.reshape(shape2)),
    )


def render_views(
    field_: Field, poses: PoseSet, resolution: Optional[int] = None, n_samples: int = 128, chunk: int = 1024
) -> List[ChannelImage]:
    """Evaluation renders of a field (no graph, midpoint samples)."""
    views = []
    with G.no_grad():
        for pose in poses:
            size = pose.image_size if resolution is None else resolution
            parts = [
                volume_render(field_, pose, size, n_samples, np.arange(i, min(i + chunk, size * size)))
                for i in range(0, size * size, chunk)
            ]
            merged = RenderOutput(
                np.concatenate([p.pixels for p in parts]),
                G.Tensor(np.concatenate([p.mask.data for p in parts])),
                G.Tensor(np.concatenate([p.depth.data for p in parts])),
                G.Tensor(np.concatenate([p.albedo.data for p in parts])),
                G.Tensor(np.concatenate([p.material.data for p in parts])),
                G.Tensor(np.concatenate([p.normal.data for p in parts])),
                np.concatenate([p.world_normal for p in parts]),
                np.concatenate([p.directions for p in parts]),
            )
            views.append(render_output_to_channels(merged, size))
    return views


# ---------------------------------------------------------------------------
# Loss and training
# ---------------------------------------------------------------------------


def recon_loss(
    pred: RenderOutput, target: ChannelImage, weights: LossWeights = LossWeights(), edge: Optional[np.ndarray] = None
) -> Tuple[G.Tensor, Dict[str, float]]:
    """Five-channel supervision of rendered pixels against a target channel stack.

    Mask: binary cross-entropy over non-edge pixels. Depth, albedo, material:
    L1 over target-interior pixels. Normal: ``1 - cos`` over target-interior
    pixels. Every term skips pixels set in ``edge`` (default: the target's own
    edge band).

    Returns:
        ``(total, per-channel values)``

    Raises:
        Desk3DShapeError: If the rendered pixels do not index the target image
    """
    size = target.resolution
    if pred.pixels.size and (pred.pixels.max() >= size * size or pred.pixels.min() < 0):
        raise Desk3DShapeError(f"Rendered pixel indices exceed a {size}x{size} target")
    edge_map = target.edge if edge is None else edge
    if edge_map.shape != target.mask.shape:
        raise Desk3DShapeError(f"Edge bitmap {edge_map.shape} does not match target {target.mask.shape}")
    idx = pred.pixels
    mask_t = target.mask.reshape(-1)[idx].astype(np.float32)
    valid = ~edge_map.reshape(-1)[idx].astype(bool)
    interior = (valid & (mask_t > 0.5)).astype(np.float32)
    n_valid = max(float(valid.sum()), 1.0)
    n_interior = max(float(interior.sum()), 1.0)

    m = G.clamp(pred.mask, BCE_CLAMP, 1.0 - BCE_CLAMP)
    bce = -(G.log(m) * mask_t + G.log(1.0 - m) * (1.0 - mask_t))
    mask_term = G.tsum(bce * valid.astype(np.float32)) * (1.0 / n_valid)

    depth_t = target.depth.reshape(-1)[idx]
    depth_term = G.tsum(G.absolute(pred.depth - depth_t) * interior) * (1.0 / n_interior)
    albedo_t = target.albedo.reshape(-1, 3)[idx]
    albedo_term = G.tsum(G.absolute(pred.albedo - albedo_t) * interior[:, None]) * (1.0 / (3.0 * n_interior))
    material_t = np.stack([target.roughness.reshape(-1)[idx], target.metallic.reshape(-1)[idx]], axis=1)
    material_term = G.tsum(G.absolute(pred.material - material_t) * interior[:, None]) * (1.0 / (2.0 * n_interior))
    normal_t = target.normal.reshape(-1, 3)[idx]
    cosine = G.tsum(pred.normal * normal_t, axis=1)
    normal_term = G.tsum((1.0 - cosine) * interior) * (1.0 / n_interior)

    total = (
        mask_term * weights.mask
        + depth_term * weights.depth
        + albedo_term * weights.albedo
        + material_term * weights.material
        + normal_term * weights.normal
    )
    breakdown = {
        "mask": mask_term.item(),
        "depth": depth_term.item(),
        "albedo": albedo_term.item(),
        "material": material_term.item(),
        "normal": normal_term.item(),
    }
    return total, breakdown


def pixel_footprint(resolution: int, radius: float = DEFAULT_RADIUS, fov_y: float = DEFAULT_FOV_Y) -> float:
    """World-space size of one pixel at the object center for the fixed ring camera."""
    return 2.0 * radius * math.tan(0.5 * fov_y) / resolution


def beta_schedule(step: int, steps: int, resolution: int, start: float = 0.1) -> float:
    """Geometric decay from ``start`` to half a pixel footprint over the run."""
    end = 0.5 * pixel_footprint(resolution)
    if steps <= 1:
        return end
    fraction = min(max(step / (steps - 1), 0.0), 1.0)
    return float(start * (end / start) ** fraction)


@dataclass
class ReconTrainLog:
    losses: List[float] = field(default_factory=list)
    breakdowns: List[Dict[str, float]] = field(default_factory=list)
    betas: List[float] = field(default_factory=list)


METRICS_HEADER = ["step", "total", "mask", "depth", "albedo", "material", "normal", "beta"]


def train_recon(
    model: ReconModel,
    dataset: RenderedDataset,
    n_input_views: int = 8,
    steps: int = 3000,
    lr: float = 1e-3,
    seed: int = 0,
    ray_batch: int = 256,
    n_samples: int = 64,
    ema_decay: float = 0.999,
    weights: LossWeights = LossWeights(),
    metrics_csv: Optional[Union[str, Path]] = None,
    log_every: int = 100,
) -> ReconTrainLog:
    """Train the reconstruction model on ring views of a rendered dataset.

    Each step encodes ``n_input_views`` random ring views of one asset and
    supervises a random batch of rays of one random ring view. Beta follows
    :func:`beta_schedule`; the EMA shadow is updated every step.

    Raises:
        Desk3DDatasetError: If the dataset is empty
    """
    if len(dataset) == 0:
        raise Desk3DDatasetError("Cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    log = ReconTrainLog()
    writer = None
    handle = None
    if metrics_csv is not None:
        Path(metrics_csv).parent.mkdir(parents=True, exist_ok=True)
        handle = open(metrics_csv, "a", encoding="utf-8", newline="")
        writer = csv.writer(handle, lineterminator="\n")
        if handle.tell() == 0:
            writer.writerow(METRICS_HEADER)
    try:
        for step in range(steps):
            asset = dataset.assets[int(rng.integers(len(dataset)))]
            poses, views = asset.ring()
            count = min(n_input_views, len(views))
            chosen = np.sort(rng.choice(len(views), size=count, replace=False))
            inputs = ReconInputs.from_views([views[i] for i in chosen], poses.subset(chosen.tolist()))
            target_index = int(rng.integers(len(views)))
            target = views[target_index]
            beta = beta_schedule(step, steps, target.resolution)
            pixels = rng.choice(target.resolution**2, size=min(ray_batch, target.resolution**2), replace=False)
            field_ = model.encode(inputs, beta)
            pred = volume_render(field_, poses[target_index], target.resolution, n_samples, np.sort(pixels), rng)
            loss, breakdown = recon_loss(pred, target, weights)
            model.store.zero_grads()
            G.backward(loss)
            optimizer_step(model.store, lr=lr)
            ema_update(model.store, ema_decay)
            log.losses.append(loss.item())
            log.breakdowns.append(breakdown)
            log.betas.append(beta)
            if writer is not None:
                terms = [f"{breakdown[k]:.6f}" for k in METRICS_HEADER[2:7]]
                writer.writerow([step, f"{loss.item():.6f}", *terms, f"{beta:.6f}"])
            if log_every and (step + 1) % log_every == 0:
                recent = float(np.mean(log.losses[-log_every:]))
                logger.info("recon step %d/%d loss %.5f beta %.4f", step + 1, steps, recent, beta)
    finally:
        if handle is not None:
            handle.close()
    if steps > 0:
        model.beta = log.betas[-1]
        model.trained = True
    return log


def reconstruct_views(
    model: ReconModel, inputs: ReconInputs, poses: PoseSet, n_samples: int = 128, use_ema: bool = True
) -> List[ChannelImage]:
    """Encode inputs and render the resulting field at ``poses`` with (by default) EMA weights."""
    with G.no_grad():
        with model.store.use_ema() if use_ema else contextlib.nullcontext():
            field_ = model.encode(inputs)
            return render_views(field_, poses, model.config.resolution, n_samples)


def validation_loss(
    model: ReconModel,
    dataset: RenderedDataset,
    n_input_views: int = 8,
    n_samples: int = 64,
    use_ema: bool = True,
    weights: LossWeights = LossWeights(),
) -> float:
    """Mean full-image reconstruction loss over the ring views of every asset (deterministic)."""
    if len(dataset) == 0:
        raise Desk3DDatasetError("Cannot validate on an empty dataset")
    totals = []
    with G.no_grad():
        with model.store.use_ema() if use_ema else contextlib.nullcontext():
            for asset in dataset.assets:
                poses, views = asset.ring()
                stride = max(len(views) // n_input_views, 1)
                chosen = list(range(0, len(views), stride))[:n_input_views]
                field_ = model.encode(ReconInputs.from_views([views[i] for i in chosen], poses.subset(chosen)))
                for pose, view in zip(poses, views):
                    pred = volume_render(field_, pose, view.resolution, n_samples)
                    totals.append(recon_loss(pred, view, weights)[0].item())
    return float(np.mean(totals))
