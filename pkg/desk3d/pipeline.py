"""End-to-end text-to-3D and image-to-3D runs plus layout-driven scene composition.

Stage order::

    parse -> sample_rgb -> sample_normal -> encode -> render_views
          -> extract -> quads -> uv -> bake -> refine -> export

Each run writes into a fresh ``run_NNNN`` directory under ``config.runs_dir``:
one sub-directory per stage with that stage's artifacts, and ``manifest.json``
holding the config text, checkpoint checksums, stage inputs and timings.
"""

import hashlib
import json
import logging
import re
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from PIL import Image

from . import gradcore as G
from .camgeom import PoseSet, pose_ring
from .config import LayoutSpec, PipelineConfig
from .exceptions import Desk3DCheckpointError, Desk3DError, Desk3DShapeError, Desk3DStageError
from .meshops import (
    AssetBundle,
    ExportPaths,
    ProjectionView,
    SceneInstance,
    backproject_refine,
    bake_textures,
    export_obj,
    marching_cubes,
    tris_to_quads,
    uv_atlas,
    write_scene_obj,
)
from .mvdiff import MultiViewDenoiser, sample
from .promptgen import PromptSpec, parse_prompt, prompt_embedding, unparse
from .reconstruct import ReconInputs, ReconModel, TriplaneField, render_views
from .render import ChannelImage, save_channels, to_uint8, trace_channels

logger = logging.getLogger(__name__)

STAGES = (
    "parse",
    "sample_rgb",
    "sample_normal",
    "encode",
    "render_views",
    "extract",
    "quads",
    "uv",
    "bake",
    "refine",
    "export",
)

STAGE_INPUTS: Dict[str, Tuple[str, ...]] = {
    "parse": (),
    "sample_rgb": ("parse",),
    "sample_normal": ("parse", "sample_rgb"),
    "encode": ("sample_rgb", "sample_normal"),
    "render_views": ("encode",),
    "extract": ("encode",),
    "quads": ("extract",),
    "uv": ("quads",),
    "bake": ("encode", "uv"),
    "refine": ("encode", "bake"),
    "export": ("refine",),
}


@dataclass
class Checkpoints:
    mvdiff: MultiViewDenoiser
    normal: MultiViewDenoiser
    recon: ReconModel
    checksums: Dict[str, str] = field(default_factory=dict)


def file_checksum(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def load_checkpoints(config: PipelineConfig) -> Checkpoints:
    """Load the three trained models named by the config.

    Raises:
        Desk3DCheckpointError: If a checkpoint is missing or untrained
    """
    paths = {
        "mvdiff": Path(config.mvdiff_checkpoint),
        "normal": Path(config.normal_checkpoint),
        "recon": Path(config.recon_checkpoint),
    }
    missing = [f"{name} ({path})" for name, path in paths.items() if not path.is_file()]
    if missing:
        raise Desk3DCheckpointError(f"Missing checkpoints: {', '.join(missing)}")
    mvdiff = MultiViewDenoiser.load(paths["mvdiff"])
    normal = MultiViewDenoiser.load(paths["normal"])
    recon = ReconModel.load(paths["recon"])
    if not mvdiff.trained:
        raise Desk3DCheckpointError(f"{paths['mvdiff']} holds an untrained denoiser")
    if not normal.control_trained:
        raise Desk3DCheckpointError(f"{paths['normal']} has no trained normal control branch")
    if not recon.trained:
        raise Desk3DCheckpointError(f"{paths['recon']} holds an untrained reconstruction model")
    checksums = {name: file_checksum(path) for name, path in paths.items()}
    return Checkpoints(mvdiff, normal, recon, checksums)


@dataclass
class StageRecord:
    name: str
    inputs: Tuple[str, ...]
    outputs: List[str] = field(default_factory=list)
    seconds: float = 0.0


@dataclass
class RunResult:
    run_dir: Path
    bundle: AssetBundle
    export: ExportPaths
    manifest: Dict[str, object]


class _RunRecorder:
    def __init__(self, run_dir: Path) -> None:
        self.run_dir = run_dir
        self.stages: List[StageRecord] = []

    @contextmanager
    def stage(self, name: str) -> Iterator[Path]:
        record = StageRecord(name, STAGE_INPUTS[name])
        stage_dir = self.run_dir / name
        stage_dir.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        try:
            yield stage_dir
        except Desk3DStageError:
            raise
        except (Desk3DError, OSError, ValueError) as err:
            logger.error("Stage %s failed: %s", name, err)
            raise Desk3DStageError(f"Stage '{name}' failed: {err}", stage=name) from err
        record.seconds = time.perf_counter() - start
        record.outputs = sorted(p.name for p in stage_dir.iterdir())
        self.stages.append(record)
        logger.info("Stage %s finished in %.2fs", name, record.seconds)


def next_run_dir(root: Path, prefix: str = "run") -> Path:
    """Create and return the next unused ``<prefix>_NNNN`` directory."""
    root.mkdir(parents=True, exist_ok=True)
    pattern = re.compile(rf"^{prefix}_(\d{{4}})$")
    taken = [int(m.group(1)) for p in root.iterdir() if (m := pattern.match(p.name))]
    run_dir = root / f"{prefix}_{(max(taken) + 1) if taken else 0:04d}"
    run_dir.mkdir()
    return run_dir


def _save_images(images: np.ndarray, directory: Path, stem: str, normal: bool = False) -> None:
    np.save(directory / f"{stem}.npy", images)
    for index, image in enumerate(images):
        values = (image + 1.0) * 0.5 if normal else image
        Image.fromarray(to_uint8(values)).save(directory / f"{stem}_{index:02d}.png")


def _unit_normals(normal: np.ndarray) -> np.ndarray:
    length = np.linalg.norm(normal, axis=-1, keepdims=True)
    return np.asarray(np.where(length > 1e-6, normal / np.maximum(length, 1e-6), 0.0), dtype=np.float32)


def _recon_subset(count: int, available: int) -> List[int]:
    if count >= available:
        return list(range(available))
    return sorted({int(round(i * available / count)) % available for i in range(count)})


def _run_chain(
    kind: str,
    spec: Optional[PromptSpec],
    reference: Optional[np.ndarray],
    config: PipelineConfig,
    checkpoints: Checkpoints,
) -> RunResult:
    run_dir = next_run_dir(Path(config.runs_dir))
    logger.info("Starting %s run in %s", kind, run_dir)
    recorder = _RunRecorder(run_dir)
    embedding = prompt_embedding(spec) if spec is not None else None
    poses = pose_ring(config.sample_views, image_size=config.resolution)

    with recorder.stage("parse") as out:
        (out / "prompt.txt").write_text((unparse(spec) if spec else "") + "\n", encoding="utf-8")
        if reference is not None:
            _save_images(reference[None], out, "reference")

    with recorder.stage("sample_rgb") as out:
        rgb = sample(checkpoints.mvdiff, poses, embedding, seed=config.sample_seed, reference=reference)
        _save_images(rgb, out, "rgb")

    with recorder.stage("sample_normal") as out:
        normal = sample(
            checkpoints.normal, poses, embedding, seed=config.sample_seed + 1, hint=rgb, channel="normal"
        )
        normal = _unit_normals(normal)
        _save_images(normal, out, "normal", normal=True)

    recon = checkpoints.recon
    with G.no_grad(), recon.store.use_ema():
        with recorder.stage("encode") as out:
            chosen = _recon_subset(config.recon_views, len(poses))
            inputs = ReconInputs(rgb[chosen], normal[chosen], poses.subset(chosen).features())
            field_ = recon.encode(inputs)
            np.save(out / "triplane.npy", field_.planes.data)

        with recorder.stage("render_views") as out:
            for index, view in enumerate(render_views(field_, poses, config.resolution, config.n_samples)):
                save_channels(view, out / f"view_{index:02d}")

        with recorder.stage("extract") as out:
            mesh = marching_cubes(field_, config.grid_n)
            if mesh.is_empty:
                raise Desk3DStageError("Stage 'extract' failed: the field has no surface", stage="extract")
            np.savez(out / "mesh.npz", vertices=mesh.vertices, triangles=mesh.triangles)

        with recorder.stage("quads") as out:
            quads = tris_to_quads(mesh, config.angle_tol)
            _save_faces(quads.faces, out / "faces.txt")

        with recorder.stage("uv") as out:
            atlas = uv_atlas(quads, config.texture_size)
            np.save(out / "charts.npy", atlas.charts)

        with recorder.stage("bake") as out:
            provenance = {"kind": kind, "prompt": unparse(spec) if spec else "", "seed": str(config.sample_seed)}
            provenance.update({f"checksum_{k}": v for k, v in sorted(checkpoints.checksums.items())})
            bundle = bake_textures(field_, atlas, config.texture_size, config.dilation, provenance)
            Image.fromarray(to_uint8(bundle.albedo)).save(out / "albedo.png")
            Image.fromarray(to_uint8(bundle.material)).save(out / "material.png")

        with recorder.stage("refine") as out:
            views = _projection_views(field_, poses, config.resolution * config.refine_scale)
            bundle = backproject_refine(bundle, views, config.visibility_tol)
            Image.fromarray(to_uint8(bundle.albedo)).save(out / "albedo.png")

    with recorder.stage("export") as out:
        export = export_obj(bundle, out, "asset")

    manifest: Dict[str, object] = {
        "kind": kind,
        "prompt": unparse(spec) if spec else "",
        "config": config.to_text(),
        "checkpoints": checkpoints.checksums,
        "stages": [
            {"name": s.name, "inputs": list(s.inputs), "outputs": s.outputs, "seconds": round(s.seconds, 4)}
            for s in recorder.stages
        ],
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("Run %s complete", run_dir.name)
    return RunResult(run_dir, bundle, export, manifest)


def _save_faces(faces: List[Tuple[int, ...]], path: Path) -> None:
    path.write_text("".join(" ".join(str(v) for v in face) + "\n" for face in faces), encoding="utf-8")


def _projection_views(field_: TriplaneField, poses: PoseSet, resolution: int) -> List[ProjectionView]:
    views = []
    for pose in poses:
        channels: ChannelImage = trace_channels(field_.sdf, field_.attributes, pose, resolution)
        views.append(ProjectionView(pose, channels.albedo.astype(np.float64), channels.depth.astype(np.float64)))
    return views


def run_text_to_3d(prompt: str, config: PipelineConfig, checkpoints: Optional[Checkpoints] = None) -> RunResult:
    """Generate a textured asset from a prompt.

    The prompt is parsed and the checkpoints are loaded before any run
    directory is created.

    Raises:
        Desk3DPromptError: If the prompt does not parse
        Desk3DCheckpointError: If a checkpoint is missing or untrained
        Desk3DStageError: If a stage fails (``stage`` names it)
    """
    spec = parse_prompt(prompt)
    checkpoints = checkpoints or load_checkpoints(config)
    return _run_chain("text", spec, None, config, checkpoints)


def run_image_to_3d(
    reference: np.ndarray,
    config: PipelineConfig,
    prompt: Optional[str] = None,
    checkpoints: Optional[Checkpoints] = None,
) -> RunResult:
    """Generate a textured asset from a pre-masked RGB reference seen from ring pose 0.

    Raises:
        Desk3DShapeError: If the reference is not square RGB at the model resolution
        Desk3DCheckpointError: If a checkpoint is missing or untrained
        Desk3DStageError: If a stage fails
    """
    reference = np.asarray(reference, dtype=np.float32)
    if reference.ndim != 3 or reference.shape[2] != 3 or reference.shape[0] != reference.shape[1]:
        raise Desk3DShapeError(f"Reference must be a square RGB image, got {reference.shape}")
    if reference.shape[0] != config.resolution:
        raise Desk3DShapeError(f"Reference is {reference.shape[0]}px but the models expect {config.resolution}px")
    spec = parse_prompt(prompt) if prompt else None
    checkpoints = checkpoints or load_checkpoints(config)
    return _run_chain("image", spec, np.clip(reference, 0.0, 1.0), config, checkpoints)


def load_reference(path: Path) -> np.ndarray:
    """Read an RGB reference image as floats in [0, 1]."""
    try:
        with Image.open(path) as image:
            return np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as err:
        raise Desk3DShapeError(f"Cannot read reference image {path}: {err}") from err


@dataclass
class SceneResult:
    scene_dir: Path
    obj_path: Optional[Path]
    runs: Dict[Tuple[str, int], RunResult]
    failures: Dict[int, str]


def compose_scene(
    layout: LayoutSpec, config: PipelineConfig, checkpoints: Optional[Checkpoints] = None
) -> SceneResult:
    """Generate every layout entry (once per prompt and seed) and merge them into one grouped OBJ.

    A failing entry is logged and reported in ``failures``; the others still
    run.

    Raises:
        Desk3DCheckpointError: If a checkpoint is missing
        Desk3DStageError: If no entry succeeds
    """
    checkpoints = checkpoints or load_checkpoints(config)
    scene_dir = next_run_dir(Path(config.runs_dir), "scene")
    runs: Dict[Tuple[str, int], RunResult] = {}
    failures: Dict[int, str] = {}
    instances: List[SceneInstance] = []
    asset_names: Dict[Tuple[str, int], str] = {}
    for index, entry in enumerate(layout.entries):
        seed = config.sample_seed if entry.seed is None else entry.seed
        try:
            key = (unparse(parse_prompt(entry.prompt)), seed)
            if key not in runs:
                runs[key] = run_text_to_3d(entry.prompt, replace(config, sample_seed=seed), checkpoints)
                asset_names[key] = f"asset_{len(asset_names):02d}"
        except Desk3DError as err:
            logger.warning("Layout entry %d (%r) failed: %s", index, entry.prompt, err)
            failures[index] = str(err)
            continue
        slug = re.sub(r"[^a-z0-9]+", "_", key[0].lower()).strip("_")
        group = f"obj_{index:02d}_{slug}"
        instances.append(
            SceneInstance(group, asset_names[key], runs[key].bundle, entry.scale, entry.yaw, entry.position)
        )
    if not instances:
        raise Desk3DStageError(f"Every layout entry failed: {failures}", stage="compose")
    obj_path = write_scene_obj(instances, scene_dir, "scene")
    summary = {
        "entries": len(layout.entries),
        "instances": [i.group for i in instances],
        "assets": {name: str(runs[key].run_dir) for key, name in asset_names.items()},
        "failures": {str(k): v for k, v in failures.items()},
    }
    (scene_dir / "scene.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return SceneResult(scene_dir, obj_path, runs, failures)
