"""Metrics and the ablation harness.

Every metric is computed over the target's interior pixels (mask minus edge
band), the same region the reconstruction losses supervise. Grid results are
written with the fixed header::

    experiment,input_views,val_views,albedo_l1,material_l2,depth_l2,mask_iou,psnr
"""

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from matplotlib.figure import Figure
from scipy.spatial import cKDTree

from .camgeom import POSE_SET_LABELS, PoseSet, pose_ring, ring_indices
from .exceptions import Desk3DCheckpointError, Desk3DDatasetError, Desk3DValidationError
from .meshops import SdfFn, SdfSource, TriMesh, marching_cubes
from .mvdiff import DenoiserConfig, MultiViewDenoiser, sample, train_mvdiff
from .promptgen import SceneSpec, parse_prompt, prompt_embedding
from .reconstruct import (
    ReconConfig,
    ReconInputs,
    ReconModel,
    reconstruct_views,
    train_recon,
    validation_loss,
)
from .render import ChannelImage, RenderedAsset, RenderedDataset, render_channels

logger = logging.getLogger(__name__)

CSV_HEADER = ["experiment", "input_views", "val_views", "albedo_l1", "material_l2", "depth_l2", "mask_iou", "psnr"]
SWEEP_HEADER = ["sweep", "value", "val_loss"]
MAX_PSNR = 100.0

Predictor = Callable[[RenderedAsset, Sequence[int], Sequence[int]], List[ChannelImage]]


@dataclass
class MetricsRow:
    experiment: str
    input_views: str
    val_views: str
    albedo_l1: float
    material_l2: float
    depth_l2: float
    mask_iou: float
    psnr: float

    def values(self) -> List[str]:
        return [self.experiment, self.input_views, self.val_views] + [
            f"{getattr(self, name):.6f}" for name in CSV_HEADER[3:]
        ]


def view_metrics(pred: ChannelImage, target: ChannelImage) -> Dict[str, float]:
    """Masked per-view metrics; identical inputs give zero errors, IoU 1 and PSNR ``MAX_PSNR``."""
    if pred.mask.shape != target.mask.shape:
        raise Desk3DValidationError(f"Prediction {pred.mask.shape} and target {target.mask.shape} differ in size")
    region = target.interior()
    valid = ~target.edge.astype(bool)
    count = max(int(region.sum()), 1)
    albedo_l1 = float(np.abs(pred.albedo - target.albedo)[region].sum() / (3 * count))
    material_pred = np.stack([pred.roughness, pred.metallic], axis=-1)
    material_true = np.stack([target.roughness, target.metallic], axis=-1)
    material_l2 = float(np.square(material_pred - material_true)[region].sum() / (2 * count))
    depth_l2 = float(np.square(pred.depth - target.depth)[region].sum() / count)
    pred_mask, true_mask = (pred.mask > 0.5) & valid, (target.mask > 0.5) & valid
    union = int(np.sum(pred_mask | true_mask))
    iou = float(np.sum(pred_mask & true_mask) / union) if union else 1.0
    mse = float(np.square(pred.rgb - target.rgb)[region].sum() / (3 * count))
    psnr = MAX_PSNR if mse <= 10 ** (-MAX_PSNR / 10) else min(10.0 * math.log10(1.0 / mse), MAX_PSNR)
    return {"albedo_l1": albedo_l1, "material_l2": material_l2, "depth_l2": depth_l2, "mask_iou": iou, "psnr": psnr}


def ground_truth_predictor(asset: RenderedAsset, inputs: Sequence[int], targets: Sequence[int]) -> List[ChannelImage]:
    """Return the asset's own renders; the identity upper bound of every metric."""
    return [asset.views[i] for i in targets]


def recon_predictor(model: ReconModel, n_samples: int = 128) -> Predictor:
    """Encode the asset's input views and volume-render the validation poses with EMA weights."""

    def predict(asset: RenderedAsset, inputs: Sequence[int], targets: Sequence[int]) -> List[ChannelImage]:
        poses, views = asset.ring()
        recon_inputs = ReconInputs.from_views([views[i] for i in inputs], poses.subset(list(inputs)))
        return reconstruct_views(model, recon_inputs, poses.subset(list(targets)), n_samples)

    return predict


def eval_grid(
    predictor: Predictor,
    dataset: RenderedDataset,
    input_sets: Sequence[str] = POSE_SET_LABELS,
    val_sets: Sequence[str] = POSE_SET_LABELS,
    experiment: str = "pose_grid",
) -> List[MetricsRow]:
    """Mean metrics for every (input pose set, validation pose set) pair.

    Assets are visited in asset-id order and each needs the full 16-view ring.

    Raises:
        Desk3DDatasetError: If the dataset is empty or an asset lacks ring renders
    """
    if len(dataset) == 0:
        raise Desk3DDatasetError("Cannot evaluate on an empty dataset")
    assets = sorted(dataset.assets, key=lambda a: a.asset_id)
    for asset in assets:
        if len(asset.ring()[1]) < 16:
            raise Desk3DDatasetError(f"Asset {asset.asset_id} is missing ring renders ({len(asset.ring()[1])} of 16)")
    rows = []
    for input_label in input_sets:
        inputs = ring_indices(input_label)
        for val_label in val_sets:
            targets = ring_indices(val_label)
            per_asset: List[Dict[str, float]] = []
            for asset in assets:
                preds = predictor(asset, inputs, targets)
                metrics = [view_metrics(p, asset.views[i]) for p, i in zip(preds, targets)]
                per_asset.append({k: float(np.mean([m[k] for m in metrics])) for k in metrics[0]})
            means = {k: float(np.mean([m[k] for m in per_asset])) for k in per_asset[0]}
            rows.append(MetricsRow(experiment, input_label, val_label, **means))
            albedo, depth = means["albedo_l1"], means["depth_l2"]
            logger.info("%s in=%s val=%s albedo %.4f depth %.4f", experiment, input_label, val_label, albedo, depth)
    return rows


def metrics_csv(rows: Sequence[MetricsRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow(row.values())
    return buffer.getvalue()


def write_metrics_csv(rows: Sequence[MetricsRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(metrics_csv(rows), encoding="utf-8")
    return path


def grid_table(rows: Sequence[MetricsRow], metric: str) -> Tuple[List[str], List[str], np.ndarray]:
    """Arrange one metric as an input-set by validation-set matrix."""
    inputs = list(dict.fromkeys(r.input_views for r in rows))
    vals = list(dict.fromkeys(r.val_views for r in rows))
    table = np.full((len(inputs), len(vals)), np.nan)
    for r in rows:
        table[inputs.index(r.input_views), vals.index(r.val_views)] = getattr(r, metric)
    return inputs, vals, table


@dataclass
class TrendReport:
    decreasing_columns: Dict[str, bool] = field(default_factory=dict)
    diagonal_rows: int = 0

    @property
    def passed(self) -> bool:
        return all(self.decreasing_columns.values()) and self.diagonal_rows >= 3


def table_trends(rows: Sequence[MetricsRow], metrics: Sequence[str] = ("depth_l2", "albedo_l1")) -> TrendReport:
    """Check that errors fall from 4-view to 16-view input in every column and sit lowest near the diagonal."""
    report = TrendReport()
    for metric in metrics:
        inputs, vals, table = grid_table(rows, metric)
        if "4" in inputs and "16" in inputs:
            for j, val in enumerate(vals):
                report.decreasing_columns[f"{metric}:{val}"] = bool(
                    table[inputs.index("16"), j] < table[inputs.index("4"), j]
                )
    inputs, vals, table = grid_table(rows, "albedo_l1")
    report.diagonal_rows = sum(
        1 for i, label in enumerate(inputs) if label in vals and table[i, vals.index(label)] <= np.nanmean(table[i])
    )
    return report


# ---------------------------------------------------------------------------
# Consistency and geometry
# ---------------------------------------------------------------------------


def consistency_score(
    model: ReconModel,
    rgb: np.ndarray,
    normal: np.ndarray,
    poses: PoseSet,
    n_samples: int = 64,
    gt_scene: Optional[SceneSpec] = None,
) -> float:
    """Mean re-rendering RGB error of a field reconstructed from the views themselves (lower is better).

    With ``gt_scene`` the re-rendered views are compared against renders of the
    ground-truth scene at the same poses instead of against the inputs.

    Raises:
        Desk3DValidationError: If fewer than two views are given
    """
    if len(poses) < 2 or rgb.shape[0] < 2:
        raise Desk3DValidationError(f"Consistency needs at least 2 views, got {rgb.shape[0]}")
    inputs = ReconInputs(np.asarray(rgb, np.float32), np.asarray(normal, np.float32), poses.features())
    rendered = reconstruct_views(model, inputs, poses, n_samples)
    if gt_scene is None:
        targets = list(rgb)
    else:
        targets = [render_channels(gt_scene, pose, model.config.resolution).rgb for pose in poses]
    errors = sorted(float(np.mean(np.abs(view.rgb - image))) for view, image in zip(rendered, targets))
    return float(np.mean(errors))


def sample_surface(mesh: TriMesh, count: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform points on a triangle mesh."""
    if mesh.is_empty:
        return np.zeros((0, 3))
    areas = mesh.areas()
    faces = rng.choice(len(areas), size=count, p=areas / areas.sum())
    r1, r2 = rng.random(count), rng.random(count)
    s = np.sqrt(r1)
    a, b, c = (mesh.vertices[mesh.triangles[faces, i]] for i in range(3))
    return np.asarray((1 - s)[:, None] * a + (s * (1 - r2))[:, None] * b + (s * r2)[:, None] * c)


def hausdorff(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Symmetric Hausdorff distance between two point sets; infinite when either is empty."""
    if len(points_a) == 0 or len(points_b) == 0:
        return math.inf
    forward = cKDTree(points_b).query(points_a)[0].max()
    backward = cKDTree(points_a).query(points_b)[0].max()
    return float(max(forward, backward))


def hausdorff_to_sdf(
    mesh: TriMesh, source: Union[SdfFn, SdfSource], grid_n: int = 64, samples: int = 20000, seed: int = 0
) -> float:
    """Hausdorff distance from a mesh to the zero set of a reference SDF, by dense surface sampling."""
    rng = np.random.default_rng(seed)
    reference = marching_cubes(source, grid_n)
    return hausdorff(sample_surface(mesh, samples, rng), sample_surface(reference, samples, rng))


def monotone_nonincreasing(values: Sequence[float], slack: float = 0.02, max_inversions: int = 1) -> bool:
    """True when each step does not rise, allowing ``max_inversions`` rises of at most ``slack`` (relative)."""
    inversions = 0
    for before, after in zip(values, values[1:]):
        if after > before:
            if after > before * (1.0 + slack):
                return False
            inversions += 1
    return inversions <= max_inversions


# ---------------------------------------------------------------------------
# Scaling sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepPoint:
    sweep: str
    value: int
    checkpoint: Path

    @property
    def key(self) -> str:
        return f"{self.sweep}:{self.value}:{self.checkpoint.name}"


def sweep_csv(sweep: str, results: Mapping[int, float]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for value in sorted(results):
        writer.writerow([sweep, value, f"{results[value]:.6f}"])
    return buffer.getvalue()


@dataclass
class ScalingReport:
    results: Dict[str, Dict[int, float]]
    csv_paths: List[Path]
    plot_path: Path


def scaling_report(
    points: Sequence[SweepPoint],
    dataset: RenderedDataset,
    out_dir: Union[str, Path],
    n_input_views: int = 8,
    n_samples: int = 64,
    use_cache: bool = True,
) -> ScalingReport:
    """Validation loss for every sweep checkpoint, one CSV per sweep plus a line plot.

    Results are cached in ``scaling_cache.json``; cached values re-emit the
    same CSV bytes.

    Raises:
        Desk3DValidationError: If ``points`` is empty (nothing is written)
        Desk3DCheckpointError: Listing every missing checkpoint (nothing is written)
    """
    if not points:
        raise Desk3DValidationError("Scaling report needs at least one sweep point")
    missing = sorted(p.checkpoint.name for p in points if not p.checkpoint.is_file())
    if missing:
        raise Desk3DCheckpointError(f"Missing sweep checkpoints: {', '.join(missing)}")
    out_dir = Path(out_dir)
    cache_path = out_dir / "scaling_cache.json"
    cache: Dict[str, float] = {}
    if use_cache and cache_path.is_file():
        cache = {k: float(v) for k, v in json.loads(cache_path.read_text(encoding="utf-8")).items()}
    results: Dict[str, Dict[int, float]] = {}
    for point in points:
        if point.key not in cache:
            model = ReconModel.load(point.checkpoint)
            cache[point.key] = validation_loss(model, dataset, n_input_views, n_samples)
            logger.info("Sweep %s=%d validation loss %.5f", point.sweep, point.value, cache[point.key])
        results.setdefault(point.sweep, {})[point.value] = cache[point.key]
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_path.write_text(json.dumps(cache, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    csv_paths = []
    for sweep in sorted(results):
        path = out_dir / f"sweep_{sweep}.csv"
        path.write_text(sweep_csv(sweep, results[sweep]), encoding="utf-8")
        csv_paths.append(path)
    plot_path = out_dir / "scaling.png"
    _plot_sweeps(results, plot_path)
    return ScalingReport(results, csv_paths, plot_path)


def _plot_sweeps(results: Mapping[str, Mapping[int, float]], path: Path) -> None:
    fig = Figure(figsize=(4 * len(results), 3))
    axes = fig.subplots(1, len(results), squeeze=False)
    for ax, sweep in zip(axes[0], sorted(results)):
        values = sorted(results[sweep])
        ax.plot(values, [results[sweep][v] for v in values], marker="o")
        ax.set_xlabel(sweep)
        ax.set_ylabel("validation loss")
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})


# ---------------------------------------------------------------------------
# Ablation driver
# ---------------------------------------------------------------------------


@dataclass
class AblationSettings:
    """Budgets of the ablation run."""

    recon_steps: int = 3000
    mvdiff_steps: int = 2000
    seed: int = 0
    n_input_views: int = 8
    view_sweep: Tuple[int, ...] = (4, 6, 8, 10)
    triplane_sweep: Tuple[int, ...] = (8, 16, 24)
    consistency_views: int = 10
    consistency_prompts: int = 5
    recon: ReconConfig = field(default_factory=ReconConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)


def mvdiff_view_study(
    train: RenderedDataset,
    val: RenderedDataset,
    recon: ReconModel,
    settings: AblationSettings,
) -> Dict[str, float]:
    """Consistency of denoisers trained mostly on 4 versus mostly on 8 views, sampled at ``consistency_views``."""
    sampling = {"mostly-4": {4: 0.8, 8: 0.2}, "mostly-8": {4: 0.2, 8: 0.8}}
    poses = pose_ring(settings.consistency_views, image_size=settings.denoiser.resolution)
    prompts = [a.prompt for a in sorted(val.assets, key=lambda a: a.asset_id)[: settings.consistency_prompts]]
    scores = {}
    for name, views in sampling.items():
        model = MultiViewDenoiser(settings.denoiser, settings.seed)
        train_mvdiff(model, train, views, settings.mvdiff_steps, seed=settings.seed)
        per_prompt = []
        for i, prompt in enumerate(prompts):
            embedding = prompt_embedding(parse_prompt(prompt))
            rgb = sample(model, poses, embedding, seed=settings.seed + i)
            normal = np.zeros_like(rgb)
            per_prompt.append(consistency_score(recon, rgb, normal, poses))
        scores[name] = float(np.mean(per_prompt))
        logger.info("mvdiff %s consistency %.5f", name, scores[name])
    return scores


def run_ablation(
    train: RenderedDataset, val: RenderedDataset, out_dir: Union[str, Path], settings: AblationSettings
) -> Dict[str, object]:
    """Train sweep models, then emit the pose-set grid, scaling sweeps and the mvdiff view study.

    Writes ``pose_grid.csv``, ``sweep_views.csv``, ``sweep_triplane.csv``,
    ``scaling.png``, ``mvdiff_views.json`` and the sweep checkpoints under
    ``out_dir``.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    points: List[SweepPoint] = []
    main_model: Optional[ReconModel] = None
    for views in settings.view_sweep:
        model = ReconModel(settings.recon, settings.seed)
        train_recon(model, train, views, settings.recon_steps, seed=settings.seed)
        path = ckpt_dir / f"recon_views{views}.ckpt"
        model.save(path)
        points.append(SweepPoint("views", views, path))
        if views == settings.n_input_views:
            main_model = model
    for res in settings.triplane_sweep:
        config = ReconConfig(**{**asdict(settings.recon), "triplane_res": res})
        model = ReconModel(config, settings.seed)
        train_recon(model, train, settings.n_input_views, settings.recon_steps, seed=settings.seed)
        path = ckpt_dir / f"recon_triplane{res}.ckpt"
        model.save(path)
        points.append(SweepPoint("triplane", res, path))
    if main_model is None:
        main_model = ReconModel(settings.recon, settings.seed)
        train_recon(main_model, train, settings.n_input_views, settings.recon_steps, seed=settings.seed)
    rows = eval_grid(recon_predictor(main_model), val)
    write_metrics_csv(rows, out_dir / "pose_grid.csv")
    trends = table_trends(rows)
    report = scaling_report(points, val, out_dir, settings.n_input_views)
    study = mvdiff_view_study(train, val, main_model, settings)
    (out_dir / "mvdiff_views.json").write_text(json.dumps(study, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    triplane = report.results.get("triplane", {})
    summary: Dict[str, object] = {
        "pose_grid_trends_passed": trends.passed,
        "pose_grid_columns": trends.decreasing_columns,
        "diagonal_rows": trends.diagonal_rows,
        "sweeps": {k: {str(v): loss for v, loss in r.items()} for k, r in report.results.items()},
        "triplane_monotone": monotone_nonincreasing([triplane[v] for v in sorted(triplane)]) if triplane else None,
        "mvdiff_views": study,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary

