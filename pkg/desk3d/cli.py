"""Command-line entry point (``desk3d``).

Every subcommand reads the same ``key=value`` config file (``--config``) and
accepts ``--set key=value`` overrides on top of it.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from .bench import AblationSettings, run_ablation
from .config import PipelineConfig, load_config, load_layout
from .exceptions import Desk3DError, Desk3DValidationError
from .mvdiff import DenoiserConfig, MultiViewDenoiser, train_mvdiff, train_normal_controlnet
from .pipeline import compose_scene, load_reference, run_image_to_3d, run_text_to_3d
from .promptgen import PromptStats, build_manifest, generate_prompts
from .reconstruct import ReconConfig, ReconModel, train_recon
from .render import PosePolicy, RenderedDataset, render_dataset

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
LOG_LEVEL_ENV = "DESK3D_LOG_LEVEL"


def _overrides(pairs: Sequence[str]) -> Dict[str, str]:
    values = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise Desk3DValidationError(f"--set expects key=value, got {pair!r}")
        values[key.strip()] = value.strip()
    return values


def _denoiser_config(config: PipelineConfig) -> DenoiserConfig:
    return DenoiserConfig(resolution=config.resolution)


def _recon_config(config: PipelineConfig) -> ReconConfig:
    return ReconConfig(resolution=config.resolution, triplane_res=config.triplane_res)


def _cmd_dataset(args: argparse.Namespace, config: PipelineConfig) -> int:
    count = args.count if args.count is not None else config.dataset_size
    out_dir = Path(args.out or config.dataset_dir)
    records = build_manifest(generate_prompts(count, config.dataset_seed), config.dataset_seed)
    stats = PromptStats.of(records)
    logger.info("Accepted %d of %d prompts; rejected %s", stats.accepted, len(records), stats.rejected or "none")
    policy = PosePolicy(random_views=args.random_views)
    written = render_dataset(records, out_dir, policy, config.resolution, config.dataset_seed)
    print(f"{stats.accepted} assets, {len(written)} views -> {out_dir}")
    return 0


def _cmd_train_mvdiff(args: argparse.Namespace, config: PipelineConfig) -> int:
    dataset = RenderedDataset.load(args.data or config.dataset_dir)
    model = MultiViewDenoiser(_denoiser_config(config), config.train_seed)
    train_mvdiff(model, dataset, steps=config.mvdiff_steps, seed=config.train_seed)
    model.save(config.mvdiff_checkpoint)
    print(config.mvdiff_checkpoint)
    return 0


def _cmd_train_normal(args: argparse.Namespace, config: PipelineConfig) -> int:
    dataset = RenderedDataset.load(args.data or config.dataset_dir)
    model = MultiViewDenoiser(_denoiser_config(config), config.train_seed + 1)
    train_mvdiff(model, dataset, steps=config.normal_steps, seed=config.train_seed, channel="normal")
    train_normal_controlnet(model, dataset, steps=config.normal_steps, seed=config.train_seed)
    model.save(config.normal_checkpoint)
    print(config.normal_checkpoint)
    return 0


def _cmd_train_recon(args: argparse.Namespace, config: PipelineConfig) -> int:
    dataset = RenderedDataset.load(args.data or config.dataset_dir)
    model = ReconModel(_recon_config(config), config.train_seed)
    metrics = Path(config.runs_dir) / "recon_metrics.csv"
    train_recon(model, dataset, config.recon_views, config.recon_steps, seed=config.train_seed, metrics_csv=metrics)
    model.save(config.recon_checkpoint)
    print(config.recon_checkpoint)
    return 0


def _cmd_text23d(args: argparse.Namespace, config: PipelineConfig) -> int:
    result = run_text_to_3d(args.prompt, config)
    print(result.export.obj)
    return 0


def _cmd_img23d(args: argparse.Namespace, config: PipelineConfig) -> int:
    result = run_image_to_3d(load_reference(args.image), config, prompt=args.prompt)
    print(result.export.obj)
    return 0


def _cmd_ablate(args: argparse.Namespace, config: PipelineConfig) -> int:
    train = RenderedDataset.load(args.train or config.dataset_dir)
    val = RenderedDataset.load(args.val)
    settings = AblationSettings(
        recon_steps=config.recon_steps,
        mvdiff_steps=config.mvdiff_steps,
        seed=config.train_seed,
        n_input_views=config.recon_views,
        recon=_recon_config(config),
        denoiser=_denoiser_config(config),
    )
    out_dir = Path(args.out or Path(config.runs_dir) / "ablation")
    summary = run_ablation(train, val, out_dir, settings)
    print(f"pose grid trends passed: {summary['pose_grid_trends_passed']} -> {out_dir}")
    return 0


def _cmd_compose(args: argparse.Namespace, config: PipelineConfig) -> int:
    result = compose_scene(load_layout(args.layout), config)
    for index, reason in sorted(result.failures.items()):
        print(f"entry {index} failed: {reason}", file=sys.stderr)
    print(result.obj_path)
    return 0


Command = Callable[[argparse.Namespace, PipelineConfig], int]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="desk3d", description="Text and image to textured 3D assets at desk scale")
    parser.add_argument("--config", type=Path, help="key=value config file")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override one config value"
    )
    parser.add_argument(
        "--log-level",
        default=os.environ.get(LOG_LEVEL_ENV, "INFO"),
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help=f"logging level (default: ${LOG_LEVEL_ENV} or INFO)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    dataset = sub.add_parser("dataset", help="generate prompts and render the procedural dataset")
    dataset.add_argument("--count", type=int, help="number of prompts (default: dataset_size)")
    dataset.add_argument("--out", help="output directory (default: dataset_dir)")
    dataset.add_argument("--random-views", type=int, default=0, help="random cameras per asset beyond the ring")
    dataset.set_defaults(handler=_cmd_dataset)

    for name, handler, text in (
        ("train-mvdiff", _cmd_train_mvdiff, "train the multi-view RGB denoiser"),
        ("train-normal", _cmd_train_normal, "train a normal-image denoiser, then its RGB control branch"),
        ("train-recon", _cmd_train_recon, "train the triplane reconstruction model"),
    ):
        command = sub.add_parser(name, help=text)
        command.add_argument("--data", help="rendered dataset directory (default: dataset_dir)")
        command.set_defaults(handler=handler)

    text23d = sub.add_parser("text23d", help="generate an asset from a prompt")
    text23d.add_argument("prompt")
    text23d.set_defaults(handler=_cmd_text23d)

    img23d = sub.add_parser("img23d", help="generate an asset from a masked reference image seen from ring pose 0")
    img23d.add_argument("image", type=Path)
    img23d.add_argument("--prompt", help="optional prompt conditioning")
    img23d.set_defaults(handler=_cmd_img23d)

    ablate = sub.add_parser("ablate", help="run the pose-set grid, scaling sweeps and view study")
    ablate.add_argument("--train", help="training dataset (default: dataset_dir)")
    ablate.add_argument("--val", required=True, help="held-out dataset")
    ablate.add_argument("--out", help="output directory (default: <runs_dir>/ablation)")
    ablate.set_defaults(handler=_cmd_ablate)

    compose = sub.add_parser("compose", help="generate and merge every entry of a layout file")
    compose.add_argument("layout", type=Path)
    compose.set_defaults(handler=_cmd_compose)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI; returns the process exit code (1 on a desk3d error)."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        config = load_config(args.config, _overrides(args.overrides))
        handler: Command = args.handler
        return handler(args, config)
    except Desk3DError as err:
        logger.error("%s failed: %s", args.command, err)
        return 1


if __name__ == "__main__":
    sys.exit(main())
