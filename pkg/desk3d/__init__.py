"""Desk-scale text-to-3D and image-to-3D asset generation"""

from .config import LayoutEntry, LayoutSpec, PipelineConfig, load_config, load_layout, parse_layout
from .exceptions import (
    Desk3DCheckpointError,
    Desk3DDatasetError,
    Desk3DError,
    Desk3DGradientError,
    Desk3DMeshError,
    Desk3DNumericalError,
    Desk3DPromptError,
    Desk3DShapeError,
    Desk3DStageError,
    Desk3DValidationError,
)
from .meshops import AssetBundle, QuadMesh, TriMesh, export_obj
from .mvdiff import DenoiserConfig, MultiViewDenoiser
from .pipeline import compose_scene, run_image_to_3d, run_text_to_3d
from .promptgen import PromptSpec, parse_prompt, unparse
from .reconstruct import ReconConfig, ReconModel, TriplaneField

__all__ = [
    "PipelineConfig",
    "LayoutEntry",
    "LayoutSpec",
    "load_config",
    "load_layout",
    "parse_layout",
    "run_text_to_3d",
    "run_image_to_3d",
    "compose_scene",
    "PromptSpec",
    "parse_prompt",
    "unparse",
    "DenoiserConfig",
    "MultiViewDenoiser",
    "ReconConfig",
    "ReconModel",
    "TriplaneField",
    "AssetBundle",
    "QuadMesh",
    "TriMesh",
    "export_obj",
    "Desk3DError",
    "Desk3DValidationError",
    "Desk3DShapeError",
    "Desk3DPromptError",
    "Desk3DNumericalError",
    "Desk3DGradientError",
    "Desk3DCheckpointError",
    "Desk3DDatasetError",
    "Desk3DMeshError",
    "Desk3DStageError",
]

__version__ = "0.1.0"
