"""Pipeline configuration and scene layouts.

Config files are plain ``key=value`` lines; ``#`` starts a comment and blank
lines are ignored. Keys are the field names of :class:`PipelineConfig`.

Layouts are either JSON::

    {"entries": [{"prompt": "a red sphere", "position": [0, 0, 0], "scale": 1.0, "yaw": 0.0}]}

or one entry per line, fields separated by semicolons::

    a red sphere; 0, 0, 0; 1.0; 0
    a small blue cube; 2.5, 0, 0; 0.5; 45
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .exceptions import Desk3DValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of a pipeline run; embedded verbatim in each run manifest."""

    resolution: int = 32
    sample_views: int = 8
    recon_views: int = 8
    triplane_res: int = 16
    texture_size: int = 256
    grid_n: int = 64
    n_samples: int = 128
    refine_scale: int = 2
    dataset_size: int = 200
    dataset_seed: int = 0
    train_seed: int = 0
    sample_seed: int = 0
    mvdiff_steps: int = 2000
    normal_steps: int = 2000
    recon_steps: int = 3000
    angle_tol: float = 30.0
    visibility_tol: float = 1e-2
    dilation: int = 2
    mvdiff_checkpoint: str = "checkpoints/mvdiff.ckpt"
    normal_checkpoint: str = "checkpoints/normal.ckpt"
    recon_checkpoint: str = "checkpoints/recon.ckpt"
    dataset_dir: str = "data/desk3d"
    runs_dir: str = "runs"

    def __post_init__(self) -> None:
        for name in ("resolution", "sample_views", "recon_views", "grid_n", "n_samples", "refine_scale"):
            if getattr(self, name) < 1:
                raise Desk3DValidationError(f"Config '{name}' must be >= 1, got {getattr(self, name)}")
        if self.texture_size < 1 or self.texture_size & (self.texture_size - 1):
            raise Desk3DValidationError(f"Config 'texture_size' must be a power of two, got {self.texture_size}")
        if self.triplane_res < 2 or self.triplane_res % 2:
            raise Desk3DValidationError(f"Config 'triplane_res' must be an even number >= 2, got {self.triplane_res}")
        if self.grid_n < 8:
            raise Desk3DValidationError(f"Config 'grid_n' must be >= 8, got {self.grid_n}")

    def to_text(self) -> str:
        """Canonical ``key=value`` serialization, one field per line in declaration order."""
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def with_overrides(self, overrides: Mapping[str, str]) -> "PipelineConfig":
        """Return a copy with string values coerced to each field's type.

        Raises:
            Desk3DValidationError: On an unknown key or a value of the wrong type
        """
        return replace(self, **_coerce_all(overrides))


def _format(value: Any) -> str:
    return repr(value) if isinstance(value, float) else str(value)


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _coerce(key: str, raw: str) -> Any:
    if key not in _FIELD_TYPES:
        raise Desk3DValidationError(f"Unknown config key '{key}'")
    kind = _FIELD_TYPES[key]
    name = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    value = raw.strip()
    try:
        if name == "int":
            return int(value)
        if name == "float":
            return float(value)
    except ValueError as err:
        raise Desk3DValidationError(f"Config '{key}' expects {name}, got {value!r}") from err
    return value


def _coerce_all(overrides: Mapping[str, str]) -> Dict[str, Any]:
    return {key: _coerce(key, value) for key, value in overrides.items()}


def parse_assignments(lines: Sequence[str], source: str = "<config>") -> Dict[str, str]:
    """Parse ``key=value`` lines; later assignments win.

    Raises:
        Desk3DValidationError: On a line without ``=``
    """
    values: Dict[str, str] = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise Desk3DValidationError(f"{source}:{number}: expected key=value, got {raw.strip()!r}")
        values[key.strip()] = value.strip()
    return values


def load_config(
    path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, str]] = None, text: Optional[str] = None
) -> PipelineConfig:
    """Build a config from defaults, then a file (or text), then overrides.

    Raises:
        Desk3DValidationError: If the file is unreadable, has an unknown key or a bad value
    """
    values: Dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as err:
            raise Desk3DValidationError(f"Cannot read config file {path}: {err}") from err
    if text is not None:
        values.update(parse_assignments(text.splitlines(), str(path or "<config>")))
    values.update(overrides or {})
    config = PipelineConfig().with_overrides(values)
    logger.debug("Loaded config with %d explicit values", len(values))
    return config


@dataclass(frozen=True)
class LayoutEntry:
    prompt: str
    position: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0
    yaw: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.prompt.strip():
            raise Desk3DValidationError("Layout entry has an empty prompt")
        if len(self.position) != 3:
            raise Desk3DValidationError(f"Layout position must have 3 values, got {self.position}")
        if not self.scale > 0:
            raise Desk3DValidationError(f"Layout scale must be positive, got {self.scale} for {self.prompt!r}")


@dataclass(frozen=True)
class LayoutSpec:
    entries: Tuple[LayoutEntry, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if not self.entries:
            raise Desk3DValidationError("Layout has no entries")


def _entry_from_json(item: Mapping[str, Any]) -> LayoutEntry:
    position = tuple(float(v) for v in item.get("position", (0.0, 0.0, 0.0)))
    seed = item.get("seed")
    return LayoutEntry(
        str(item["prompt"]),
        position,  # type: ignore[arg-type]
        float(item.get("scale", 1.0)),
        float(item.get("yaw", 0.0)),
        None if seed is None else int(seed),
    )


def _entry_from_line(line: str) -> LayoutEntry:
    parts = [p.strip() for p in line.split(";")]
    if not 1 <= len(parts) <= 5:
        raise ValueError(f"expected 'prompt; x, y, z; scale; yaw[; seed]', got {line!r}")
    position = tuple(float(v) for v in parts[1].split(",")) if len(parts) > 1 else (0.0, 0.0, 0.0)
    return LayoutEntry(
        parts[0],
        position,  # type: ignore[arg-type]
        float(parts[2]) if len(parts) > 2 else 1.0,
        float(parts[3]) if len(parts) > 3 else 0.0,
        int(parts[4]) if len(parts) > 4 else None,
    )


def parse_layout(text: str) -> LayoutSpec:
    """Parse a layout in JSON or line form.

    Raises:
        Desk3DValidationError: On malformed input, a non-positive scale or no entries
    """
    stripped = text.strip()
    entries: List[LayoutEntry] = []
    try:
        if stripped.startswith("{") or stripped.startswith("["):
            data = json.loads(stripped)
            items = data["entries"] if isinstance(data, dict) else data
            entries = [_entry_from_json(item) for item in items]
        else:
            for raw in text.splitlines():
                line = raw.split("#", 1)[0].strip()
                if line:
                    entries.append(_entry_from_line(line))
    except (ValueError, KeyError, TypeError) as err:
        raise Desk3DValidationError(f"Malformed layout: {err}") from err
    return LayoutSpec(tuple(entries))


def load_layout(path: Union[str, Path]) -> LayoutSpec:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise Desk3DValidationError(f"Cannot read layout file {path}: {err}") from err
    return parse_layout(text)
