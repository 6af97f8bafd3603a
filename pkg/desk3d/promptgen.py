"""Prompt grammar, procedural SDF scenes, quality filters and the dataset manifest.

Grammar (case-insensitive, whitespace separated)::

    prompt := NP (PREP NP)?
    NP     := ARTICLE? SIZE? MATERIAL? COLOR? SHAPE

Scenes are built in a canonical frame: up is +z, the front faces -y, and the
composite is recentered on its bounding box and scaled to unit bounding radius.
"""

import csv
import logging
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import Desk3DDatasetError, Desk3DPromptError, Desk3DValidationError

logger = logging.getLogger(__name__)

Vec3 = Tuple[float, float, float]


class Shape(Enum):
    """Shapes of the prompt vocabulary."""

    SPHERE = "sphere"
    CUBE = "cube"
    CYLINDER = "cylinder"
    TORUS = "torus"
    CAPSULE = "capsule"


class Color(Enum):
    RED = "red"
    GREEN = "green"
    BLUE = "blue"
    YELLOW = "yellow"
    ORANGE = "orange"
    PURPLE = "purple"
    WHITE = "white"
    GRAY = "gray"


class Size(Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


class Material(Enum):
    MATTE = "matte"
    GLOSSY = "glossy"
    METAL = "metal"


class Preposition(Enum):
    ON = "on"
    BESIDE = "beside"


class PrimitiveKind(Enum):
    """Signed-distance primitives; a cube is a box with equal half extents."""

    SPHERE = "sphere"
    BOX = "box"
    CYLINDER = "cylinder"
    TORUS = "torus"
    CAPSULE = "capsule"


ARTICLES = ("a", "an", "the")

ALBEDOS: Dict[Color, Vec3] = {
    Color.RED: (0.8, 0.1, 0.1),
    Color.GREEN: (0.1, 0.7, 0.2),
    Color.BLUE: (0.1, 0.2, 0.8),
    Color.YELLOW: (0.9, 0.8, 0.1),
    Color.ORANGE: (0.9, 0.5, 0.1),
    Color.PURPLE: (0.5, 0.2, 0.7),
    Color.WHITE: (0.9, 0.9, 0.9),
    Color.GRAY: (0.5, 0.5, 0.5),
}

SIZE_SCALES: Dict[Size, float] = {Size.SMALL: 0.5, Size.MEDIUM: 0.75, Size.LARGE: 1.0}

MATERIAL_VALUES: Dict[Material, Tuple[float, float]] = {
    Material.MATTE: (0.9, 0.0),
    Material.GLOSSY: (0.3, 0.0),
    Material.METAL: (0.4, 1.0),
}

EMBEDDING_DIM = 41
MIN_THICKNESS = 0.02
FILTER_GRID = 64
REST_SAMPLES = 401


@dataclass(frozen=True)
class PromptSpec:
    """Parsed prompt; ``relation`` holds ``(preposition, second object)`` with nesting depth at most 1."""

    shape: Shape
    color: Color = Color.GRAY
    size: Size = Size.MEDIUM
    material: Material = Material.MATTE
    relation: Optional[Tuple[Preposition, "PromptSpec"]] = None

    def __post_init__(self) -> None:
        if self.relation is not None and self.relation[1].relation is not None:
            raise Desk3DValidationError("Prompt relations may not be nested more than one level")


@dataclass(frozen=True)
class Primitive:
    """Axis-aligned SDF primitive with PBR attributes.

    ``params`` per kind: sphere ``(r,)``, box ``(hx, hy, hz)``, cylinder ``(r, h)``,
    torus ``(R, r)``, capsule ``(r, h)``; cylinders, tori and capsules are aligned with +z.
    """

    kind: PrimitiveKind
    center: Vec3
    params: Tuple[float, ...]
    albedo: Vec3 = (0.5, 0.5, 0.5)
    roughness: float = 0.9
    metallic: float = 0.0

    def sdf(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3) - np.asarray(self.center)
        if self.kind is PrimitiveKind.SPHERE:
            return np.linalg.norm(p, axis=1) - self.params[0]
        if self.kind is PrimitiveKind.BOX:
            q = np.abs(p) - np.asarray(self.params)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            return outside + np.minimum(q.max(axis=1), 0.0)
        radial = np.linalg.norm(p[:, :2], axis=1)
        if self.kind is PrimitiveKind.CYLINDER:
            r, h = self.params
            d = np.stack([radial - r, np.abs(p[:, 2]) - h], axis=1)
            return np.minimum(d.max(axis=1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=1)
        if self.kind is PrimitiveKind.TORUS:
            major, minor = self.params
            return np.hypot(radial - major, p[:, 2]) - minor
        r, h = self.params
        axis_point = np.clip(p[:, 2], -h, h)
        return np.hypot(radial, p[:, 2] - axis_point) - r

    def extents(self) -> Vec3:
        """Half extents of the primitive's bounding box."""
        a = self.params
        if self.kind is PrimitiveKind.SPHERE:
            return (a[0], a[0], a[0])
        if self.kind is PrimitiveKind.BOX:
            return (a[0], a[1], a[2])
        if self.kind is PrimitiveKind.CYLINDER:
            return (a[0], a[0], a[1])
        if self.kind is PrimitiveKind.TORUS:
            return (a[0] + a[1], a[0] + a[1], a[1])
        return (a[0], a[0], a[0] + a[1])

    def column_height(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Top of the solid above ``(x, y)`` in primitive space, ``-inf`` outside the footprint.

        Every primitive is symmetric in z, so the bottom of the column is the negation.
        """
        a = self.params
        rho = np.hypot(x, y)
        if self.kind is PrimitiveKind.SPHERE:
            inside, height = rho <= a[0], np.sqrt(np.clip(a[0] ** 2 - rho**2, 0.0, None))
        elif self.kind is PrimitiveKind.BOX:
            inside, height = (np.abs(x) <= a[0]) & (np.abs(y) <= a[1]), np.full_like(rho, a[2])
        elif self.kind is PrimitiveKind.CYLINDER:
            inside, height = rho <= a[0], np.full_like(rho, a[1])
        elif self.kind is PrimitiveKind.TORUS:
            ring = rho - a[0]
            inside, height = np.abs(ring) <= a[1], np.sqrt(np.clip(a[1] ** 2 - ring**2, 0.0, None))
        else:
            inside, height = rho <= a[0], a[1] + np.sqrt(np.clip(a[0] ** 2 - rho**2, 0.0, None))
        return np.where(inside, height, -np.inf)

    def circumradius(self) -> float:
        """Radius of the smallest origin-centered ball (in primitive space) that contains it."""
        a = self.params
        if self.kind is PrimitiveKind.SPHERE:
            return a[0]
        if self.kind is PrimitiveKind.BOX:
            return float(np.linalg.norm(a))
        if self.kind is PrimitiveKind.CYLINDER:
            return float(np.hypot(a[0], a[1]))
        if self.kind is PrimitiveKind.TORUS:
            return a[0] + a[1]
        return a[0] + a[1]

    def transformed(self, offset: Sequence[float], scale: float) -> "Primitive":
        cx, cy, cz = ((c + o) * scale for c, o in zip(self.center, offset))
        center: Vec3 = (float(cx), float(cy), float(cz))
        return replace(self, center=center, params=tuple(float(v * scale) for v in self.params))


@dataclass(frozen=True)
class SceneSpec:
    """Union of primitives; attributes of a point come from the nearest primitive."""

    primitives: Tuple[Primitive, ...]
    prompt: str = ""

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lows = [np.asarray(p.center) - np.asarray(p.extents()) for p in self.primitives]
        highs = [np.asarray(p.center) + np.asarray(p.extents()) for p in self.primitives]
        return np.min(lows, axis=0), np.max(highs, axis=0)

    def bounding_radius(self) -> float:
        return max(float(np.linalg.norm(p.center)) + p.circumradius() for p in self.primitives)

    def primitive_distances(self, points: np.ndarray) -> np.ndarray:
        """Per-primitive SDF values, shape ``[len(primitives), N]``."""
        return np.stack([p.sdf(points) for p in self.primitives])

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(self.primitive_distances(points).min(axis=0))

    def attributes(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(albedo [N,3], roughness [N], metallic [N])`` of the nearest primitive."""
        nearest = np.argmin(self.primitive_distances(points), axis=0)
        albedo = np.array([p.albedo for p in self.primitives], dtype=np.float64)[nearest]
        roughness = np.array([p.roughness for p in self.primitives], dtype=np.float64)[nearest]
        metallic = np.array([p.metallic for p in self.primitives], dtype=np.float64)[nearest]
        return albedo, roughness, metallic


@dataclass(frozen=True)
class QualityVerdict:
    accepted: bool
    reason: str = ""
    thickness: float = 0.0


@dataclass
class ManifestRecord:
    """One dataset asset: prompt, realization seed, filter verdict and caption."""

    asset_id: int
    prompt: str
    seed: int
    accepted: bool
    reason: str = ""
    caption: str = ""
    long_caption: str = ""


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"\S+")


def _tokenize(text: str) -> List[Tuple[str, int]]:
    tokens = []
    for match in _TOKEN.finditer(text):
        position = len(text[: match.start()].encode("utf-8"))
        tokens.append((match.group(0).lower(), position))
    return tokens


def _lookup(enum_type: type, token: str) -> Optional[Enum]:
    for member in enum_type:  # type: ignore[attr-defined]
        if member.value == token:
            return member  # type: ignore[no-any-return]
    return None


def _syntax_error(token: str, position: int, expected: str) -> Desk3DPromptError:
    return Desk3DPromptError(f"Unexpected token {token!r} at byte {position}: expected {expected}", token, position)


def parse_prompt(text: str) -> PromptSpec:
    """Parse prompt text into a :class:`PromptSpec`.

    Raises:
        Desk3DPromptError: With the offending token and its byte position
    """
    tokens = _tokenize(text)
    end_position = len(text.encode("utf-8"))
    cursor = 0

    def peek() -> Tuple[str, int]:
        return tokens[cursor] if cursor < len(tokens) else ("", end_position)

    def noun_phrase() -> PromptSpec:
        nonlocal cursor
        if peek()[0] in ARTICLES:
            cursor += 1
        parsed: Dict[str, Enum] = {}
        for key, enum_type in (("size", Size), ("material", Material), ("color", Color)):
            member = _lookup(enum_type, peek()[0])
            if member is not None:
                parsed[key] = member
                cursor += 1
        token, position = peek()
        shape = _lookup(Shape, token)
        if shape is None:
            expected = "a shape" if token else "a shape before end of prompt"
            raise _syntax_error(token, position, expected)
        cursor += 1
        return PromptSpec(shape=shape, **parsed)  # type: ignore[arg-type]

    head = noun_phrase()
    if cursor == len(tokens):
        return head
    token, position = peek()
    preposition = _lookup(Preposition, token)
    if preposition is None:
        raise _syntax_error(token, position, "'on' or 'beside'")
    cursor += 1
    tail = noun_phrase()
    if cursor != len(tokens):
        token, position = peek()
        raise _syntax_error(token, position, "end of prompt")
    return replace(head, relation=(preposition, tail))


def _phrase(spec: PromptSpec) -> str:
    return f"{spec.size.value} {spec.material.value} {spec.color.value} {spec.shape.value}"


def unparse(spec: PromptSpec) -> str:
    """Canonical prompt text; ``parse_prompt(unparse(s)) == s``."""
    text = f"a {_phrase(spec)}"
    if spec.relation is not None:
        text += f" {spec.relation[0].value} a {_phrase(spec.relation[1])}"
    return text


def caption(spec: PromptSpec, long: bool = False) -> str:
    """Template caption: short is ``<color> <shape>``, long lists size and material too."""

    def one(s: PromptSpec) -> str:
        return _phrase(s) if long else f"{s.color.value} {s.shape.value}"

    text = one(spec)
    if spec.relation is not None:
        text += f" {spec.relation[0].value} {one(spec.relation[1])}"
    return text


def _one_hot(enum_type: type, member: Optional[Enum]) -> List[float]:
    return [1.0 if member is m else 0.0 for m in enum_type]  # type: ignore[attr-defined]


def prompt_embedding(spec: Optional[PromptSpec]) -> np.ndarray:
    """One-hot conditioning vector of length 41 (zeros for no prompt).

    Layout: first object (shape 5, color 8, size 3, material 3), relation
    (none, on, beside), second object (19, zeros when absent).
    """
    if spec is None:
        return np.zeros(EMBEDDING_DIM, dtype=np.float32)

    def block(s: Optional[PromptSpec]) -> List[float]:
        if s is None:
            return [0.0] * 19
        head = _one_hot(Shape, s.shape) + _one_hot(Color, s.color)
        return head + _one_hot(Size, s.size) + _one_hot(Material, s.material)

    relation = [1.0, 0.0, 0.0]
    second = None
    if spec.relation is not None:
        relation = [0.0] + _one_hot(Preposition, spec.relation[0])
        second = spec.relation[1]
    return np.array(block(spec) + relation + block(second), dtype=np.float32)


# ---------------------------------------------------------------------------
# Scene realization
# ---------------------------------------------------------------------------


def _primitive(spec: PromptSpec) -> Primitive:
    s = SIZE_SCALES[spec.size]
    roughness, metallic = MATERIAL_VALUES[spec.material]
    albedo = ALBEDOS[spec.color]
    geometry = {
        Shape.SPHERE: (PrimitiveKind.SPHERE, (1.0,)),
        Shape.CUBE: (PrimitiveKind.BOX, (0.8, 0.8, 0.8)),
        Shape.CYLINDER: (PrimitiveKind.CYLINDER, (0.7, 0.7)),
        Shape.TORUS: (PrimitiveKind.TORUS, (0.7, 0.25)),
        Shape.CAPSULE: (PrimitiveKind.CAPSULE, (0.45, 0.55)),
    }
    kind, params = geometry[spec.shape]
    return Primitive(kind, (0.0, 0.0, 0.0), tuple(v * s for v in params), albedo, roughness, metallic)


def canonicalize(scene: SceneSpec, tol: float = 1e-9) -> SceneSpec:
    """Recenter on the bounding-box center and scale to unit bounding radius (idempotent)."""
    lo, hi = scene.bounds
    center = 0.5 * (lo + hi)
    if np.all(np.abs(center) < tol) and abs(scene.bounding_radius() - 1.0) < tol:
        return scene
    shifted = [p.transformed(-center, 1.0) for p in scene.primitives]
    radius = SceneSpec(tuple(shifted)).bounding_radius()
    return SceneSpec(tuple(p.transformed((0.0, 0.0, 0.0), 1.0 / radius) for p in shifted), scene.prompt)


def _resting_offset(top: Primitive, base: Primitive, samples: int = REST_SAMPLES) -> Tuple[float, float]:
    """Drop ``top`` onto ``base`` along -z and return its ``(y, z)`` center at first contact.

    Both primitives start centered on the z axis. When the top fits through the
    hole of a torus it is moved back along +y over the ring instead.
    """
    reach = max(max(top.extents()[:2]), max(base.extents()[:2]))
    axis = np.linspace(-reach, reach, samples)
    x, y = np.meshgrid(axis, axis)
    shift = 0.0
    stacked = top.column_height(x, y) + base.column_height(x, y)
    if not np.isfinite(stacked).any():
        shift = base.params[0]
        stacked = top.column_height(x, y - shift) + base.column_height(x, y)
    return shift, float(stacked.max())


def realize_scene(spec: PromptSpec, seed: int = 0) -> SceneSpec:
    """Build the canonical SDF scene for a prompt; deterministic in ``(spec, seed)``.

    "A on B" rests A on top of B along +z with touching surfaces; "A beside B"
    places A along +x of B with a seeded gap.
    """
    rng = np.random.default_rng(seed)
    first = _primitive(spec)
    primitives = [first]
    if spec.relation is not None:
        preposition, other = spec.relation
        base = _primitive(other)
        if preposition is Preposition.ON:
            y, z = _resting_offset(first, base)
            first = replace(first, center=(0.0, y, z))
        else:
            gap = float(rng.uniform(0.05, 0.2))
            x = base.extents()[0] + gap + first.extents()[0]
            first = replace(first, center=(x, 0.0, 0.0))
        primitives = [first, base]
    return canonicalize(SceneSpec(tuple(primitives), unparse(spec)))


def quality_filter(scene: SceneSpec, grid_n: int = FILTER_GRID, min_thickness: float = MIN_THICKNESS) -> QualityVerdict:
    """Reject thin primitives and textureless multi-primitive scenes.

    Thickness of a primitive is the largest interior distance (``max(-sdf)``)
    found on a ``grid_n``-cubed grid over the scene bounds.
    """
    lo, hi = scene.bounds
    axes = [np.linspace(lo[i], hi[i], grid_n) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    thickness = float(np.min(np.max(-scene.primitive_distances(grid), axis=1)))
    if thickness < min_thickness:
        return QualityVerdict(False, "thin", thickness)
    albedos = np.array([p.albedo for p in scene.primitives])
    if len(scene.primitives) > 1 and float(albedos.var(axis=0).sum()) == 0.0:
        return QualityVerdict(False, "textureless", thickness)
    return QualityVerdict(True, "", thickness)


# ---------------------------------------------------------------------------
# Corpus generation and manifest I/O
# ---------------------------------------------------------------------------


def generate_prompts(count: int, seed: int = 0, relation_rate: float = 0.3) -> List[str]:
    """Deterministic random canonical prompts."""
    rng = np.random.default_rng(seed)

    def pick(enum_type: type) -> Enum:
        members = list(enum_type)  # type: ignore[call-overload]
        return members[int(rng.integers(len(members)))]  # type: ignore[no-any-return]

    def random_spec() -> PromptSpec:
        return PromptSpec(pick(Shape), pick(Color), pick(Size), pick(Material))  # type: ignore[arg-type]

    prompts = []
    for _ in range(count):
        spec = random_spec()
        if rng.random() < relation_rate:
            spec = replace(spec, relation=(pick(Preposition), random_spec()))
        prompts.append(unparse(spec))
    return prompts


def build_manifest(prompts: Sequence[str], seed: int = 0) -> List[ManifestRecord]:
    """Parse, realize and filter each prompt into a manifest record."""
    rng = np.random.default_rng(seed)
    records = []
    for asset_id, text in enumerate(prompts):
        spec = parse_prompt(text)
        asset_seed = int(rng.integers(2**31 - 1))
        verdict = quality_filter(realize_scene(spec, asset_seed))
        if not verdict.accepted:
            logger.warning("Asset %d (%s) rejected: %s", asset_id, text, verdict.reason)
        records.append(
            ManifestRecord(
                asset_id,
                unparse(spec),
                asset_seed,
                verdict.accepted,
                verdict.reason,
                caption(spec),
                caption(spec, long=True),
            )
        )
    return records


MANIFEST_FIELDS = ["asset_id", "prompt", "seed", "accepted", "reason", "caption", "long_caption"]


def write_manifest(records: Sequence[ManifestRecord], path: Union[str, Path]) -> None:
    """Write the manifest as tab-separated values with a header row."""
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, delimiter="\t", lineterminator="\n")
            writer.writerow(MANIFEST_FIELDS)
            for r in records:
                writer.writerow([r.asset_id, r.prompt, r.seed, int(r.accepted), r.reason, r.caption, r.long_caption])
    except OSError as err:
        raise Desk3DDatasetError(f"Cannot write manifest {path}: {err}") from err


def read_manifest(path: Union[str, Path]) -> List[ManifestRecord]:
    try:
        with open(path, encoding="utf-8", newline="") as handle:
            rows = list(csv.DictReader(handle, delimiter="\t"))
    except OSError as err:
        raise Desk3DDatasetError(f"Cannot read manifest {path}: {err}") from err
    try:
        return [
            ManifestRecord(
                int(row["asset_id"]), row["prompt"], int(row["seed"]), row["accepted"] == "1",
                row["reason"] or "", row["caption"] or "", row.get("long_caption") or "",
            )
            for row in rows
        ]
    except (KeyError, ValueError) as err:
        raise Desk3DDatasetError(f"Malformed manifest {path}: {err}") from err


def scene_for_record(record: ManifestRecord) -> SceneSpec:
    return realize_scene(parse_prompt(record.prompt), record.seed)


@dataclass
class PromptStats:
    """Counts of a manifest by verdict, for logging."""

    accepted: int = 0
    rejected: Dict[str, int] = field(default_factory=dict)

    @classmethod
    def of(cls, records: Sequence[ManifestRecord]) -> "PromptStats":
        stats = cls()
        for r in records:
            if r.accepted:
                stats.accepted += 1
            else:
                stats.rejected[r.reason] = stats.rejected.get(r.reason, 0) + 1
        return stats
