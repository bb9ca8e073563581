"""Deterministic synthetic shape scenes with exact boxes.

Scenes are a pure function of (roster, seed): shapes are rasterised at 4x
resolution with PIL and box-filtered down, which gives anti-aliased edges
and boxes tight to a quarter pixel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .codec import BoxAnnotation

IMAGE_SIZE = 64
SUPERSAMPLE = 4
MAX_OBJECTS = 4
MAX_IOU = 0.3
PLACEMENT_RETRIES = 30

SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond", "star", "hexagon", "crescent")

PALETTE = {
    "red": (0.85, 0.18, 0.16),
    "green": (0.16, 0.72, 0.24),
    "blue": (0.18, 0.32, 0.90),
    "yellow": (0.92, 0.84, 0.16),
    "magenta": (0.80, 0.22, 0.78),
    "cyan": (0.14, 0.78, 0.84),
}


@dataclass(frozen=True)
class ShapeClass:
    id: int
    shape: str
    color: str
    size_range: tuple[int, int] = (12, 24)

    @property
    def name(self) -> str:
        return f"{self.color}-{self.shape}"

    @property
    def rgb(self) -> tuple[float, float, float]:
        return PALETTE[self.color]


# six base classes with distinct colours; the three novel shapes reuse base colours
DEFAULT_ROSTER: tuple[ShapeClass, ...] = (
    ShapeClass(0, "circle", "red"),
    ShapeClass(1, "square", "green"),
    ShapeClass(2, "triangle", "blue"),
    ShapeClass(3, "cross", "yellow"),
    ShapeClass(4, "ring", "magenta"),
    ShapeClass(5, "diamond", "cyan"),
    ShapeClass(6, "star", "red"),
    ShapeClass(7, "hexagon", "yellow"),
    ShapeClass(8, "crescent", "blue"),
)


def validate_roster(roster: Sequence[ShapeClass]) -> None:
    if not roster:
        raise ValueError("empty class roster")
    ids = [c.id for c in roster]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate class ids in roster: {ids}")
    pairs = [(c.shape, c.color) for c in roster]
    if len(set(pairs)) != len(pairs):
        raise ValueError("(shape, colour) pairs must be unique across the roster")
    for c in roster:
        if c.shape not in SHAPES:
            raise ValueError(f"unknown shape {c.shape!r}")
        if c.color not in PALETTE:
            raise ValueError(f"unknown colour {c.color!r}")


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    annotations: list[BoxAnnotation]
    seed: int

    def chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.image.transpose(2, 0, 1))


# ---------------------------------------------------------------- geometry


def _regular(n: int, radius: float, angle: float, cx: float, cy: float, phase: float = 0.0):
    return [(cx + radius * math.cos(angle + phase + 2 * math.pi * k / n),
             cy + radius * math.sin(angle + phase + 2 * math.pi * k / n)) for k in range(n)]


def _rotate(points, angle: float, cx: float, cy: float):
    ca, sa = math.cos(angle), math.sin(angle)
    return [(cx + x * ca - y * sa, cy + x * sa + y * ca) for x, y in points]


def shape_mask(shape: str, cx: float, cy: float, diameter: float, angle: float,
               image_size: int = IMAGE_SIZE, ss: int = SUPERSAMPLE) -> np.ndarray:
    """Boolean supersampled coverage mask, shape ``(image_size*ss, image_size*ss)``."""
    n = image_size * ss
    canvas = Image.new("L", (n, n), 0)
    draw = ImageDraw.Draw(canvas)
    # pixel centres sit at +0.5 in image coordinates; PIL samples integer lattice points
    X, Y, R = cx * ss - 0.5, cy * ss - 0.5, diameter * ss / 2

    def disc(x, y, r, fill):
        draw.ellipse((x - r, y - r, x + r, y + r), fill=fill)

    if shape == "circle":
        disc(X, Y, R, 255)
    elif shape == "ring":
        disc(X, Y, R, 255)
        disc(X, Y, 0.55 * R, 0)
    elif shape == "crescent":
        disc(X, Y, R, 255)
        disc(X + 0.55 * R * math.cos(angle), Y + 0.55 * R * math.sin(angle), 0.85 * R, 0)
    elif shape == "square":
        draw.polygon(_regular(4, R, angle, X, Y, math.pi / 4), fill=255)
    elif shape == "triangle":
        draw.polygon(_regular(3, R, angle, X, Y, -math.pi / 2), fill=255)
    elif shape == "hexagon":
        draw.polygon(_regular(6, R, angle, X, Y), fill=255)
    elif shape == "diamond":
        pts = [(R, 0), (0, 0.6 * R), (-R, 0), (0, -0.6 * R)]
        draw.polygon(_rotate(pts, angle, X, Y), fill=255)
    elif shape == "star":
        pts = []
        for k in range(10):
            r = R if k % 2 == 0 else 0.45 * R
            a = angle - math.pi / 2 + math.pi * k / 5
            pts.append((X + r * math.cos(a), Y + r * math.sin(a)))
        draw.polygon(pts, fill=255)
    elif shape == "cross":
        a, b = R, 0.32 * R
        pts = [(b, -a), (b, -b), (a, -b), (a, b), (b, b), (b, a),
               (-b, a), (-b, b), (-a, b), (-a, -b), (-b, -b), (-b, -a)]
        draw.polygon(_rotate(pts, angle, X, Y), fill=255)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return np.asarray(canvas) > 0


def mask_box(mask: np.ndarray, ss: int = SUPERSAMPLE) -> Optional[tuple[float, float, float, float]]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return float(cols[0] / ss), float(rows[0] / ss), float((cols[-1] + 1) / ss), float((rows[-1] + 1) / ss)


def coverage(mask: np.ndarray, ss: int = SUPERSAMPLE) -> np.ndarray:
    n = mask.shape[0] // ss
    return mask.reshape(n, ss, n, ss).mean(axis=(1, 3))


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------- scenes


def _value_noise(rng: np.random.Generator, cells: int, size: int) -> np.ndarray:
    lattice = rng.random((cells + 1, cells + 1))
    return ndimage.zoom(lattice, size / (cells + 1), order=3, mode="nearest")[:size, :size]


def render_background(rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """Low-amplitude multi-octave value noise over a random linear gradient."""
    base = rng.uniform(0.35, 0.6)
    tint = rng.uniform(-0.05, 0.05, size=3)
    theta = rng.uniform(0, 2 * math.pi)
    amp = rng.uniform(0.05, 0.15)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    gradient = amp * (np.cos(theta) * xx + np.sin(theta) * yy)
    noise = 0.10 * (_value_noise(rng, 4, size) - 0.5) + 0.06 * (_value_noise(rng, 12, size) - 0.5)
    img = base + gradient[..., None] + noise[..., None] + tint
    return np.clip(img, 0.0, 1.0)


def generate_scene(roster: Sequence[ShapeClass], rng: np.random.Generator, seed: int = -1,
                   image_size: int = IMAGE_SIZE) -> Scene:
    """Render 1-4 non-overlapping shapes drawn uniformly from ``roster``.

    Objects that cannot be placed after a bounded number of retries are
    dropped, so a scene always has at least one valid object but may have
    fewer than requested.
    """
    if not roster:
        raise ValueError("empty class roster")
    image = render_background(rng, image_size)
    target = int(rng.integers(1, MAX_OBJECTS + 1))
    placed_boxes: list[tuple] = []
    occupied = np.zeros((image_size * SUPERSAMPLE,) * 2, dtype=bool)
    annotations: list[BoxAnnotation] = []
    for _ in range(target):
        cls = roster[int(rng.integers(len(roster)))]
        for _attempt in range(PLACEMENT_RETRIES):
            diameter = rng.uniform(*cls.size_range)
            r = diameter / 2
            cx = rng.uniform(r + 1, image_size - r - 1)
            cy = rng.uniform(r + 1, image_size - r - 1)
            angle = rng.uniform(0, 2 * math.pi)
            mask = shape_mask(cls.shape, cx, cy, diameter, angle, image_size)
            box = mask_box(mask)
            if box is None or (mask & occupied).any():
                continue
            if any(box_iou(box, other) >= MAX_IOU for other in placed_boxes):
                continue
            break
        else:
            continue
        occupied |= mask
        placed_boxes.append(box)
        alpha = coverage(mask)[..., None]
        colour = np.clip(np.array(cls.rgb) + rng.normal(0, 0.04, size=3), 0, 1)
        image = image * (1 - alpha) + colour * alpha
        annotations.append(BoxAnnotation(cls.id, *box))
    if not annotations:
        # only reachable with absurd size ranges; fall back to a centred object
        cls = roster[0]
        d = min(cls.size_range[0], image_size - 4)
        mask = shape_mask(cls.shape, image_size / 2, image_size / 2, d, 0.0, image_size)
        alpha = coverage(mask)[..., None]
        image = image * (1 - alpha) + np.array(cls.rgb) * alpha
        annotations.append(BoxAnnotation(cls.id, *mask_box(mask)))
    return Scene(image.astype(np.float32), annotations, seed)


def scene_from_seed(roster: Sequence[ShapeClass], seed: int) -> Scene:
    return generate_scene(roster, np.random.default_rng(seed), seed=seed)


def blank_scene(seed: int) -> Scene:
    rng = np.random.default_rng(seed)
    return Scene(render_background(rng).astype(np.float32), [], seed)


# ---------------------------------------------------------------- splits

SPLIT_NAMES = ("base_train", "base_val", "base_test", "novel_support_pool", "novel_test")
DEFAULT_COUNTS = {"base_train": 1500, "base_val": 150, "base_test": 200, "novel_support_pool": 150,
                  "novel_test": 200}


def split_seed(seed: int, split: str, index: int) -> int:
    # disjoint integer ranges per (seed, split); index < 1e6
    return seed * 10_000_000 + SPLIT_NAMES.index(split) * 1_000_000 + index


@dataclass
class DataSplit:
    base_ids: list[int]
    novel_ids: list[int]
    scenes: dict[str, list[Scene]] = field(default_factory=dict)
    class_names: dict[int, str] = field(default_factory=dict)

    def __getitem__(self, key: str) -> list[Scene]:
        return self.scenes[key]


def make_split(roster: Sequence[ShapeClass] = DEFAULT_ROSTER, n_base: int = 6, n_novel: int = 3,
               counts: Optional[dict[str, int]] = None, seed: int = 0) -> DataSplit:
    """Class-disjoint base/novel scene splits.

    The first ``n_base`` roster entries are base classes, the next
    ``n_novel`` novel. Base splits only contain base classes; the novel
    support pool and novel test scenes draw from base and novel classes.
    """
    validate_roster(roster)
    if n_base < 1 or n_novel < 0 or n_base + n_novel > len(roster):
        raise ValueError(f"cannot take {n_base} base + {n_novel} novel classes from a roster of {len(roster)}")
    wanted = dict(DEFAULT_COUNTS)
    if counts:
        unknown = set(counts) - set(SPLIT_NAMES)
        if unknown:
            raise ValueError(f"unknown split names {sorted(unknown)}")
        wanted.update(counts)
    base = list(roster[:n_base])
    novel = list(roster[n_base : n_base + n_novel])
    split = DataSplit([c.id for c in base], [c.id for c in novel],
                      class_names={c.id: c.name for c in base + novel})
    for name in SPLIT_NAMES:
        classes = base if name.startswith("base") else base + novel
        split.scenes[name] = [scene_from_seed(classes, split_seed(seed, name, i)) for i in range(wanted[name])]
    return split


def export_scenes(scenes: Sequence[Scene], directory) -> None:
    """Write ``<seed>.png`` and ``<seed>.json`` (Detection-schema records, score 1.0) per scene."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        Image.fromarray((scene.image * 255).round().astype(np.uint8)).save(directory / f"{scene.seed}.png")
        records = [{"image_id": scene.seed, "class_id": a.class_id, "score": 1.0, "bbox": a.as_list()}
                   for a in scene.annotations]
        (directory / f"{scene.seed}.json").write_text(json.dumps(records))
