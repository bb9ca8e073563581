"""Box <-> heatmap encoding for centre-point detection.

Targets live on a grid ``stride`` times coarser than the input image. Each
object contributes a Gaussian splat (peak exactly 1.0 at its centre cell) to
its class map, plus size and sub-cell offset regression targets at that cell.
Decoding reads the same maps back at heatmap peaks.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class BoxAnnotation:
    class_id: int
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def centre(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    x1: float
    y1: float
    x2: float
    y2: float

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def to_json(self, image_id) -> dict:
        return {"image_id": image_id, "class_id": int(self.class_id), "score": float(self.score),
                "bbox": [float(v) for v in self.as_list()]}


DETECTION_SCHEMA = {
    "type": "object",
    "required": ["image_id", "class_id", "score", "bbox"],
    "properties": {
        "image_id": {"type": ["integer", "string"]},
        "class_id": {"type": "integer", "minimum": 0},
        "score": {"type": "number", "minimum": 0, "maximum": 1},
        "bbox": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
    },
    "additionalProperties": False,
}


@dataclass
class TargetMaps:
    """Regression targets for one image.

    ``centre`` is (K, H, W); ``size`` and ``offset`` are (2, H, W) with
    channel 0 = x/width and 1 = y/height; ``valid_mask`` is (1, H, W).
    ``owner`` is (H, W) holding the class index supervised at each valid cell
    (-1 elsewhere), so per-class size heads can be masked.
    """

    centre: np.ndarray
    size: np.ndarray
    offset: np.ndarray
    valid_mask: np.ndarray
    owner: np.ndarray


def gaussian_sigma(width: float, height: float, stride: int) -> float:
    return max(1.0, min(width, height) / (6.0 * stride))


def splat_gaussian(heatmap: np.ndarray, cx: int, cy: int, sigma: float) -> None:
    """Max-composite a unit-peak Gaussian centred on cell (cx, cy) into ``heatmap`` in place."""
    h, w = heatmap.shape
    radius = int(math.ceil(3 * sigma))
    x0, x1 = max(0, cx - radius), min(w, cx + radius + 1)
    y0, y1 = max(0, cy - radius), min(h, cy + radius + 1)
    if x0 >= x1 or y0 >= y1:
        return
    ys = np.arange(y0, y1)[:, None] - cy
    xs = np.arange(x0, x1)[None, :] - cx
    g = np.exp(-(xs * xs + ys * ys) / (2 * sigma * sigma))
    np.maximum(heatmap[y0:y1, x0:x1], g, out=heatmap[y0:y1, x0:x1])


def render_targets(boxes: Iterable[BoxAnnotation], image_shape: Sequence[int], stride: int,
                   num_classes: int) -> TargetMaps:
    """Encode boxes as centre/size/offset maps on the stride-``stride`` grid.

    ``class_id`` of each box is used directly as the class-map index, so
    callers remap ids into ``range(num_classes)`` first. Boxes whose centre
    falls outside the image contribute nothing.
    """
    h, w = int(image_shape[0]), int(image_shape[1])
    if stride < 1 or h % stride or w % stride:
        raise ValueError(f"stride {stride} must divide image shape {h}x{w}")
    gh, gw = h // stride, w // stride
    centre = np.zeros((num_classes, gh, gw))
    size = np.zeros((2, gh, gw))
    offset = np.zeros((2, gh, gw))
    valid = np.zeros((1, gh, gw))
    owner = np.full((gh, gw), -1, dtype=np.int64)
    for box in boxes:
        if not 0 <= box.class_id < num_classes:
            raise ValueError(f"class_id {box.class_id} outside [0, {num_classes})")
        if not (box.x2 > box.x1 and box.y2 > box.y1):
            raise ValueError(f"degenerate box {box}")
        cx, cy = box.centre
        if not (0 <= cx < w and 0 <= cy < h):
            continue
        gx, gy = cx / stride, cy / stride
        ix, iy = int(math.floor(gx)), int(math.floor(gy))
        splat_gaussian(centre[box.class_id], ix, iy, gaussian_sigma(box.width, box.height, stride))
        offset[:, iy, ix] = (gx - ix, gy - iy)
        size[:, iy, ix] = (box.width, box.height)
        valid[0, iy, ix] = 1.0
        owner[iy, ix] = box.class_id
    return TargetMaps(centre, size, offset, valid, owner)


def find_peaks(heatmap: np.ndarray, score_threshold: float, max_peaks: int) -> list[tuple[int, int, float]]:
    """Cells >= every existing 8-neighbour and >= ``score_threshold``.

    Returns ``(x, y, score)`` sorted by score descending (ties by raster
    order), truncated to ``max_peaks``. Plateaus yield several peaks.
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    if hm.ndim != 2:
        raise ValueError(f"find_peaks expects a 2-D map, got shape {hm.shape}")
    padded = np.pad(hm, 1, constant_values=-np.inf)
    h, w = hm.shape
    is_peak = hm >= score_threshold
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            is_peak &= hm >= padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
    ys, xs = np.nonzero(is_peak)
    scores = hm[ys, xs]
    order = np.lexsort((np.arange(len(scores)), -scores))[:max_peaks]
    return [(int(xs[i]), int(ys[i]), float(scores[i])) for i in order]


def decode_boxes(peaks: Iterable[tuple[int, int, float]], offset_map: np.ndarray, size_map: np.ndarray,
                 stride: int, class_id: int, diagnostics: Optional[Counter] = None) -> list[Detection]:
    """Turn peaks into boxes in input-image pixels.

    Centre is ``(x + dx, y + dy) * stride``; width/height are read from
    ``size_map`` in pixels. Negative sizes are clamped to zero and counted in
    ``diagnostics["negative_size"]``.
    """
    gh, gw = offset_map.shape[1:]
    out = []
    for x, y, s in peaks:
        if not (0 <= x < gw and 0 <= y < gh):
            raise ValueError(f"peak ({x}, {y}) outside {gw}x{gh} map")
        dx, dy = float(offset_map[0, y, x]), float(offset_map[1, y, x])
        bw, bh = float(size_map[0, y, x]), float(size_map[1, y, x])
        if bw < 0 or bh < 0:
            if diagnostics is not None:
                diagnostics["negative_size"] += 1
            bw, bh = max(bw, 0.0), max(bh, 0.0)
        cx, cy = (x + dx) * stride, (y + dy) * stride
        out.append(Detection(class_id, float(s), cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2))
    return out
