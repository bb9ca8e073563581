"""COCO-style AP / AR with base / novel / all class grouping."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Hashable, Mapping, Optional, Sequence

import numpy as np

from .codec import BoxAnnotation, Detection

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
GROUPS = ("novel", "base", "all")


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


@dataclass
class ClassMetrics:
    class_id: int
    group: str
    ap: float
    ap50: float
    ar10: float
    num_gt: int
    num_det: int


@dataclass
class GroupMetrics:
    ap: float
    ap50: float
    ar10: float
    num_classes: int
    num_gt: int
    num_det: int


@dataclass
class MetricsReport:
    groups: dict[str, GroupMetrics]
    per_class: dict[int, ClassMetrics] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"groups": {k: asdict(v) for k, v in self.groups.items()},
                "per_class": {str(k): asdict(v) for k, v in sorted(self.per_class.items())}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self, label: str = "ONCE") -> str:
        """Plain-text table with novel / base / all AP and AR columns (percent)."""
        head = f"{'Method':<14}|{'Novel AP':>9}{'AR':>7} |{'Base AP':>9}{'AR':>7} |{'All AP':>9}{'AR':>7}"
        cells = []
        for g in GROUPS:
            gm = self.groups[g]
            cells.append(f"{100 * gm.ap:>9.1f}{100 * gm.ar10:>7.1f}")
        row = f"{label:<14}|" + " |".join(cells)
        return "\n".join([head, "-" * len(head), row])


def _match(dets: list[tuple[Hashable, Detection]], gts: Mapping[Hashable, list[BoxAnnotation]], thr: float) -> np.ndarray:
    """Greedy matching in the given order; returns a TP flag per detection."""
    used = {img: np.zeros(len(boxes), dtype=bool) for img, boxes in gts.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for i, (img, d) in enumerate(dets):
        boxes = gts.get(img, [])
        best, best_j = thr, -1
        for j, g in enumerate(boxes):
            if used[img][j]:
                continue
            o = iou(d.as_list(), g.as_list())
            if o >= best and (best_j < 0 or o > best):
                best, best_j = o, j
        if best_j >= 0:
            used[img][best_j] = True
            tp[i] = True
    return tp


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """Area under the all-point interpolated precision/recall curve."""
    if num_gt == 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _sorted_dets(dets: list[tuple[int, Hashable, Detection]]) -> list[tuple[Hashable, Detection]]:
    # score descending, stable on original detection index
    dets = sorted(dets, key=lambda t: (-t[2].score, t[0]))
    return [(img, d) for _, img, d in dets]


def compute_metrics(detections: Sequence[tuple[Hashable, Detection]],
                    ground_truths: Sequence[tuple[Hashable, BoxAnnotation]],
                    group_map: Mapping[int, str],
                    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
                    max_dets: int = 10) -> MetricsReport:
    """Per-class AP (mean over IoU thresholds), AP50 and AR@``max_dets``.

    ``detections`` and ``ground_truths`` are ``(image_id, item)`` pairs.
    ``group_map`` assigns each class id to "base" or "novel"; classes with
    no ground truth are left out of the group means.
    """
    for cid, grp in group_map.items():
        if grp not in ("base", "novel"):
            raise ValueError(f"class {cid}: group must be 'base' or 'novel', got {grp!r}")
    by_class_gt: dict[int, dict[Hashable, list[BoxAnnotation]]] = {}
    for img, g in ground_truths:
        if g.class_id not in group_map:
            raise ValueError(f"ground-truth class {g.class_id} missing from group_map")
        by_class_gt.setdefault(g.class_id, {}).setdefault(img, []).append(g)
    by_class_det: dict[int, list[tuple[int, Hashable, Detection]]] = {}
    for i, (img, d) in enumerate(detections):
        if d.class_id not in group_map:
            raise ValueError(f"detection class {d.class_id} missing from group_map")
        by_class_det.setdefault(d.class_id, []).append((i, img, d))

    per_class: dict[int, ClassMetrics] = {}
    for cid in sorted(group_map):
        gts = by_class_gt.get(cid, {})
        num_gt = sum(len(v) for v in gts.values())
        raw = by_class_det.get(cid, [])
        if num_gt == 0:
            continue
        ordered = _sorted_dets(raw)
        # top-k per image for AR
        seen: dict[Hashable, int] = {}
        capped = []
        for img, d in ordered:
            seen[img] = seen.get(img, 0) + 1
            if seen[img] <= max_dets:
                capped.append((img, d))
        aps, recalls = [], []
        for thr in iou_thresholds:
            aps.append(average_precision(_match(ordered, gts, thr), num_gt))
            recalls.append(_match(capped, gts, thr).sum() / num_gt)
        ap50 = aps[list(iou_thresholds).index(0.5)] if 0.5 in iou_thresholds else float("nan")
        per_class[cid] = ClassMetrics(cid, group_map[cid], float(np.mean(aps)), float(ap50),
                                      float(np.mean(recalls)), num_gt, len(raw))

    groups = {}
    for grp in GROUPS:
        members = [m for m in per_class.values() if grp == "all" or m.group == grp]
        n_det = sum(len(by_class_det.get(c, [])) for c, g in group_map.items() if grp == "all" or g == grp)
        if members:
            groups[grp] = GroupMetrics(
                float(np.mean([m.ap for m in members])), float(np.mean([m.ap50 for m in members])),
                float(np.mean([m.ar10 for m in members])), len(members), sum(m.num_gt for m in members), n_det)
        else:
            groups[grp] = GroupMetrics(0.0, 0.0, 0.0, 0, 0, n_det)
    return MetricsReport(groups, per_class)


def precision_recall(detections: Sequence[tuple[Hashable, Detection]],
                     ground_truths: Sequence[tuple[Hashable, BoxAnnotation]], class_id: int,
                     iou_threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Raw (recall, precision) points of one class, one per ranked detection."""
    gts: dict[Hashable, list[BoxAnnotation]] = {}
    for img, g in ground_truths:
        if g.class_id == class_id:
            gts.setdefault(img, []).append(g)
    num_gt = sum(len(v) for v in gts.values())
    ranked = _sorted_dets([(i, img, d) for i, (img, d) in enumerate(detections) if d.class_id == class_id])
    tp = _match(ranked, gts, iou_threshold)
    if num_gt == 0 or tp.size == 0:
        return np.zeros(0), np.zeros(0)
    ctp = np.cumsum(tp)
    return ctp / num_gt, ctp / np.arange(1, tp.size + 1)


# ---------------------------------------------------------------- forgetting curve


@dataclass
class Snapshot:
    num_enrolled: int
    report: MetricsReport
    enrolled: list[int] = field(default_factory=list)


def forgetting_series(snapshots: Sequence[Snapshot]) -> list[dict]:
    """Ordered points (number enrolled, all-class and base-class AP/AR) for plotting."""
    if not snapshots:
        raise ValueError("forgetting_series needs at least one snapshot")
    points = []
    for s in sorted(snapshots, key=lambda s: s.num_enrolled):
        g = s.report.groups
        points.append({"num_enrolled": s.num_enrolled, "all_ap": g["all"].ap, "all_ap50": g["all"].ap50,
                       "all_ar": g["all"].ar10, "base_ap": g["base"].ap, "base_ar": g["base"].ar10,
                       "novel_ap": g["novel"].ap})
    return points


class ForgettingError(AssertionError):
    pass


def forgetting_violations(snapshots: Sequence[Snapshot]) -> list[str]:
    """Every class measured in a snapshot must keep bit-identical metrics in all later snapshots."""
    problems = []
    first_seen: dict[int, tuple[int, ClassMetrics]] = {}
    for step, snap in enumerate(snapshots):
        for cid, m in snap.report.per_class.items():
            if cid not in first_seen:
                first_seen[cid] = (step, m)
                continue
            origin, ref = first_seen[cid]
            for key in ("ap", "ap50", "ar10", "num_det"):
                if getattr(m, key) != getattr(ref, key):
                    problems.append(f"class {cid}: {key} changed from {getattr(ref, key)!r} at snapshot "
                                    f"{origin} to {getattr(m, key)!r} at snapshot {step}")
    return problems


def check_no_forgetting(snapshots: Sequence[Snapshot]) -> None:
    problems = forgetting_violations(snapshots)
    if problems:
        raise ForgettingError("; ".join(problems))
