"""Independent oracles shared by the unit tests and the acceptance suite."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from oncedet.autodiff import Tape, Tensor, backward
from oncedet.codec import BoxAnnotation, Detection
from oncedet.metrics import iou


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    return [p.grad.copy() for p in params]


def numeric_grad(fn: Callable[[], Tensor], p: Tensor, index, h: float = 1e-3) -> float:
    """Central difference of the scalar ``fn()`` w.r.t. ``p.data[index]``."""
    old = p.data[index]
    p.data[index] = old + h
    up = fn().item()
    p.data[index] = old - h
    down = fn().item()
    p.data[index] = old
    return (up - down) / (2 * h)


def max_rel_error(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3,
                  max_entries: int | None = None, rng: np.random.Generator | None = None,
                  floor: float = 1e-6) -> float:
    """Largest element-wise |analytic - numeric| / |analytic| over entries with |analytic| > floor.

    With ``max_entries`` set, that many entries per parameter are sampled.
    """
    grads = analytic_grads(fn, params)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = list(np.ndindex(p.shape))
        if max_entries is not None and len(flat) > max_entries:
            rng = rng or np.random.default_rng(0)
            big = [ix for ix in flat if abs(g[ix]) > floor]
            pick = rng.choice(len(big), size=min(max_entries, len(big)), replace=False)
            flat = [big[i] for i in pick]
        for ix in flat:
            a = g[ix]
            if abs(a) <= floor:
                continue
            n = numeric_grad(fn, p, ix, h)
            worst = max(worst, abs(a - n) / abs(a))
    return worst


def brute_peaks(hm, thr):
    h, w = hm.shape
    found = []
    for y in range(h):
        for x in range(w):
            v = hm[y, x]
            if v < thr:
                continue
            ok = True
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = y + dy, x + dx
                    if (dy or dx) and 0 <= yy < h and 0 <= xx < w and hm[yy, xx] > v:
                        ok = False
            if ok:
                found.append((x, y, float(v)))
    # stable sort keeps raster order among equal scores
    return sorted(found, key=lambda p: -p[2])


def oracle_ap_ar(dets, gts, thr, max_dets=10):
    """Independent reimplementation for a single class.

    Matching: detections in (score desc, index asc) order each take the
    unused GT of highest IoU >= thr on their image (lowest index on ties).
    AP: sum over recall steps of the max precision at any later rank.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1].score, i))
    n_gt = len(gts)

    def match(indices):
        used = set()
        flags = []
        for i in indices:
            img, d = dets[i]
            cands = [(iou(d.as_list(), g.as_list()), -j) for j, (gimg, g) in enumerate(gts)
                     if gimg == img and j not in used]
            cands = [c for c in cands if c[0] >= thr]
            if cands:
                used.add(-max(cands)[1])
                flags.append(True)
            else:
                flags.append(False)
        return flags

    flags = match(order)
    ap = 0.0
    if n_gt:
        prec = [sum(flags[: k + 1]) / (k + 1) for k in range(len(flags))]
        rec = [sum(flags[: k + 1]) / n_gt for k in range(len(flags))]
        prev = 0.0
        for k in range(len(flags)):
            if rec[k] > prev:
                ap += (rec[k] - prev) * max(prec[k:])
                prev = rec[k]
    per_img = {}
    capped = []
    for i in order:
        per_img[dets[i][0]] = per_img.get(dets[i][0], 0) + 1
        if per_img[dets[i][0]] <= max_dets:
            capped.append(i)
    ar = sum(match(capped)) / n_gt if n_gt else 0.0
    return ap, ar


# ---------------------------------------------------------------- hand-traced fixture
#
# Three images, classes 0 (base) and 1 (novel); every true positive is an exact box.
#   img0: GT A(0), GT B(1)
#   img1: GT C(0)
#   img2: GT D(0)
# Class 0 detections by score: 0.9 A (TP), 0.8 false positive in img1 (FP), 0.7 C (TP);
# D is never detected (miss).
#   cumulative TP 1,1,2; FP 0,1,1; recall 1/3,1/3,2/3; precision 1,1/2,2/3
#   envelope: p(1/3) = 1, p(2/3) = 2/3  ->  AP = 1/3*1 + 1/3*2/3 = 5/9 at every threshold
#   AR = 2/3 at every threshold
# Class 1: 0.6 B (TP) -> AP = AR = 1.


gt, det = BoxAnnotation, Detection
HAND_GTS = [(0, gt(0, 0, 0, 10, 10)), (0, gt(1, 20, 20, 30, 30)), (1, gt(0, 5, 5, 15, 15)),
            (2, gt(0, 40, 40, 50, 50))]
HAND_DETS = [(0, det(0, 0.9, 0, 0, 10, 10)), (1, det(0, 0.8, 30, 30, 40, 40)), (1, det(0, 0.7, 5, 5, 15, 15)),
             (0, det(1, 0.6, 20, 20, 30, 30))]
