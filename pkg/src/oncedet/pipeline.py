"""Glue shared by the CLI and the benchmark: data, evaluation, support sampling."""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .codec import BoxAnnotation, Detection
from .metrics import MetricsReport, compute_metrics
from .model import (
    DTYPE,
    Architecture,
    ClassCode,
    CodeGenerator,
    FeatureExtractor,
    SharedCodes,
    SupportSet,
    detect_from_features,
)
from .synth import DEFAULT_ROSTER, DataSplit, Scene, make_split
from .training import DataConfig, FeatureCache, TrainConfig

EVAL_THRESHOLD = 0.05
EVAL_MAX_PER_CLASS = 20


def build_split(cfg: TrainConfig, only: Optional[Sequence[str]] = None) -> DataSplit:
    """Scenes for ``cfg``; with ``only`` set, the other splits are left empty (saves rendering time)."""
    d: DataConfig = cfg.data
    counts = d.counts()
    if only is not None:
        counts = {k: (v if k in only else 0) for k, v in counts.items()}
    return make_split(DEFAULT_ROSTER, d.n_base, d.n_novel, counts, seed=cfg.seed)


# ---------------------------------------------------------------- checkpoints


def architecture_from_dict(raw: Mapping) -> Architecture:
    raw = dict(raw)
    raw["enc_channels"] = tuple(raw["enc_channels"])
    return Architecture(**raw)


def save_module(path, module, kind: str, extra: Optional[dict] = None) -> None:
    ad.save_tensors(path, module.state_dict(), {"kind": kind, "arch": asdict(module.arch), **(extra or {})})


def load_extractor(path) -> FeatureExtractor:
    tensors, meta = ad.load_tensors(path)
    if meta.get("kind") != "extractor":
        raise ValueError(f"{path} is not an extractor checkpoint (kind={meta.get('kind')!r})")
    ext = FeatureExtractor(architecture_from_dict(meta["arch"]), np.random.default_rng(0))
    ext.load_state_dict(tensors)
    ext.freeze()
    return ext


def load_generator(path) -> CodeGenerator:
    tensors, meta = ad.load_tensors(path)
    if meta.get("kind") != "generator":
        raise ValueError(f"{path} is not a generator checkpoint (kind={meta.get('kind')!r})")
    gen = CodeGenerator(architecture_from_dict(meta["arch"]), np.random.default_rng(0))
    gen.load_state_dict(tensors)
    return gen


def save_codes(path, codes: Mapping[int, ClassCode], shared: SharedCodes, names: Mapping[int, str]) -> None:
    tensors = {f"code.{c}": code.vectors for c, code in sorted(codes.items())}
    tensors["shared"] = shared.vectors
    ad.save_tensors(path, tensors, {"kind": "codes", "names": {str(c): n for c, n in names.items()}})


def load_codes(path) -> tuple[dict[int, ClassCode], SharedCodes, dict[int, str]]:
    tensors, meta = ad.load_tensors(path)
    if meta.get("kind") != "codes":
        raise ValueError(f"{path} is not a code checkpoint (kind={meta.get('kind')!r})")
    codes = {int(k.split(".", 1)[1]): ClassCode(v) for k, v in tensors.items() if k.startswith("code.")}
    names = {int(k): v for k, v in meta.get("names", {}).items()}
    return dict(sorted(codes.items())), SharedCodes(tensors["shared"]), names


class EvalSet:
    """Scenes plus their frozen-extractor features, so repeated evaluation skips the backbone."""

    def __init__(self, extractor: FeatureExtractor, scenes: Sequence[Scene]):
        self.scenes = list(scenes)
        self.stride = extractor.stride
        self.features = FeatureCache(extractor, self.scenes).features

    def ground_truths(self, class_ids) -> list[tuple[int, BoxAnnotation]]:
        keep = set(class_ids)
        return [(i, b) for i, s in enumerate(self.scenes) for b in s.annotations if b.class_id in keep]

    def detections(self, codes: Mapping[int, ClassCode], shared: SharedCodes,
                   score_threshold: float = EVAL_THRESHOLD,
                   max_per_class: int = EVAL_MAX_PER_CLASS) -> list[tuple[int, Detection]]:
        out = []
        for i in range(len(self.scenes)):
            for d in detect_from_features(self.features[i : i + 1], codes, shared, self.stride,
                                          score_threshold, max_per_class):
                out.append((i, d))
        return out

    def evaluate(self, codes: Mapping[int, ClassCode], shared: SharedCodes, group_map: Mapping[int, str],
                 score_threshold: float = EVAL_THRESHOLD) -> MetricsReport:
        """Metrics over the classes in ``group_map``; ground truth of other classes is ignored."""
        dets = [(i, d) for i, d in self.detections({c: codes[c] for c in group_map if c in codes}, shared,
                                                   score_threshold) if d.class_id in group_map]
        return compute_metrics(dets, self.ground_truths(group_map), group_map)


def sample_support(scenes: Sequence[Scene], class_id: int, k_shot: int, rng: np.random.Generator) -> SupportSet:
    """``k_shot`` boxes of ``class_id`` drawn without replacement from ``scenes``."""
    refs = [(si, bi) for si, s in enumerate(scenes) for bi, b in enumerate(s.annotations) if b.class_id == class_id]
    if len(refs) < k_shot:
        raise ValueError(f"only {len(refs)} boxes of class {class_id} available, need {k_shot}")
    picks = sorted(rng.choice(len(refs), size=k_shot, replace=False))
    grouped: dict[int, list[BoxAnnotation]] = {}
    for p in picks:
        si, bi = refs[p]
        grouped.setdefault(si, []).append(scenes[si].annotations[bi])
    return SupportSet(class_id, [(scenes[si].image, boxes) for si, boxes in sorted(grouped.items())])


def random_code(rng: np.random.Generator, reference: Sequence[ClassCode]) -> ClassCode:
    """Control code: Gaussian entries matching the per-row scale of ``reference`` codes."""
    stack = np.stack([c.vectors for c in reference])
    mu = stack.mean(axis=(0, 2), keepdims=True)[0]
    sd = stack.std(axis=(0, 2), keepdims=True)[0]
    return ClassCode((mu + sd * rng.standard_normal(stack.shape[1:])).astype(DTYPE))
