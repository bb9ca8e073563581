"""Stage I (extractor + base codes) and Stage II (episodic code-generator) training."""

from __future__ import annotations

import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codec import BoxAnnotation, TargetMaps, render_targets
from .model import (DTYPE, Architecture, ClassCode, CodeGenerator, FeatureExtractor, SharedCodes, SupportSet,
                    locate, support_crops)
from .synth import Scene

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- configuration


@dataclass
class Stage1Config:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-3
    early_stop_patience: int = 5
    size_weight: float = 0.1
    offset_weight: float = 1.0
    centre_pos_weight: float = 100.0


@dataclass
class Stage2Config:
    episodes: int = 3000
    tasks_per_batch: int = 4
    n_way: int = 3
    k_shot: int = 5
    query_size: int = 4
    lr: float = 3e-4
    size_weight: float = 0.1
    centre_pos_weight: float = 100.0
    val_episodes: int = 24
    val_every: int = 100


@dataclass
class DataConfig:
    n_base: int = 6
    n_novel: int = 3
    base_train: int = 1500
    base_val: int = 150
    base_test: int = 200
    novel_support_pool: int = 150
    novel_test: int = 200

    def counts(self) -> dict[str, int]:
        return {k: getattr(self, k) for k in ("base_train", "base_val", "base_test", "novel_support_pool",
                                              "novel_test")}


@dataclass
class TrainConfig:
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def __post_init__(self):
        if self.stage2.n_way > self.data.n_base:
            raise ValueError(f"n_way={self.stage2.n_way} exceeds {self.data.n_base} base classes")
        if self.stage2.k_shot < 1:
            raise ValueError("k_shot must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        sections = {"stage1": Stage1Config, "stage2": Stage2Config, "data": DataConfig}
        unknown = set(raw) - set(sections) - {"seed"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, klass in sections.items():
            sub = raw.get(name, {})
            allowed = {f.name for f in fields(klass)}
            bad = set(sub) - allowed
            if bad:
                raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = klass(**sub)
        return cls(seed=int(raw.get("seed", 0)), **kwargs)


def load_config(path) -> TrainConfig:
    """Read a TOML or JSON config file."""
    path = Path(path)
    text = path.read_text()
    raw = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    return TrainConfig.from_dict(raw)


class MetricsLog:
    """CSV metrics writer (step, named loss components, wall time)."""

    def __init__(self, path=None, columns: Sequence[str] = ()):
        self.path = Path(path) if path else None
        self.columns = ["step", *columns, "wall_time"]
        self.rows: list[dict] = []
        self._t0 = time.perf_counter()
        if self.path:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.columns)

    def write(self, step: int, **values) -> None:
        row = {"step": step, **values, "wall_time": round(time.perf_counter() - self._t0, 3)}
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([row.get(c, "") for c in self.columns])


# ---------------------------------------------------------------- losses


def _stack_targets(targets: Sequence[TargetMaps]) -> dict[str, np.ndarray]:
    return {
        "centre": np.stack([t.centre for t in targets]).astype(DTYPE),
        "size": np.stack([t.size for t in targets]).astype(DTYPE),
        "offset": np.stack([t.offset for t in targets]).astype(DTYPE),
        "valid": np.stack([t.valid_mask for t in targets]).astype(DTYPE),
        "owner": np.stack([t.owner for t in targets]),
    }


def detection_loss(m: Tensor, codes: Sequence[Tensor], shared: Optional[Tensor], targets: dict[str, np.ndarray],
                   size_weight: float, offset_weight: float = 0.0,
                   centre_pos_weight: float = 0.0) -> tuple[Tensor, dict[str, float]]:
    """Masked L1 losses for a batch of feature maps.

    Centre heatmaps use every cell, each weighted ``1 + centre_pos_weight * Z``
    so the few cells under a Gaussian splat are not drowned out by background.
    Size (per class) and offset (shared) use only annotated centre cells.
    ``codes[k]`` predicts target class index k.
    """
    centre_terms, size_terms = [], []
    n_valid = float(targets["valid"].sum())
    for k, code in enumerate(codes):
        heat, size, offset = locate(m, code, shared)
        z = targets["centre"][:, k : k + 1]
        centre_terms.append(ad.l1_loss(heat, z, 1.0 + centre_pos_weight * z if centre_pos_weight else None))
        mask = (targets["owner"] == k)[:, None].astype(DTYPE)
        n_k = float(mask.sum())
        if n_k > 0:
            weight = np.broadcast_to(mask, size.shape)
            size_terms.append(ad.l1_loss(size, targets["size"], weight) * (n_k / n_valid))
    centre_loss = _sum(centre_terms) * (1.0 / len(codes))
    total = centre_loss
    parts = {"centre": centre_loss.item()}
    if size_terms:
        size_loss = _sum(size_terms)
        total = total + size_loss * size_weight
        parts["size"] = size_loss.item()
    else:
        parts["size"] = 0.0
    if offset_weight and n_valid > 0:
        offset = ad.conv2d(m, shared.reshape(2, m.shape[1], 1, 1))
        weight = np.broadcast_to(targets["valid"], offset.shape)
        off_loss = ad.l1_loss(offset, targets["offset"], weight)
        total = total + off_loss * offset_weight
        parts["offset"] = off_loss.item()
    parts["total"] = total.item()
    return total, parts


def _sum(terms: Sequence[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc


def _remap(boxes: Sequence[BoxAnnotation], index: dict[int, int]) -> list[BoxAnnotation]:
    return [BoxAnnotation(index[b.class_id], b.x1, b.y1, b.x2, b.y2) for b in boxes if b.class_id in index]


def _batch(scenes: Sequence[Scene]) -> np.ndarray:
    return np.stack([s.chw() for s in scenes]).astype(DTYPE)


# ---------------------------------------------------------------- stage I


@dataclass
class Stage1Result:
    extractor: FeatureExtractor
    base_codes: dict[int, ClassCode]
    shared: SharedCodes
    history: list[dict]
    best_epoch: int
    initial_val_loss: float
    best_val_loss: float


def _base_code_init(rng: np.random.Generator, c: int) -> np.ndarray:
    return rng.normal(0.0, 0.1, size=(3, c))


def _eval_loss(extractor, codes, shared, scenes, index, stride, cfg: Stage1Config) -> float:
    total, count = 0.0, 0
    for i in range(0, len(scenes), cfg.batch_size):
        chunk = scenes[i : i + cfg.batch_size]
        tgt = _stack_targets([render_targets(_remap(s.annotations, index), s.image.shape, stride, len(codes))
                              for s in chunk])
        _, parts = detection_loss(extractor(_batch(chunk)), codes, shared, tgt, cfg.size_weight, cfg.offset_weight,
                                  cfg.centre_pos_weight)
        total += parts["total"] * len(chunk)
        count += len(chunk)
    return total / max(count, 1)


def train_stage1(train: Sequence[Scene], val: Sequence[Scene], base_ids: Sequence[int], cfg: Stage1Config,
                 seed: int = 0, arch: Architecture = Architecture(), log_path=None,
                 on_epoch: Optional[Callable[[int, dict], None]] = None) -> Stage1Result:
    """Train the extractor, one code per base class and the shared offset codes.

    Early-stops on validation loss with ``cfg.early_stop_patience`` epochs of
    patience, restores the best epoch, then freezes everything.
    """
    if not train:
        raise ValueError("empty training set")
    base_ids = sorted(base_ids)
    index = {cid: k for k, cid in enumerate(base_ids)}
    for s in train:
        for b in s.annotations:
            if b.class_id not in index:
                raise ValueError(f"training scene {s.seed} contains non-base class {b.class_id}")
    init_rng, code_rng, order_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    extractor = FeatureExtractor(arch, init_rng)
    c = arch.code_channels
    codes = [Tensor(_base_code_init(code_rng, c).astype(DTYPE), requires_grad=True, name=f"code.{cid}")
             for cid in base_ids]
    shared = Tensor(code_rng.normal(0.0, 0.1, size=(2, c)).astype(DTYPE), requires_grad=True, name="shared")
    params = extractor.parameters() + codes + [shared]
    opt = ad.adam(cfg.lr)
    stride = arch.stride
    targets = [render_targets(_remap(s.annotations, index), s.image.shape, stride, len(base_ids)) for s in train]
    images = _batch(train)
    metrics = MetricsLog(log_path, ["epoch", "centre", "size", "offset", "total", "val_loss"])

    def snapshot():
        return extractor.state_dict(), [t.data.copy() for t in codes], shared.data.copy()

    val_loss = _eval_loss(extractor, codes, shared, val, index, stride, cfg) if val else float("nan")
    initial_val = best_val = val_loss
    best_state, best_epoch, stale = snapshot(), 0, 0
    history = [{"epoch": 0, "val_loss": val_loss}]
    metrics.write(0, epoch=0, val_loss=val_loss)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(train))
        sums: dict[str, float] = {}
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            tgt = _stack_targets([targets[j] for j in idx])
            with ad.Tape() as tape:
                loss, parts = detection_loss(extractor(images[idx]), codes, shared, tgt,
                                             cfg.size_weight, cfg.offset_weight, cfg.centre_pos_weight)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite stage-1 loss at epoch {epoch}: {parts}")
            ad.backward(loss, tape)
            ad.step(params, opt)
            step += 1
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
        train_parts = {k: v / len(train) for k, v in sums.items()}
        val_loss = _eval_loss(extractor, codes, shared, val, index, stride, cfg) if val else train_parts["total"]
        row = {"epoch": epoch, **train_parts, "val_loss": val_loss}
        history.append(row)
        metrics.write(step, **row)
        log.info("stage1 epoch %d: %s", epoch, row)
        if on_epoch:
            on_epoch(epoch, row)
        if val_loss < best_val:
            best_val, best_state, best_epoch, stale = val_loss, snapshot(), epoch, 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    ext_state, code_state, shared_state = best_state
    extractor.load_state_dict(ext_state)
    extractor.freeze()
    base_codes = {cid: ClassCode(code_state[k]) for k, cid in enumerate(base_ids)}
    return Stage1Result(extractor, base_codes, SharedCodes(shared_state), history, best_epoch, initial_val, best_val)


# ---------------------------------------------------------------- episodes


@dataclass
class Episode:
    label_set: list[int]
    support: dict[int, SupportSet]
    query: list[tuple[np.ndarray, list[BoxAnnotation]]]
    query_indices: list[int]
    support_indices: list[int]


class EpisodeSampler:
    """Samples few-shot detection tasks from annotated base scenes."""

    MAX_RETRIES = 20

    def __init__(self, scenes: Sequence[Scene], class_ids: Sequence[int]):
        self.scenes = list(scenes)
        self.class_ids = sorted(class_ids)
        self.boxes: dict[int, list[tuple[int, int]]] = {c: [] for c in self.class_ids}
        self.scenes_with: dict[int, set[int]] = {c: set() for c in self.class_ids}
        for si, s in enumerate(self.scenes):
            for bi, b in enumerate(s.annotations):
                if b.class_id in self.boxes:
                    self.boxes[b.class_id].append((si, bi))
                    self.scenes_with[b.class_id].add(si)

    def sample(self, n_way: int, k_shot: int, query_size: int, rng: np.random.Generator) -> Episode:
        if n_way > len(self.class_ids):
            raise ValueError(f"n_way={n_way} exceeds {len(self.class_ids)} available classes")
        for _ in range(self.MAX_RETRIES):
            label_set = sorted(int(c) for c in rng.choice(self.class_ids, size=n_way, replace=False))
            if any(len(self.boxes[c]) < k_shot for c in label_set):
                continue
            support, used = {}, set()
            for c in label_set:
                refs = self.boxes[c]
                picks = sorted(rng.choice(len(refs), size=k_shot, replace=False))
                grouped: dict[int, list[BoxAnnotation]] = {}
                for p in picks:
                    si, bi = refs[p]
                    grouped.setdefault(si, []).append(self.scenes[si].annotations[bi])
                used.update(grouped)
                support[c] = SupportSet(c, [(self.scenes[si].image, bx) for si, bx in sorted(grouped.items())])
            candidates = sorted(set().union(*(self.scenes_with[c] for c in label_set)) - used)
            if len(candidates) < query_size:
                continue
            q_idx = sorted(int(i) for i in rng.choice(candidates, size=query_size, replace=False))
            labels = set(label_set)
            query = [(self.scenes[i].image, [b for b in self.scenes[i].annotations if b.class_id in labels])
                     for i in q_idx]
            return Episode(label_set, support, query, q_idx, sorted(used))
        raise RuntimeError(f"could not sample a {n_way}-way {k_shot}-shot episode after {self.MAX_RETRIES} tries")


def sample_episode(base_scenes: Sequence[Scene], class_ids: Sequence[int], n_way: int, k_shot: int,
                   query_size: int, rng: np.random.Generator) -> Episode:
    return EpisodeSampler(base_scenes, class_ids).sample(n_way, k_shot, query_size, rng)


# ---------------------------------------------------------------- stage II


@dataclass
class Stage2Result:
    generator: CodeGenerator
    history: list[dict]
    initial_val_loss: float
    best_val_loss: float
    best_step: int


def _episode_loss(generator: CodeGenerator, ep: Episode, feats: np.ndarray, shared: SharedCodes, stride: int,
                  size_weight: float, centre_pos_weight: float = 0.0) -> tuple[Tensor, dict[str, float]]:
    index = {c: k for k, c in enumerate(ep.label_set)}
    codes = [generator(support_crops(ep.support[c], generator.arch)) for c in ep.label_set]
    tgt = _stack_targets([render_targets(_remap(boxes, index), img.shape, stride, len(index))
                          for img, boxes in ep.query])
    return detection_loss(Tensor(feats), codes, shared.tensor(), tgt, size_weight, offset_weight=0.0,
                          centre_pos_weight=centre_pos_weight)


class FeatureCache:
    """Frozen-extractor features, computed once per scene."""

    def __init__(self, extractor: FeatureExtractor, scenes: Sequence[Scene], batch_size: int = 32):
        if not extractor.frozen:
            raise AssertionError("feature cache requires a frozen extractor")
        chunks = [extractor(_batch(scenes[i : i + batch_size])).data for i in range(0, len(scenes), batch_size)]
        self.features = np.concatenate(chunks) if chunks else np.zeros((0,))

    def __getitem__(self, idx) -> np.ndarray:
        return self.features[idx]


def meta_train_stage2(extractor: FeatureExtractor, generator: CodeGenerator, shared: SharedCodes,
                      train: Sequence[Scene], val: Sequence[Scene], base_ids: Sequence[int], cfg: Stage2Config,
                      seed: int = 0, log_path=None, val_log_path=None,
                      on_step: Optional[Callable[[int, dict], None]] = None) -> Stage2Result:
    """Episodic training of ``generator`` only; the extractor and codes stay untouched.

    Each meta-step averages the query loss of ``cfg.tasks_per_batch`` sampled
    tasks, backpropagates through the locator and set pooling into the
    generator, and takes one Adam step. The generator with the lowest loss on
    a fixed set of validation episodes is returned.
    """
    if not extractor.frozen:
        raise AssertionError("stage II requires a frozen feature extractor")
    stride = extractor.stride
    train_rng, val_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    sampler = EpisodeSampler(train, base_ids)
    cache = FeatureCache(extractor, sampler.scenes)
    val_sampler = EpisodeSampler(val, base_ids) if val else sampler
    val_cache = FeatureCache(extractor, val_sampler.scenes) if val else cache
    val_eps = [val_sampler.sample(cfg.n_way, cfg.k_shot, cfg.query_size, val_rng) for _ in range(cfg.val_episodes)]

    def val_loss() -> float:
        if not val_eps:
            return float("nan")
        return float(np.mean([_episode_loss(generator, ep, val_cache[ep.query_indices], shared, stride,
                                            cfg.size_weight, cfg.centre_pos_weight)[1]["total"] for ep in val_eps]))

    params = generator.parameters()
    opt = ad.adam(cfg.lr)
    metrics = MetricsLog(log_path, ["centre", "size", "total"])
    vlog = MetricsLog(val_log_path, ["val_loss"])
    initial = best = val_loss()
    vlog.write(0, val_loss=initial)
    best_state, best_step = generator.state_dict(), 0
    history = []
    for step in range(1, cfg.episodes + 1):
        episodes = [sampler.sample(cfg.n_way, cfg.k_shot, cfg.query_size, train_rng)
                    for _ in range(cfg.tasks_per_batch)]
        parts_acc: dict[str, float] = {}
        with ad.Tape() as tape:
            losses = []
            for ep in episodes:
                loss, parts = _episode_loss(generator, ep, cache[ep.query_indices], shared, stride, cfg.size_weight,
                                            cfg.centre_pos_weight)
                losses.append(loss)
                for k, v in parts.items():
                    parts_acc[k] = parts_acc.get(k, 0.0) + v / len(episodes)
            total = _sum(losses) * (1.0 / len(losses))
        if not np.isfinite(total.item()):
            raise FloatingPointError(f"non-finite stage-2 loss at step {step}")
        ad.backward(total, tape)
        ad.step(params, opt)
        metrics.write(step, **parts_acc)
        row = {"step": step, **parts_acc}
        if cfg.val_every and step % cfg.val_every == 0:
            v = val_loss()
            row["val_loss"] = v
            vlog.write(step, val_loss=v)
            log.info("stage2 step %d: %s", step, row)
            if v < best:
                best, best_state, best_step = v, generator.state_dict(), step
        history.append(row)
        if on_step:
            on_step(step, row)
    if cfg.val_every and val_eps:
        generator.load_state_dict(best_state)
    return Stage2Result(generator, history, initial, best, best_step)
