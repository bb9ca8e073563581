"""Feature extractor f, object locator h and class code generator g.

The extractor maps an image to a class-agnostic stride-r feature map ``m``.
A class is nothing more than a :class:`ClassCode`: three length-c vectors
used as 1x1 convolution kernels over ``m`` producing the centre heatmap and
the width/height maps. Offsets come from class-agnostic :class:`SharedCodes`.
The generator turns a handful of annotated boxes into a new ClassCode with a
single forward pass.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codec import BoxAnnotation, Detection, decode_boxes, find_peaks

DTYPE = np.float32


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 3
    enc_channels: tuple[int, ...] = (16, 32, 64, 64)
    code_channels: int = 32
    stride: int = 4
    groups: int = 4
    norm: str = "group"  # "group" or "none"
    crop_size: int = 32
    crop_pad: float = 0.1
    dtype: str = "float32"  # float64 is used for gradient checks

    @property
    def n_up(self) -> int:
        n_down = len(self.enc_channels)
        n_up = n_down - int(np.log2(self.stride))
        if 2 ** (n_down - n_up) != self.stride or n_up < 1:
            raise ValueError(f"stride {self.stride} incompatible with {n_down} downsampling blocks")
        return n_up


@dataclass
class ClassCode:
    """Per-class 1x1 kernels: rows are (centre, width, height), each of length c."""

    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=DTYPE)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != 3:
            raise ValueError(f"class code must be 3 x c, got shape {self.vectors.shape}")
        if not np.isfinite(self.vectors).all():
            raise ValueError("class code contains non-finite values")

    @property
    def centre(self) -> np.ndarray:
        return self.vectors[0]

    @property
    def width(self) -> np.ndarray:
        return self.vectors[1]

    @property
    def height(self) -> np.ndarray:
        return self.vectors[2]

    @property
    def channels(self) -> int:
        return self.vectors.shape[1]

    def tensor(self) -> Tensor:
        return Tensor(self.vectors)

    def checksum(self) -> str:
        return ad.checksum({"code": self.vectors})


@dataclass
class SharedCodes:
    """Class-agnostic offset kernels: rows are (offset_x, offset_y)."""

    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=DTYPE)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != 2:
            raise ValueError(f"shared codes must be 2 x c, got shape {self.vectors.shape}")

    def tensor(self) -> Tensor:
        return Tensor(self.vectors)


@dataclass
class SupportSet:
    class_id: int
    samples: list[tuple[np.ndarray, list[BoxAnnotation]]]  # (HWC image, boxes of class_id)

    def __post_init__(self):
        if not self.samples:
            raise ValueError(f"support set for class {self.class_id} is empty")
        for _, boxes in self.samples:
            if not any(b.class_id == self.class_id for b in boxes):
                raise ValueError(f"support sample without a box of class {self.class_id}")

    @property
    def num_boxes(self) -> int:
        return sum(1 for _, boxes in self.samples for b in boxes if b.class_id == self.class_id)


# ---------------------------------------------------------------- parameter containers


class Module:
    """Named parameter bag with freeze/checksum helpers."""

    dtype = np.dtype(DTYPE)

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _add(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value.astype(self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=self.dtype)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} != expected {t.shape}")
            if t.frozen:
                raise AssertionError(f"cannot load into frozen parameter {k}")
            t.data = arr.copy()

    @property
    def frozen(self) -> bool:
        return bool(self.params) and all(t.frozen for t in self.params.values())

    def freeze(self) -> None:
        for t in self.params.values():
            t.freeze()

    def checksum(self) -> str:
        return ad.checksum({k: v.data for k, v in self.params.items()})


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class _Encoder(Module):
    """Stack of stride-2 3x3 conv -> norm -> relu blocks."""

    def __init__(self, arch: Architecture, rng: np.random.Generator):
        super().__init__()
        self.arch = arch
        self.dtype = np.dtype(arch.dtype)
        cin = arch.in_channels
        for i, cout in enumerate(arch.enc_channels):
            self._add(f"enc{i}.w", _he(rng, (cout, cin, 3, 3), cin * 9))
            self._norm_params(f"enc{i}", cout)
            cin = cout

    def _norm_params(self, prefix: str, channels: int) -> None:
        if self.arch.norm == "group":
            self._add(f"{prefix}.gamma", np.ones(channels))
            self._add(f"{prefix}.beta", np.zeros(channels))
        elif self.arch.norm == "none":
            self._add(f"{prefix}.b", np.zeros(channels))
        else:
            raise ValueError(f"unknown norm {self.arch.norm!r}")

    def _norm_relu(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        if self.arch.norm == "group":
            x = ad.group_norm(x, self.arch.groups, p[f"{prefix}.gamma"], p[f"{prefix}.beta"])
        return ad.relu(x)

    def _conv(self, x: Tensor, prefix: str, stride: int, pad: int) -> Tensor:
        bias = self.params.get(f"{prefix}.b")
        return ad.conv2d(x, self.params[f"{prefix}.w"], bias, stride=stride, pad=pad)

    def encode(self, x: Tensor) -> list[Tensor]:
        """Outputs of every encoder block, shallowest first."""
        feats = []
        for i in range(len(self.arch.enc_channels)):
            x = self._norm_relu(self._conv(x, f"enc{i}", 2, 1), f"enc{i}")
            feats.append(x)
        return feats

    def encoder_state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items() if k.startswith("enc")}


class FeatureExtractor(_Encoder):
    """Encoder-decoder producing (N, c, H/r, W/r) features.

    Each decoder block upsamples 2x with a 2x2 transposed convolution, adds
    the encoder feature map of matching resolution, then mixes with a 3x3
    convolution, norm and relu.
    """

    def __init__(self, arch: Architecture = Architecture(), rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        super().__init__(arch, rng)
        enc = arch.enc_channels
        cin = enc[-1]
        for j in range(arch.n_up):
            skip = enc[-2 - j]
            cout = arch.code_channels if j == arch.n_up - 1 else skip
            self._add(f"up{j}.w", _he(rng, (cin, skip, 2, 2), cin))
            self._add(f"dec{j}.w", _he(rng, (cout, skip, 3, 3), skip * 9))
            self._norm_params(f"dec{j}", cout)
            cin = cout

    @property
    def stride(self) -> int:
        return self.arch.stride

    def __call__(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        _, _, h, w = x.shape
        r = self.arch.stride
        if h % r or w % r or h % 2 ** len(self.arch.enc_channels) or w % 2 ** len(self.arch.enc_channels):
            raise ValueError(f"input {h}x{w} not divisible by the network's total downsampling")
        feats = self.encode(x)
        x = feats[-1]
        for j in range(self.arch.n_up):
            x = ad.conv_transpose2d(x, self.params[f"up{j}.w"], stride=2)
            x = x + feats[-2 - j]
            x = self._norm_relu(self._conv(x, f"dec{j}", 1, 1), f"dec{j}")
        return x


class CodeGenerator(_Encoder):
    """Encoder (same topology as the extractor's) plus three pooled 1x1 heads."""

    HEADS = ("centre", "width", "height")

    def __init__(self, arch: Architecture = Architecture(), rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        super().__init__(arch, rng)
        cin, c = arch.enc_channels[-1], arch.code_channels
        for head in self.HEADS:
            self._add(f"head.{head}.w", rng.normal(0.0, 0.1 / np.sqrt(cin), size=(c, cin, 1, 1)))
            self._add(f"head.{head}.b", np.zeros(c))

    @classmethod
    def from_extractor(cls, extractor: FeatureExtractor, rng: Optional[np.random.Generator] = None) -> "CodeGenerator":
        """New generator whose encoder weights are copied from ``extractor``."""
        gen = cls(extractor.arch, rng)
        for k, v in extractor.encoder_state().items():
            gen.params[k].data = v.astype(gen.dtype)
        return gen

    def crop_vectors(self, crops) -> Tensor:
        """(n, 3, S, S) crops -> (n, 3c) per-crop pooled code vectors."""
        x = crops if isinstance(crops, Tensor) else Tensor(np.asarray(crops, dtype=self.dtype))
        feat = self.encode(x)[-1]
        pooled = [ad.global_avg_pool(self._conv_head(feat, h)) for h in self.HEADS]
        return ad.concat(pooled, axis=1)

    def _conv_head(self, feat: Tensor, head: str) -> Tensor:
        return ad.conv2d(feat, self.params[f"head.{head}.w"], self.params[f"head.{head}.b"])

    def __call__(self, crops) -> Tensor:
        """Set-invariant code (3, c) from a batch of crops."""
        return ad.set_mean(self.crop_vectors(crops)).reshape(3, self.arch.code_channels)


# ---------------------------------------------------------------- operations


def image_to_batch(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) image -> (1, 3, H, W) float32 batch."""
    img = np.asarray(image, dtype=DTYPE)
    if img.ndim != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {img.shape}")
    return np.ascontiguousarray(img.transpose(2, 0, 1))[None]


def extract_features(extractor: FeatureExtractor, image: np.ndarray) -> np.ndarray:
    """Feature map of one HWC image, channel-first: (c, H/r, W/r)."""
    h, w = image.shape[:2]
    if h % extractor.stride or w % extractor.stride:
        raise ValueError(f"image {h}x{w} not divisible by output stride {extractor.stride}")
    return extractor(image_to_batch(image)).data[0]


def locate(m: Tensor, code, shared) -> tuple[Tensor, Tensor, Tensor]:
    """Object locator: 1x1 convolutions of ``m`` with a class code and the shared codes.

    Returns ``(heatmap, size, offset)`` shaped (N,1,H,W), (N,2,H,W),
    (N,2,H,W). The heatmap is sigmoid-squashed; size and offset are linear.
    """
    m = m if isinstance(m, Tensor) else Tensor(np.asarray(m, dtype=DTYPE))
    code_t = code.tensor() if isinstance(code, ClassCode) else code
    shared_t = shared.tensor() if isinstance(shared, SharedCodes) else shared
    c = m.shape[1]
    if code_t.shape != (3, c):
        raise ValueError(f"class code shape {code_t.shape} does not match {c} feature channels")
    if shared_t.shape != (2, c):
        raise ValueError(f"shared code shape {shared_t.shape} does not match {c} feature channels")
    out = ad.conv2d(m, code_t.reshape(3, c, 1, 1))
    heat = ad.sigmoid(out[:, 0:1])
    size = out[:, 1:3]
    offset = ad.conv2d(m, shared_t.reshape(2, c, 1, 1))
    return heat, size, offset


def crop_box(image: np.ndarray, box: BoxAnnotation, size: int, pad: float = 0.1) -> Optional[np.ndarray]:
    """Square crop around ``box`` (side = longer edge * (1 + 2*pad)), bilinear-resized to size x size.

    Returns (3, size, size), or None if the box does not overlap the image.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    bx1, by1 = max(box.x1, 0.0), max(box.y1, 0.0)
    bx2, by2 = min(box.x2, float(w)), min(box.y2, float(h))
    if bx2 - bx1 <= 0 or by2 - by1 <= 0:
        return None
    side = max(box.width, box.height) * (1 + 2 * pad)
    cx, cy = box.centre
    t = (np.arange(size) + 0.5) / size - 0.5
    # sample positions in pixel-index coordinates (pixel i covers [i, i+1))
    xs = np.clip(cx + t * side - 0.5, 0, w - 1)
    ys = np.clip(cy + t * side - 0.5, 0, h - 1)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1i, y1i = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    fx, fy = (xs - x0)[None, :, None], (ys - y0)[:, None, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1i] * fx
    bot = img[y1i][:, x0] * (1 - fx) + img[y1i][:, x1i] * fx
    out = top * (1 - fy) + bot * fy
    return np.ascontiguousarray(out.transpose(2, 0, 1)).astype(DTYPE)


def support_crops(support: SupportSet, arch: Architecture) -> np.ndarray:
    crops = []
    skipped = 0
    for image, boxes in support.samples:
        for b in boxes:
            if b.class_id != support.class_id:
                continue
            crop = crop_box(image, b, arch.crop_size, arch.crop_pad)
            if crop is None:
                skipped += 1
                continue
            crops.append(crop)
    if skipped:
        warnings.warn(f"skipped {skipped} degenerate support crop(s) for class {support.class_id}")
    if not crops:
        raise ValueError(f"no usable support crops for class {support.class_id}")
    return np.stack(crops)


def generate_code(generator: CodeGenerator, support: SupportSet) -> ClassCode:
    """Enrolment: encode every support box crop on its own and take the set mean.

    Crops go through the generator one at a time so each crop's vector is
    independent of what else is in the support set; together with
    :func:`autodiff.set_mean` this makes the code bit-invariant to support
    order and duplication.
    """
    crops = support_crops(support, generator.arch)
    rows = [generator.crop_vectors(crop[None]) for crop in crops]
    return ClassCode(ad.set_mean(ad.concat(rows, axis=0)).data.reshape(3, -1))


def detect_from_features(m, codes: Mapping[int, ClassCode], shared: SharedCodes, stride: int,
                         score_threshold: float = 0.3, max_per_class: int = 20,
                         diagnostics: Optional[Counter] = None) -> list[Detection]:
    """Per-class locate -> peaks -> boxes for one image's features (1, c, H, W).

    Each class is computed on its own from ``m`` and its own code, with no
    cross-class normalisation, so a class's detections do not depend on
    which other classes are present.
    """
    m = m if isinstance(m, Tensor) else Tensor(np.asarray(m, dtype=DTYPE))
    if m.ndim == 3:
        m = m.reshape(1, *m.shape)
    out: list[Detection] = []
    for class_id, code in codes.items():
        heat, size, offset = locate(m, code, shared)
        peaks = find_peaks(heat.data[0, 0], score_threshold, max_per_class)
        out.extend(decode_boxes(peaks, offset.data[0], size.data[0], stride, class_id, diagnostics))
    return out


def detect(extractor: FeatureExtractor, image: np.ndarray, codes: Mapping[int, ClassCode],
           shared: SharedCodes, score_threshold: float = 0.3, max_per_class: int = 20,
           diagnostics: Optional[Counter] = None) -> list[Detection]:
    if not codes:
        raise ValueError("no classes registered")
    m = extractor(image_to_batch(image))
    return detect_from_features(m, codes, shared, extractor.stride, score_threshold, max_per_class, diagnostics)
