import numpy as np
import pytest

from oncedet import autodiff as ad
from oncedet.autodiff import Tensor
from oncedet.codec import BoxAnnotation, render_targets
from oncedet.model import (
    Architecture,
    ClassCode,
    CodeGenerator,
    FeatureExtractor,
    SharedCodes,
    SupportSet,
    crop_box,
    detect,
    detect_from_features,
    extract_features,
    generate_code,
    locate,
    support_crops,
)
from oncedet.synth import DEFAULT_ROSTER, scene_from_seed
from oncedet.training import _stack_targets, detection_loss

from helpers import max_rel_error

ARCH = Architecture()


@pytest.fixture(scope="module")
def extractor():
    return FeatureExtractor(ARCH, np.random.default_rng(0))


@pytest.fixture(scope="module")
def scene():
    return scene_from_seed(DEFAULT_ROSTER, 5)


def random_code(rng, c=32, scale=0.3):
    return ClassCode(rng.normal(0, scale, (3, c)))


# ---------------------------------------------------------------- feature extractor


def test_feature_shape(extractor, scene):
    assert extract_features(extractor, scene.image).shape == (32, 16, 16)


def test_features_deterministic(extractor, scene):
    a = extract_features(extractor, scene.image)
    b = extract_features(extractor, scene.image.copy())
    assert a.tobytes() == b.tobytes()


def test_indivisible_input_rejected(extractor):
    with pytest.raises(ValueError):
        extractor(np.zeros((1, 3, 62, 64), dtype=np.float32))


def test_parameter_budget(extractor):
    n = sum(p.data.size for p in extractor.parameters())
    assert 50_000 < n < 250_000


def receptive_mask(arch: Architecture, size: int, py: int, px: int) -> np.ndarray:
    """Output cells that can depend on input pixel (py, px), from layer geometry alone."""

    def conv3(mask, stride):
        h, w = mask.shape
        ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
        out = np.zeros((ho, wo), dtype=bool)
        for i in range(ho):
            for j in range(wo):
                r0, c0 = i * stride - 1, j * stride - 1
                out[i, j] = mask[max(r0, 0) : r0 + 3, max(c0, 0) : c0 + 3].any()
        return out

    def up2(mask):
        return np.repeat(np.repeat(mask, 2, axis=0), 2, axis=1)

    m = np.zeros((size, size), dtype=bool)
    m[py, px] = True
    feats = []
    for _ in arch.enc_channels:
        m = conv3(m, 2)
        feats.append(m)
    for j in range(arch.n_up):
        m = conv3(up2(m) | feats[-2 - j], 1)
    return m


@pytest.mark.parametrize("py,px", [(0, 0), (31, 40), (63, 17), (20, 63)])
def test_receptive_field(py, px):
    arch = Architecture(norm="none", dtype="float64")
    ext = FeatureExtractor(arch, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    img = rng.random((1, 3, 64, 64))
    bumped = img.copy()
    bumped[0, :, py, px] += 1.0
    diff = np.abs(ext(bumped).data - ext(img).data).max(axis=(0, 1))
    changed = diff > 0
    allowed = receptive_mask(arch, 64, py, px)
    assert changed.any()
    assert not (changed & ~allowed).any()
    assert allowed.sum() < allowed.size


# ---------------------------------------------------------------- locate


def test_zero_code_gives_half(extractor, scene):
    m = Tensor(extract_features(extractor, scene.image)[None])
    heat, _, _ = locate(m, ClassCode(np.zeros((3, 32))), SharedCodes(np.zeros((2, 32))))
    assert np.all(heat.data == 0.5)


def test_one_hot_code_selects_channel(extractor, scene):
    m = extract_features(extractor, scene.image)[None]
    vec = np.zeros((3, 32))
    vec[0, 7] = 1.0
    vec[1, 3] = 1.0
    heat, size, _ = locate(Tensor(m), ClassCode(vec), SharedCodes(np.zeros((2, 32))))
    np.testing.assert_allclose(heat.data[0, 0], 1 / (1 + np.exp(-m[0, 7].astype(np.float64))), rtol=1e-5)
    np.testing.assert_array_equal(size.data[0, 0], m[0, 3])


@pytest.mark.parametrize("seed", range(5))
def test_locate_equals_general_conv(seed):
    rng = np.random.default_rng(seed)
    m = Tensor(rng.normal(size=(2, 32, 16, 16)))
    code = rng.normal(size=(3, 32))
    shared = rng.normal(size=(2, 32))
    heat, size, offset = locate(m, Tensor(code), Tensor(shared))
    ref = ad.conv2d(m, Tensor(code.reshape(3, 32, 1, 1))).data
    np.testing.assert_allclose(heat.data[:, 0], 1 / (1 + np.exp(-ref[:, 0])), rtol=1e-9, atol=1e-15)
    np.testing.assert_allclose(size.data, ref[:, 1:3], rtol=1e-12)
    np.testing.assert_allclose(offset.data, ad.conv2d(m, Tensor(shared.reshape(2, 32, 1, 1))).data, rtol=1e-12)


def test_locate_width_mismatch():
    with pytest.raises(ValueError, match="does not match"):
        locate(Tensor(np.zeros((1, 16, 4, 4))), ClassCode(np.zeros((3, 32))), SharedCodes(np.zeros((2, 16))))


# ---------------------------------------------------------------- code generator


def test_generator_clones_encoder(extractor):
    gen = CodeGenerator.from_extractor(extractor, np.random.default_rng(3))
    for k, v in extractor.encoder_state().items():
        assert gen.params[k].data.tobytes() == v.tobytes()
    assert set(k for k in gen.params if not k.startswith("enc")) == {
        f"head.{h}.{p}" for h in ("centre", "width", "height") for p in ("w", "b")}


def make_support(seed=0, n_scenes=4):
    scenes = [scene_from_seed(DEFAULT_ROSTER, 1000 + seed * 100 + i) for i in range(n_scenes)]
    samples = [(s.image, [s.annotations[0]]) for s in scenes]
    return samples


@pytest.fixture(scope="module")
def generator(extractor):
    return CodeGenerator.from_extractor(extractor, np.random.default_rng(3))


def relabel(samples, cid=99):
    return [(img, [BoxAnnotation(cid, *b.as_list()) for b in boxes]) for img, boxes in samples]


def test_single_sample_code_is_its_own_vector(generator):
    samples = relabel(make_support()[:1])
    code = generate_code(generator, SupportSet(99, samples))
    crop = support_crops(SupportSet(99, samples), ARCH)
    own = generator.crop_vectors(crop).data.reshape(3, -1)
    assert code.vectors.tobytes() == own.tobytes()


def test_code_invariant_to_permutation_and_duplication(generator):
    samples = relabel(make_support(n_scenes=5))
    base = generate_code(generator, SupportSet(99, samples))
    perm = generate_code(generator, SupportSet(99, [samples[i] for i in (3, 0, 4, 2, 1)]))
    dup = generate_code(generator, SupportSet(99, samples + samples[::-1]))
    assert base.vectors.tobytes() == perm.vectors.tobytes() == dup.vectors.tobytes()
    assert base.vectors.shape == (3, 32)


def test_generate_code_matches_batched_call(generator):
    samples = relabel(make_support(n_scenes=3))
    crops = support_crops(SupportSet(99, samples), ARCH)
    np.testing.assert_allclose(generate_code(generator, SupportSet(99, samples)).vectors,
                               generator(crops).data, rtol=1e-4, atol=1e-6)


def test_empty_support_rejected():
    with pytest.raises(ValueError):
        SupportSet(1, [])


def test_degenerate_crops(generator):
    img = np.zeros((64, 64, 3), dtype=np.float32)
    outside = BoxAnnotation(1, 70, 70, 80, 80)
    inside = BoxAnnotation(1, 10, 10, 20, 20)
    assert crop_box(img, outside, 32) is None
    with pytest.warns(UserWarning, match="skipped 1"):
        crops = support_crops(SupportSet(1, [(img, [outside, inside])]), ARCH)
    assert crops.shape == (1, 3, 32, 32)
    with pytest.raises(ValueError), pytest.warns(UserWarning):
        generate_code(generator, SupportSet(1, [(img, [outside])]))


def test_crop_is_square_and_padded():
    img = np.zeros((64, 64, 3), dtype=np.float32)
    img[20:30, 10:50] = 1.0  # a 40x10 bar
    crop = crop_box(img, BoxAnnotation(0, 10, 20, 50, 30), 32, pad=0.1)
    assert crop.shape == (3, 32, 32)
    rows = np.flatnonzero(crop[0].max(axis=1) > 0.5)
    cols = np.flatnonzero(crop[0].max(axis=0) > 0.5)
    # 40 px box edge over a 48 px crop side -> bar spans ~27 of 32 columns, ~7 rows
    assert 25 <= len(cols) <= 28 and 5 <= len(rows) <= 8


# ---------------------------------------------------------------- detect


def test_class_independence(extractor, scene):
    rng = np.random.default_rng(4)
    m = extract_features(extractor, scene.image)[None]
    shared = SharedCodes(rng.normal(0, 0.3, (2, 32)))
    target = random_code(rng)
    others = {c: random_code(rng) for c in range(1, 6)}
    alone = detect_from_features(m, {0: target}, shared, 4, score_threshold=0.0)
    together = detect_from_features(m, {**others, 0: target}, shared, 4, score_threshold=0.0)
    reordered = detect_from_features(m, {0: target, **dict(reversed(list(others.items())))}, shared, 4, 0.0)
    pick = lambda ds: [d for d in ds if d.class_id == 0]
    assert alone and pick(together) == alone and pick(reordered) == alone


def test_single_class_registry_outputs_only_that_class(extractor, scene):
    rng = np.random.default_rng(5)
    dets = detect(extractor, scene.image, {3: random_code(rng)}, SharedCodes(np.zeros((2, 32))), score_threshold=0.0)
    assert dets and {d.class_id for d in dets} == {3}


def test_detect_requires_codes(extractor, scene):
    with pytest.raises(ValueError):
        detect(extractor, scene.image, {}, SharedCodes(np.zeros((2, 32))))


# ---------------------------------------------------------------- end-to-end gradients

TINY = Architecture(enc_channels=(4, 4, 4, 4), code_channels=4, groups=2, crop_size=16, dtype="float64")


def test_detector_graph_gradcheck():
    """Extractor + locator + masked L1 losses, against central differences (float64)."""
    worst = []
    for seed in range(20):
        rng = np.random.default_rng(700 + seed)
        ext = FeatureExtractor(TINY, rng)
        codes = [Tensor(rng.normal(0, 0.5, (3, 4)), requires_grad=True) for _ in range(2)]
        shared = Tensor(rng.normal(0, 0.5, (2, 4)), requires_grad=True)
        img = rng.random((1, 3, 16, 16))
        boxes = [BoxAnnotation(0, 2.3, 3.1, 9.7, 11.2), BoxAnnotation(1, 8.2, 1.4, 14.9, 7.6)]
        tgt = _stack_targets([render_targets(boxes, (16, 16), 4, 2)])

        def fn():
            return detection_loss(ext(img), codes, shared, tgt, 0.1, 1.0, centre_pos_weight=5.0)[0]

        params = [ext.params["enc0.w"], ext.params["dec1.w"], ext.params["up0.w"], ext.params["dec0.gamma"],
                  codes[0], shared]
        worst.append(max_rel_error(fn, params, h=1e-5, max_entries=6, rng=rng, floor=1e-7))
    assert max(worst) < 1e-3, worst
