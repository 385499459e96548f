import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import iou, psnr_loop
from mirrorgen import metrics
from mirrorgen.validation import EmptyMaskError, ShapeError


def test_psnr_closed_forms(rng):
    x = rng.uniform(0.2, 0.8, (16, 16, 3))
    assert metrics.psnr(x, x) == 100.0
    assert metrics.psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(EmptyMaskError):
        metrics.psnr(x, x, np.zeros((16, 16), bool))


def test_psnr_vs_loop(rng):
    a, b = rng.random((12, 10, 3)), rng.random((12, 10, 3))
    r = rng.random((12, 10)) > 0.4
    assert metrics.psnr(a, b, r) == pytest.approx(psnr_loop(a, b, r), abs=1e-9)
    assert metrics.psnr(a, b, r) == pytest.approx(metrics.psnr(b, a, r), abs=1e-12)


def test_ssim_identity_symmetry_constant(rng):
    a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    assert metrics.ssim(a, a) == pytest.approx(1.0)
    assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(b, a), abs=1e-12)
    c1 = 0.01 ** 2
    expected = (2 * 0.9 * 0.1 + c1) / (0.81 + 0.01 + c1)
    assert metrics.ssim(np.full((16, 16, 3), 0.9), np.full((16, 16, 3), 0.1)) == pytest.approx(expected)


def test_ssim_matches_reference_on_full_region(rng):
    from skimage.metrics import structural_similarity

    a = rng.random((32, 32, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ref = structural_similarity(a, b, channel_axis=2, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, data_range=1.0)
    assert metrics.ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_region_too_small(rng):
    a = rng.random((32, 32, 3))
    r = np.zeros((32, 32), bool)
    r[0:3, 0:3] = True
    with pytest.raises(EmptyMaskError):
        metrics.ssim(a, a, r)
    with pytest.raises(ShapeError):
        metrics.ssim(a[:8, :8], a[:8, :8])


def test_region_separation(rng):
    a = rng.random((32, 32, 3))
    m = np.zeros((32, 32), bool)
    m[8:24, 8:24] = True
    b = a.copy()
    b[m] = 0.5
    for fn in (metrics.psnr, metrics.ssim, metrics.perceptual_distance):
        assert fn(a, a, ~m) == fn(b, a, ~m)
    assert metrics.psnr(b, a, m) < 100 and metrics.ssim(b, a, m) < 1


def test_perceptual_properties(rng):
    a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    assert metrics.perceptual_distance(a, a) == 0.0
    assert metrics.perceptual_distance(a, b) == pytest.approx(metrics.perceptual_distance(b, a), abs=1e-9)
    assert metrics.perceptual_distance(a, b) > 0


def test_perceptual_monotone_in_noise():
    rng = np.random.default_rng(0)
    means = []
    for sigma in (0.01, 0.03, 0.1):
        vals = []
        for _ in range(20):
            x = rng.uniform(0.2, 0.8, (32, 32, 3))
            vals.append(metrics.perceptual_distance(x, x + rng.normal(0, sigma, x.shape)))
        means.append(np.mean(vals))
    assert means[0] < means[1] < means[2]


def test_perceptual_backend_swap(rng):
    a = rng.random((16, 16, 3))
    metrics.set_perceptual_backend(lambda x, y, r: 42.0)
    try:
        assert metrics.perceptual_distance(a, a) == 42.0
    finally:
        metrics.set_perceptual_backend(None)
    assert metrics.perceptual_distance(a, a) == 0.0


def test_clip_scorer_is_pluggable(rng):
    assert metrics.clip_score(rng.random((8, 8, 3)), "x") is None
    metrics.set_clip_scorer(lambda img, p: 0.25)
    try:
        assert metrics.clip_score(rng.random((8, 8, 3)), "x") == 0.25
    finally:
        metrics.set_clip_scorer(None)


def test_iou_fixtures():
    a = np.zeros((30, 30), bool)
    a[5:15, 5:15] = True
    b = np.zeros_like(a)
    b[5:15, 10:20] = True
    assert metrics.reflection_iou(a, b) == pytest.approx(50 / 150)
    c = np.zeros_like(a)
    c[10:20, 10:20] = True
    assert metrics.reflection_iou(a, c) == pytest.approx(25 / 175)
    assert metrics.reflection_iou(a, a) == 1.0
    d = np.zeros_like(a)
    d[20:25, 20:25] = True
    assert metrics.reflection_iou(a, d) == 0.0
    assert metrics.reflection_iou(np.zeros_like(a), np.zeros_like(a)) == 1.0
    with pytest.raises(ValueError):
        metrics.reflection_iou(a.astype(float) * 0.5, a)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_iou_property(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((9, 9)) > 0.5, r.random((9, 9)) > 0.5
    v = metrics.reflection_iou(a, b)
    assert 0 <= v <= 1 and v == metrics.reflection_iou(b, a) and v == pytest.approx(iou(a, b))


def test_segment_reflection(rng):
    ref = rng.uniform(0.3, 0.6, (40, 40, 3))
    m = np.zeros((40, 40), bool)
    m[5:35, 5:35] = True
    assert not metrics.segment_reflection(ref, ref, m).any()
    gen = ref.copy()
    gen[10:20, 12:22] += 0.5
    gen[2:8, 2:8] += 0.5  # partly outside the mirror
    seg = metrics.segment_reflection(gen, ref, m, 0.1)
    expect = np.zeros_like(m)
    expect[10:20, 12:22] = True
    expect[5:8, 5:8] = True
    assert np.array_equal(seg, expect)
    assert not (seg & ~m).any()
    assert not metrics.segment_reflection(gen, ref, m, 1.1).any()


def test_select_representative(rng):
    gt = rng.random((24, 24, 3))
    m = np.ones((24, 24), bool)
    cands = [np.clip(gt + rng.normal(0, s, gt.shape), 0, 1) for s in (0.3, 0.2, 0.4)]
    assert metrics.select_representative(cands + [gt], gt, m) == 3
    assert metrics.select_representative(cands[:1], gt, m) == 0
    i = metrics.select_representative(cands, gt, m)
    perm = [2, 0, 1]
    assert perm[metrics.select_representative([cands[p] for p in perm], gt, m)] == i
    assert metrics.select_representative([gt, gt], gt, m) == 0
    with pytest.raises(ValueError):
        metrics.select_representative([], gt, m)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=6), st.floats(0.1, 10), st.floats(-5, 5))
def test_argmax_invariant_under_monotone_rescaling(scores, a, b):
    assert metrics.first_argmax(scores) == metrics.first_argmax([a * s + b for s in scores]) or \
        len(set(a * s + b for s in scores)) < len(set(scores))
