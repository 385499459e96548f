import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mirrorgen import conditioning as cd
from mirrorgen.validation import EmptyMaskError, NonFiniteError, ShapeError


def _depth_case(values, d_max=2.0):
    d = np.array([values + [d_max]], dtype=float)
    m = np.zeros_like(d, dtype=bool)
    m[0, -1] = True
    return cd.normalize_depth(d, m, 0.5).data[0, :-1]


def test_closed_form_points():
    out = _depth_case([0.0, 2.5, 1.25, 9.9])
    assert out.tolist() == [-1.0, 1.0, 0.0, 1.0]


def test_inf_maps_to_one_and_nan_errors():
    d = np.array([[np.inf, 1.0]])
    m = np.array([[False, True]])
    assert cd.normalize_depth(d, m).data[0, 0] == 1.0
    with pytest.raises(NonFiniteError):
        cd.normalize_depth(np.array([[np.nan, 1.0]]), m)


def test_empty_mask_and_negative_depth():
    with pytest.raises(EmptyMaskError):
        cd.normalize_depth(np.ones((4, 4)), np.zeros((4, 4), bool))
    with pytest.raises(ValueError):
        cd.normalize_depth(-np.ones((2, 2)), np.ones((2, 2), bool))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(0, 20)),
       arrays(bool, (6, 6)), st.floats(0.01, 3))
def test_range_monotone_and_invariance(d, m, delta):
    m[0, 0] = True
    nd = cd.normalize_depth(d, m, delta)
    out = nd.data
    assert out.min() >= -1 and out.max() <= 1
    far = nd.d_max + delta
    # monotone: order of depths is preserved (non-strictly)
    order = np.argsort(d, axis=None, kind="stable")
    assert np.all(np.diff(out.ravel()[order]) >= -1e-12)
    # anything beyond d_max + delta is +1; changing it further leaves output unchanged
    beyond = d > far
    d2 = np.where(beyond, d + 100.0, d)
    assert np.array_equal(cd.normalize_depth(d2, m, delta).data, out)
    assert np.all(out[d >= far] == 1.0)


def test_resize_modes():
    assert np.array_equal(cd.resize_to_latent(np.ones((64, 64)), 16, 16), np.ones((16, 16)))
    checker = (np.indices((8, 8)).sum(0) % 2).astype(float)
    assert np.allclose(cd.resize_to_latent(checker, 4, 4), 0.5)
    mask = np.random.default_rng(0).random((16, 16)) > 0.5
    near = cd.resize_to_latent(mask.astype(float), 4, 4, "nearest")
    assert set(np.unique(near)) <= {0.0, 1.0}
    with pytest.raises(ValueError):
        cd.resize_to_latent(mask.astype(float), 4, 4, "bicubic")


def test_area_mean_preserves_mean(rng):
    x = rng.random((32, 32))
    assert np.isclose(cd.resize_to_latent(x, 8, 8).mean(), x.mean())


def test_masked_region_does_not_leak(rng):
    img = rng.random((64, 64, 3))
    m = np.zeros((64, 64), bool)
    m[10:40, 5:30] = True
    d = rng.uniform(0.5, 4, (64, 64))
    other = img.copy()
    other[m] = rng.random((m.sum(), 3))
    a = cd.build_condition(img, m, d)
    b = cd.build_condition(other, m, d)
    assert np.array_equal(a.z_m, b.z_m)
    assert a.z_m.shape == (16, 16, 48) and a.x_m.shape == (16, 16, 1) and a.x_d.shape == (16, 16, 1)


def test_build_condition_errors(rng):
    img = rng.random((16, 16, 3))
    with pytest.raises(EmptyMaskError):
        cd.build_condition(img, np.zeros((16, 16)), np.ones((16, 16)))
    with pytest.raises(ShapeError):
        cd.build_condition(img, np.ones((16, 16)), np.ones((8, 8)))


def test_depth_normalizer_transformer(rng):
    pairs = [(rng.uniform(0, 3, (8, 8)), np.ones((8, 8), bool)) for _ in range(3)]
    dn = cd.DepthNormalizer(delta=0.5).fit(pairs)
    out = dn.transform(pairs)
    assert out.shape == (3, 8, 8)
    assert dn.get_params() == {"delta": 0.5}
