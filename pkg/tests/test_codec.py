import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mirrorgen import codec
from mirrorgen.validation import ShapeError


def test_midpoint_and_upper_bound():
    assert np.array_equal(codec.encode(np.full((64, 64, 3), 0.5)), np.zeros((16, 16, 48)))
    assert np.array_equal(codec.encode(np.ones((64, 64, 3))), np.ones((16, 16, 48)))
    assert np.array_equal(codec.decode(np.zeros((16, 16, 48))), np.full((64, 64, 3), 0.5))


def test_decode_clips():
    z = np.full((2, 2, 48), 3.0)
    assert np.all(codec.decode(z) == 1.0)


def test_patch_layout_matches_explicit_loop(rng):
    # oracle: element-by-element space-to-depth
    x = rng.random((8, 12, 3))
    z = codec.encode(x)
    ref = np.empty((2, 3, 48))
    for i in range(2):
        for j in range(3):
            k = 0
            for dy in range(4):
                for dx in range(4):
                    for c in range(3):
                        ref[i, j, k] = 2 * x[4 * i + dy, 4 * j + dx, c] - 1
                        k += 1
    assert np.array_equal(z, ref)


def test_roundtrip_batch(rng):
    x = rng.random((5, 64, 64, 3))
    assert np.max(np.abs(codec.decode(codec.encode(x)) - x)) < 1e-6


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (8, 8, 3), elements=st.floats(0, 1)), st.sampled_from([1, 2, 4, 8]))
def test_roundtrip_property(x, f):
    z = codec.encode(x, f)
    assert z.shape == (8 // f, 8 // f, 3 * f * f)
    assert np.max(np.abs(codec.decode(z, f) - x)) < 1e-6


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 4, 3), elements=st.floats(0, 1)),
       arrays(np.float64, (4, 4, 3), elements=st.floats(0, 1)), st.floats(0, 1))
def test_affine_combinations_commute(x, y, a):
    lhs = codec.encode(a * x + (1 - a) * y)
    rhs = a * codec.encode(x) + (1 - a) * codec.encode(y)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_encode_of_decode_for_in_range_latents(rng):
    z = rng.uniform(-1, 1, (4, 4, 48))
    assert np.allclose(codec.encode(codec.decode(z)), z, atol=1e-12)


def test_indivisible_and_channel_errors():
    with pytest.raises(ShapeError):
        codec.encode(np.zeros((10, 8, 3)))
    with pytest.raises(ShapeError):
        codec.decode(np.zeros((4, 4, 47)))


def test_estimator_api(rng):
    x = rng.random((2, 16, 16, 3))
    pc = codec.PatchCodec(patch_factor=4).fit(x)
    assert pc.get_params() == {"patch_factor": 4}
    assert pc.n_latent_channels_ == 48
    assert np.allclose(pc.inverse_transform(pc.fit_transform(x)), x)
