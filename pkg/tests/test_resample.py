import math

import numpy as np
import pytest
import torch
from bicubic_pytorch import imresize
from hypothesis import given, settings
from hypothesis import strategies as st

from fsrfer.data import SCALES
from fsrfer.resample import bicubic_resample, cubic, output_size, resample_weights
from fsrfer.synthetic import EXPRESSIONS, render_face


def oracle(image: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))
    y = imresize(x, sizes=(out_h, out_w), antialiasing=antialias)
    return np.clip(y.numpy().transpose(1, 2, 0), 0.0, 1.0)


def smooth_image(rng, h=100, w=100, c=3):
    """Low-frequency texture plus an edge, as a stand-in for a natural photo."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    out = np.zeros((h, w, c))
    for ch in range(c):
        f = rng.uniform(1, 6, size=2)
        out[..., ch] = 0.5 + 0.3 * np.sin(2 * np.pi * (f[0] * xx + rng.uniform())) * np.cos(2 * np.pi * f[1] * yy)
    out[:, w // 2:] += 0.15
    return np.clip(out + rng.normal(0, 0.02, out.shape), 0, 1)


def test_cubic_kernel_values():
    assert cubic(np.array(0.0)) == 1.0
    assert cubic(np.array([1.0, 2.0, -2.0, 2.5])).tolist() == [0.0, 0.0, 0.0, 0.0]
    # a = -0.5 at x = 0.5: 1.5/8 - 2.5/4 + 1
    assert cubic(np.array(0.5)) == pytest.approx(0.5625)


@pytest.mark.parametrize("in_len,out_len,aa", [(100, 50, True), (100, 13, True), (13, 100, False),
                                               (34, 100, False), (7, 7, True), (3, 11, True)])
def test_weight_rows_partition_of_unity(in_len, out_len, aa):
    w = resample_weights(in_len, out_len, aa)
    assert w.shape == (out_len, in_len)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)


def test_identity_resize_returns_input(rng):
    img = rng.random((17, 23, 3))
    out = bicubic_resample(img, 17, 23)
    assert out is not img
    np.testing.assert_allclose(out, img, atol=1e-12)


@given(value=st.floats(0.0, 1.0), h=st.integers(8, 40), w=st.integers(8, 40),
       oh=st.integers(1, 60), ow=st.integers(1, 60))
@settings(max_examples=60, deadline=None)
def test_constant_image_stays_constant(value, h, w, oh, ow):
    img = np.full((h, w, 1), value)
    out = bicubic_resample(img, oh, ow)
    assert out.shape == (oh, ow, 1)
    np.testing.assert_allclose(out, value, atol=1e-12)


@given(st.integers(8, 200), st.sampled_from(SCALES))
def test_output_size_is_ceil(size, s):
    assert output_size(size, s) == math.ceil(size / s)


def test_output_clamped(rng):
    # a hard checkerboard overshoots under cubic interpolation; the clamp must hold
    img = (np.indices((12, 12)).sum(0) % 2).astype(float)[..., None]
    out = bicubic_resample(img, 31, 31, antialias=False)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_invalid_sizes_rejected(rng):
    with pytest.raises(ValueError):
        bicubic_resample(rng.random((10, 10, 3)), 0, 5)
    with pytest.raises(ValueError):
        bicubic_resample(rng.random((10, 10)), 5, 5)


def test_downsample_matches_oracle_100_to_50(rng):
    img = smooth_image(rng)
    ours = np.rint(bicubic_resample(img, 50, 50) * 255)
    ref = np.rint(oracle(img, 50, 50) * 255)
    assert np.abs(ours - ref).max() <= 1


@pytest.mark.parametrize("s", SCALES)
def test_matches_oracle_unquantized(rng, s):
    img = render_face(EXPRESSIONS[s % 7], rng)
    n = output_size(100, s)
    lr = bicubic_resample(img, n, n)
    np.testing.assert_allclose(lr, oracle(img, n, n), atol=1e-6)
    up = bicubic_resample(lr, 100, 100, antialias=False)
    np.testing.assert_allclose(up, oracle(lr, 100, 100, antialias=False), atol=1e-6)


def test_rectangular_and_mixed_direction(rng):
    img = rng.random((40, 24, 3))
    for oh, ow in [(13, 30), (55, 7), (40, 12)]:
        np.testing.assert_allclose(bicubic_resample(img, oh, ow), oracle(img, oh, ow), atol=1e-6)
