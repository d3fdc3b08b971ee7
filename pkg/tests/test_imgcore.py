import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sonarmatch.errors import InvalidColorspaceError, OutOfBoundsError
from sonarmatch.imgcore import (
    GRAY,
    Image,
    Keypoint,
    extract_patch,
    histogram,
    load_png,
    rgb_to_yiq,
    save_png,
    to_gray,
    to_rgb,
    yiq_to_rgb,
)


def rgb1(r, g, b):
    return Image.rgb(np.array([[[r, g, b]]], dtype=float))


@pytest.mark.parametrize(
    "rgb, yiq",
    [
        ((1, 1, 1), (1, 0, 0)),
        ((0, 0, 0), (0, 0, 0)),
        ((1, 0, 0), (0.299, 0.596, 0.211)),
    ],
)
def test_rgb_to_yiq_examples(rgb, yiq):
    out = rgb_to_yiq(rgb1(*rgb)).pixels[0, 0]
    np.testing.assert_allclose(out, yiq, atol=1e-12)


def test_yiq_to_rgb_examples():
    white = Image(np.array([[[1.0, 0.0, 0.0]]]), "YIQ")
    np.testing.assert_allclose(yiq_to_rgb(white).pixels[0, 0], (1, 1, 1), atol=1e-12)
    black = Image(np.zeros((1, 1, 3)), "YIQ")
    np.testing.assert_array_equal(yiq_to_rgb(black).pixels, 0.0)


def test_wrong_colorspace_rejected():
    gray = Image.gray(np.zeros((2, 2)))
    with pytest.raises(InvalidColorspaceError):
        rgb_to_yiq(gray)
    with pytest.raises(InvalidColorspaceError):
        yiq_to_rgb(rgb1(0, 0, 0))
    with pytest.raises(InvalidColorspaceError):
        to_gray(rgb_to_yiq(rgb1(0.2, 0.3, 0.4)))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3)),
              elements=st.floats(0, 1, allow_nan=False)))
def test_yiq_roundtrip_identity(px):
    img = Image.rgb(px)
    yiq = rgb_to_yiq(img)
    assert yiq.shape == img.shape
    back = yiq_to_rgb(yiq)
    np.testing.assert_allclose(back.pixels, px, atol=1e-5)


def test_to_gray():
    np.testing.assert_allclose(to_gray(rgb1(0.5, 0.5, 0.5)).pixels, 0.5)
    assert to_gray(rgb1(0, 1, 0)).pixels[0, 0, 0] == pytest.approx(0.587)
    g = Image.gray(np.random.default_rng(0).random((4, 5)))
    assert to_gray(g) is g
    assert to_rgb(g).channels == 3


def test_histogram_counts():
    img = Image.gray(np.array([[0.0, 1.0], [1.0, 128 / 255]]))
    h = histogram(img)
    assert h.total == 4 == h.counts.sum()
    assert h.counts[0] == 1 and h.counts[255] == 2 and h.counts[128] == 1


def asymmetric(h=40, w=40):
    ys, xs = np.mgrid[0:h, 0:w]
    return Image.gray((0.3 * np.sin(xs * 0.37) + 0.2 * np.cos(ys * 0.21 + xs * 0.05) + 0.5 + 0.0002 * xs * ys) / 1.6)


def brute_patch(plane, kp, side):
    """Loop-based bilinear sampler written independently of extract_patch."""
    out = np.zeros((side, side))
    c, s = math.cos(kp.orientation), math.sin(kp.orientation)
    for v in range(side):
        for u in range(side):
            du = (u - side // 2) * kp.scale
            dv = (v - side // 2) * kp.scale
            x = kp.x + c * du - s * dv
            y = kp.y + s * du + c * dv
            x0, y0 = int(math.floor(x)), int(math.floor(y))
            fx, fy = x - x0, y - y0
            acc = 0.0
            for yy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
                for xx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
                    if wy * wx:
                        acc += wy * wx * plane[yy, xx]
            out[v, u] = acc
    return out


def test_patch_constant_image():
    img = Image.gray(np.full((40, 40), 0.42))
    p = extract_patch(img, Keypoint(20.3, 19.7, 1.1, 0.7), 16)
    np.testing.assert_allclose(p, 0.42, atol=1e-12)


def test_patch_axis_aligned_is_crop():
    img = asymmetric()
    p = extract_patch(img, Keypoint(20, 18, 1.0, 0.0), 16)
    np.testing.assert_array_equal(p, img.plane(0)[10:26, 12:28])


def test_patch_matches_brute_force_sampler():
    img = asymmetric()
    kp = Keypoint(19.4, 21.2, 0.8, 0.6)
    np.testing.assert_allclose(extract_patch(img, kp, 15), brute_patch(img.plane(0), kp, 15), atol=1e-12)


def test_patch_rotation_by_90_degrees():
    img = asymmetric()
    side = 9
    p0 = extract_patch(img, Keypoint(20, 20, 1.0, 0.0), side)
    p90 = extract_patch(img, Keypoint(20, 20, 1.0, math.pi / 2), side)
    np.testing.assert_allclose(p90, brute_patch(img.plane(0), Keypoint(20, 20, 1.0, math.pi / 2), side), atol=1e-12)
    # sampling along the rotated frame turns the patch a quarter turn
    np.testing.assert_allclose(p90, np.rot90(p0, 1), atol=1e-12)


def test_patch_out_of_bounds():
    img = asymmetric()
    with pytest.raises(OutOfBoundsError):
        extract_patch(img, Keypoint(3, 20, 1.0, 0.0), 16)
    with pytest.raises(OutOfBoundsError):
        extract_patch(img, Keypoint(20, 20, 3.0, 0.0), 16)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 8), st.integers(0, 8), st.floats(0, 2 * math.pi), st.floats(0.5, 1.2))
def test_patch_translation_equivariant(dx, dy, theta, scale):
    base = asymmetric(60, 60).plane(0)
    big = np.zeros((70, 70))
    big[dy : dy + 60, dx : dx + 60] = base
    p1 = extract_patch(Image.gray(base), Keypoint(30.25, 29.5, scale, theta), 16)
    p2 = extract_patch(Image.gray(big), Keypoint(30.25 + dx, 29.5 + dy, scale, theta), 16)
    np.testing.assert_allclose(p1, p2, atol=1e-12)


def test_png_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    levels = rng.integers(0, 256, size=(7, 9)) / 255.0
    g = Image.gray(levels)
    assert load_png(save_png(g, tmp_path / "g.png")) == g
    rgb = Image.rgb(rng.integers(0, 256, size=(5, 4, 3)) / 255.0)
    back = load_png(save_png(rgb, tmp_path / "c.png"))
    assert back.colorspace == "RGB"
    np.testing.assert_array_equal(back.pixels, rgb.pixels)
    assert load_png(tmp_path / "g.png").colorspace == GRAY
