import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sonarmatch.errors import DimensionMismatchError, ImageTooSmallError, InsufficientDataError
from sonarmatch.imgcore import Image
from sonarmatch.quality import (
    QualityIndexes,
    cosine_similarity,
    entropy,
    psnr,
    quality_indexes,
    score_styles,
    ssim,
)


def checkerboard(n=24, cell=3):
    ys, xs = np.mgrid[0:n, 0:n]
    return Image.gray(((xs // cell + ys // cell) % 2).astype(float) * 0.8 + 0.1)


def loop_mse(a, b):
    total = 0.0
    h, w, c = a.shape
    for i in range(h):
        for j in range(w):
            for k in range(c):
                total += (a[i, j, k] - b[i, j, k]) ** 2
    return total / (h * w * c)


def loop_ssim(x, y, size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    g1 = np.exp(-(r**2) / (2 * sigma**2))
    win = np.outer(g1, g1)
    win /= win.sum()
    vals = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            px = x[i : i + size, j : j + size]
            py = y[i : i + size, j : j + size]
            mx, my = (win * px).sum(), (win * py).sum()
            vx = (win * (px - mx) ** 2).sum()
            vy = (win * (py - my) ** 2).sum()
            cxy = (win * (px - mx) * (py - my)).sum()
            c1, c2 = 0.01**2, 0.03**2
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_psnr_identical_hits_cap():
    img = checkerboard()
    assert psnr(img, img) == 100.0


def test_psnr_one_level_step():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 255, size=(16, 16)) / 255.0
    value = psnr(Image.gray(a), Image.gray(a + 1 / 255))
    assert value == pytest.approx(10 * math.log10(255**2), abs=1e-6)
    assert value == pytest.approx(48.1308, abs=1e-4)


def test_psnr_checkerboard_vs_midgray_matches_loop():
    ref = checkerboard()
    mid = Image.gray(np.full((24, 24), 0.5))
    expected = 10 * math.log10(1.0 / loop_mse(ref.pixels, mid.pixels))
    assert psnr(ref, mid) == pytest.approx(expected, rel=1e-12)


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionMismatchError):
        psnr(Image.gray(np.zeros((4, 4))), Image.gray(np.zeros((4, 5))))


def test_psnr_decreases_with_noise_amplitude():
    rng = np.random.default_rng(3)
    base = rng.random((32, 32)) * 0.5 + 0.25
    noise = rng.uniform(-1, 1, size=base.shape)
    values = [psnr(Image.gray(base), Image.gray(base + a * noise)) for a in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_ssim_identity_and_constants():
    img = checkerboard()
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)
    c = Image.gray(np.full((16, 16), 0.5))
    assert ssim(c, c) == pytest.approx(1.0, abs=1e-12)


def test_ssim_negative_matches_windowed_oracle():
    ref = checkerboard(20, 2)
    neg = Image.gray(1.0 - ref.plane(0))
    expected = loop_ssim(ref.plane(0), neg.plane(0))
    assert ssim(ref, neg) == pytest.approx(expected, abs=1e-12)
    assert expected < 0


def test_ssim_random_pair_matches_oracle():
    rng = np.random.default_rng(5)
    a, b = rng.random((18, 15)), rng.random((18, 15))
    assert ssim(Image.gray(a), Image.gray(b)) == pytest.approx(loop_ssim(a, b), abs=1e-12)


def test_ssim_too_small():
    img = Image.gray(np.zeros((10, 30)))
    with pytest.raises(ImageTooSmallError):
        ssim(img, img)


@settings(max_examples=20, deadline=None)
@given(st.integers(11, 20), st.integers(11, 20), st.integers(0, 10_000))
def test_ssim_self_is_one(h, w, seed):
    img = Image.gray(np.random.default_rng(seed).random((h, w)))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_cosine_examples():
    rng = np.random.default_rng(1)
    a = rng.random((8, 8)) + 0.01
    assert cosine_similarity(Image.gray(a), Image.gray(a)) == pytest.approx(1.0)
    assert cosine_similarity(Image.gray(a), Image.gray(0.5 * a)) == pytest.approx(1.0)
    left = np.zeros((4, 4))
    left[:, :2] = 1
    assert cosine_similarity(Image.gray(left), Image.gray(1 - left)) == 0.0
    assert cosine_similarity(Image.gray(np.zeros((4, 4))), Image.gray(a[:4, :4])) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 1.0), st.integers(0, 1000))
def test_cosine_scale_invariant(c, seed):
    a = np.random.default_rng(seed).random((6, 7)) * 0.9 + 0.05
    assert cosine_similarity(Image.gray(a), Image.gray(c * a)) == pytest.approx(1.0, abs=1e-12)


def test_entropy_examples():
    assert entropy(Image.gray(np.full((5, 5), 0.3))) == 0.0
    levels = np.arange(256) / 255.0
    assert entropy(Image.gray(np.tile(levels, (4, 1)))) == pytest.approx(8.0)
    half = np.zeros((4, 4))
    half[:2] = 1.0
    assert entropy(Image.gray(half)) == pytest.approx(1.0)


def test_entropy_permutation_invariant():
    rng = np.random.default_rng(2)
    a = rng.integers(0, 256, size=(20, 20)) / 255.0
    shuffled = rng.permutation(a.ravel()).reshape(a.shape)
    assert entropy(Image.gray(a)) == entropy(Image.gray(shuffled))


@pytest.mark.parametrize(
    "style1, style2",
    [
        ((39.2581, 0.9928, 0.9886, 7.1929), (48.3461, 0.9986, 0.9995, 7.1475)),
        ((32.4056, 0.9622, 0.9611, 7.0228), (46.5058, 0.9876, 0.9883, 6.8857)),
        ((40.1019, 0.9877, 0.9771, 7.4279), (46.0319, 0.9950, 0.9978, 7.3700)),
    ],
)
def test_score_styles_published_rows(style1, style2):
    scores = score_styles([QualityIndexes(*style1), QualityIndexes(*style2)])
    assert [s.total for s in scores] == [10, 30]
    assert scores[0].per_index_points == (0, 0, 0, 10)
    assert not any(s.tied for s in scores)


def test_score_styles_tie():
    scores = score_styles([(30.0, 0.9, 0.9, 7.0), (30.0, 0.9, 0.9, 7.0)])
    assert [s.total for s in scores] == [40, 40]
    assert all(s.tied for s in scores)


def test_score_styles_needs_two():
    with pytest.raises(InsufficientDataError):
        score_styles([(1, 1, 1, 1)])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(*[st.floats(0, 50, allow_nan=False)] * 4), min_size=2, max_size=5, unique=True))
def test_score_styles_totals_sum_to_40_without_ties(rows):
    cols = list(zip(*rows))
    if any(col.count(max(col)) > 1 for col in cols):
        return
    assert sum(s.total for s in score_styles(rows)) == 40


def test_quality_indexes_bundle():
    a = checkerboard()
    q = quality_indexes(a, a)
    assert q.psnr == 100.0 and q.ssim == pytest.approx(1.0) and q.cosin == pytest.approx(1.0)
    assert q.entropy == pytest.approx(1.0)
