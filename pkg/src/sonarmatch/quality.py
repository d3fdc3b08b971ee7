"""Generated-image quality indexes and the 10-point style scoring scheme."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ImageTooSmallError, InsufficientDataError
from .imgcore import GRAY, Image, histogram, require_same_shape, to_gray

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
POINTS = 10
INDEX_NAMES = ("psnr", "ssim", "cosin", "entropy")


@dataclass(frozen=True)
class QualityIndexes:
    psnr: float
    ssim: float
    cosin: float
    entropy: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.psnr, self.ssim, self.cosin, self.entropy)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StyleScore:
    per_index_points: tuple[int, int, int, int]
    total: int
    tied: bool = False


def psnr(reference: Image, test: Image) -> float:
    require_same_shape(reference, test)
    mse = float(np.mean((reference.pixels - test.pixels) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = len(g) // 2
    out = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[half : x.shape[0] - half, half : x.shape[1] - half]


def ssim(reference: Image, test: Image) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows."""
    require_same_shape(reference, test)
    x = to_gray(reference).plane(0)
    y = to_gray(test).plane(0)
    if min(x.shape) < SSIM_WINDOW:
        raise ImageTooSmallError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    g = gaussian_window()
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x**2
    syy = _filter_valid(y * y, g) - mu_y**2
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


def cosine_similarity(reference: Image, test: Image) -> float:
    require_same_shape(reference, test)
    a = reference.pixels.ravel()
    b = test.pixels.ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def entropy(img: Image, bins: int = 256) -> float:
    """Shannon entropy in bits of the grey-level histogram."""
    if img.colorspace != GRAY:
        img = to_gray(img)
    p = histogram(img, bins).probabilities()
    p = p[p > 0]
    return float(max(0.0, -np.sum(p * np.log2(p))))


def quality_indexes(reference: Image, generated: Image, bins: int = 256) -> QualityIndexes:
    """All four indexes of ``generated`` against the raw ``reference`` image."""
    if reference.colorspace != generated.colorspace:
        reference, generated = to_gray(reference), to_gray(generated)
    return QualityIndexes(
        psnr=psnr(reference, generated),
        ssim=ssim(reference, generated),
        cosin=cosine_similarity(reference, generated),
        entropy=entropy(generated, bins),
    )


def score_styles(indexes_per_style) -> list[StyleScore]:
    """Award 10 points per index to the style with the highest value.

    Every index counts as higher-is-better. Exact ties give the points to all
    tied styles and set ``tied`` on them.
    """
    rows = [q.as_tuple() if isinstance(q, QualityIndexes) else tuple(q) for q in indexes_per_style]
    if len(rows) < 2:
        raise InsufficientDataError("style scoring needs at least two competing styles")
    if any(len(r) != 4 for r in rows):
        raise InsufficientDataError("each style needs all four quality indexes")
    table = np.asarray(rows, dtype=np.float64)
    points = np.zeros(table.shape, dtype=int)
    tied = np.zeros(len(rows), dtype=bool)
    for k in range(4):
        best = table[:, k].max()
        winners = np.flatnonzero(table[:, k] == best)
        points[winners, k] = POINTS
        if len(winners) > 1:
            tied[winners] = True
    return [
        StyleScore(per_index_points=tuple(int(v) for v in points[i]), total=int(points[i].sum()), tied=bool(tied[i]))
        for i in range(len(rows))
    ]
