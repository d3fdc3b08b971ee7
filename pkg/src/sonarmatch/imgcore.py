"""Image values, color conversion, histograms and oriented patch sampling.

Pixels are float64 arrays of shape (H, W, C) on the canonical [0, 1] range.
8-bit files are scaled by 1/255 on load and rounded on save.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DimensionMismatchError, InvalidColorspaceError, OutOfBoundsError

RGB = "RGB"
GRAY = "GRAY"
YIQ = "YIQ"
_CHANNELS = {RGB: 3, GRAY: 1, YIQ: 3}

# NTSC constants, rows produce Y, I, Q
RGB_TO_YIQ = np.array(
    [
        [0.299, 0.587, 0.114],
        [0.596, -0.274, -0.322],
        [0.211, -0.523, 0.312],
    ]
)
YIQ_TO_RGB = np.linalg.inv(RGB_TO_YIQ)
_YIQ_LIMITS = np.array([[0.0, 1.0], [-0.596, 0.596], [-0.523, 0.523]])
_RANGE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Image:
    pixels: np.ndarray
    colorspace: str = GRAY

    def __post_init__(self):
        if self.colorspace not in _CHANNELS:
            raise InvalidColorspaceError(f"unknown colorspace {self.colorspace!r}")
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise DimensionMismatchError(f"expected an HxWxC array, got shape {px.shape}")
        if px.shape[2] != _CHANNELS[self.colorspace]:
            raise DimensionMismatchError(
                f"{self.colorspace} image needs {_CHANNELS[self.colorspace]} channels, got {px.shape[2]}"
            )
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite pixels")
        if self.colorspace == YIQ:
            lo, hi = _YIQ_LIMITS[:, 0], _YIQ_LIMITS[:, 1]
        else:
            lo, hi = 0.0, 1.0
        if np.any(px < lo - _RANGE_TOL) or np.any(px > hi + _RANGE_TOL):
            raise ValueError(f"pixel values outside the valid {self.colorspace} range")
        px = px.copy()
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    def plane(self, c: int = 0) -> np.ndarray:
        return self.pixels[:, :, c]

    @classmethod
    def gray(cls, array) -> "Image":
        return cls(np.asarray(array, dtype=np.float64), GRAY)

    @classmethod
    def rgb(cls, array) -> "Image":
        return cls(np.asarray(array, dtype=np.float64), RGB)

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.colorspace == other.colorspace and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


def _require(img: Image, *spaces: str):
    if img.colorspace not in spaces:
        raise InvalidColorspaceError(f"expected {'/'.join(spaces)} image, got {img.colorspace}")


def rgb_to_yiq(img: Image) -> Image:
    _require(img, RGB)
    return Image(img.pixels @ RGB_TO_YIQ.T, YIQ)


def yiq_to_rgb(img: Image) -> Image:
    _require(img, YIQ)
    return Image(np.clip(img.pixels @ YIQ_TO_RGB.T, 0.0, 1.0), RGB)


def to_gray(img: Image) -> Image:
    """Luma of an RGB image (the Y row of the YIQ matrix); GRAY passes through."""
    _require(img, RGB, GRAY)
    if img.colorspace == GRAY:
        return img
    px = img.pixels
    y = px @ RGB_TO_YIQ[0]
    # neutral pixels map to their own value (the weights sum to one)
    neutral = (px[:, :, 0] == px[:, :, 1]) & (px[:, :, 1] == px[:, :, 2])
    y = np.where(neutral, px[:, :, 0], y)
    return Image(np.clip(y, 0.0, 1.0)[:, :, None], GRAY)


def to_rgb(img: Image) -> Image:
    """Replicate a single-channel image into three identical RGB channels."""
    _require(img, RGB, GRAY)
    if img.colorspace == RGB:
        return img
    return Image(np.repeat(img.pixels, 3, axis=2), RGB)


def require_same_shape(a: Image, b: Image):
    if a.pixels.shape != b.pixels.shape:
        raise DimensionMismatchError(f"image shapes differ: {a.pixels.shape} vs {b.pixels.shape}")


@dataclass(frozen=True)
class Histogram:
    bins: int
    counts: np.ndarray = field(repr=False)
    total: int

    def probabilities(self) -> np.ndarray:
        return self.counts / self.total


def histogram(img: Image, bins: int = 256) -> Histogram:
    """Histogram of a GRAY image; value v lands in bin round(v * (bins - 1))."""
    _require(img, GRAY)
    idx = np.clip(np.rint(img.pixels.ravel() * (bins - 1)), 0, bins - 1).astype(np.int64)
    counts = np.bincount(idx, minlength=bins)
    return Histogram(bins=bins, counts=counts, total=int(counts.sum()))


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float = 1.0
    orientation: float = 0.0
    response: float = 0.0

    def to_dict(self) -> dict:
        return {
            "x": self.x,
            "y": self.y,
            "scale": self.scale,
            "orientation": self.orientation,
            "response": self.response,
        }


def patch_grid(kp: Keypoint, side: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample coordinates (xs, ys) of the oriented patch around ``kp``.

    Offsets run from -side//2 to side - 1 - side//2 pixels, so an axis-aligned
    unit-scale keypoint at an integer position samples the pixel grid exactly.
    """
    off = (np.arange(side) - side // 2) * kp.scale
    du, dv = np.meshgrid(off, off)
    c, s = math.cos(kp.orientation), math.sin(kp.orientation)
    xs = kp.x + c * du - s * dv
    ys = kp.y + s * du + c * dv
    return xs, ys


def patch_in_bounds(shape: tuple[int, int], kp: Keypoint, side: int) -> bool:
    xs, ys = patch_grid(kp, side)
    h, w = shape
    eps = 1e-9
    return bool(
        xs.min() >= -eps and ys.min() >= -eps and xs.max() <= w - 1 + eps and ys.max() <= h - 1 + eps
    )


def bilinear(plane: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    xs = np.clip(xs, 0.0, w - 1)
    ys = np.clip(ys, 0.0, h - 1)
    x0 = np.minimum(np.floor(xs).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = plane[y0, x0] * (1 - fx) + plane[y0, x1] * fx
    bot = plane[y1, x0] * (1 - fx) + plane[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def extract_patch(img: Image, kp: Keypoint, side: int = 32) -> np.ndarray:
    """Bilinear ``side``x``side`` patch centred on ``kp``, canonically oriented.

    Raises OutOfBoundsError when any sample falls outside the image.
    """
    _require(img, GRAY)
    if not patch_in_bounds(img.shape, kp, side):
        raise OutOfBoundsError(f"patch support of {kp} leaves the {img.height}x{img.width} image")
    xs, ys = patch_grid(kp, side)
    return np.clip(bilinear(img.plane(0), xs, ys), 0.0, 1.0)


def load_png(path) -> Image:
    with PILImage.open(path) as im:
        if im.mode in ("L", "LA", "1", "I;16"):
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            return Image(arr[:, :, None], GRAY)
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return Image(arr, RGB)


def to_uint8(img: Image) -> np.ndarray:
    if img.colorspace == YIQ:
        img = yiq_to_rgb(img)
    arr = np.rint(np.clip(img.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    return arr[:, :, 0] if img.colorspace == GRAY else arr


def save_png(img: Image, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(img)).save(path, format="PNG")
    return path
