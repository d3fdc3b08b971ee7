"""Seeded synthetic sonar-like image pairs with ground-truth homographies, and patch triplets."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates, zoom

from .descriptor import Triplet
from .errors import ConfigError, ContractViolation, InsufficientLocationsError
from .imgcore import GRAY, RGB, Image, Keypoint, extract_patch, patch_in_bounds, save_png

PRESET_HOMOGRAPHIES = ("identity", "translate", "rotate_scale", "perspective")


def preset_homography(name: str, size=(256, 256)) -> np.ndarray:
    h, w = size
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    if name == "identity":
        return np.eye(3)
    if name == "translate":
        return np.array([[1.0, 0.0, 10.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    if name == "rotate_scale":
        a, s = math.radians(8.0), 1.05
        rot = np.array([[s * math.cos(a), -s * math.sin(a), 0], [s * math.sin(a), s * math.cos(a), 0], [0, 0, 1]])
        return _about(rot, cx, cy)
    if name == "perspective":
        a = math.radians(5.0)
        m = np.array([[math.cos(a), -math.sin(a), 6.0], [math.sin(a), math.cos(a), -4.0], [4e-4, -2e-4, 1.0]])
        return _about(m, cx, cy)
    raise ValueError(f"unknown homography preset {name!r}")


def _about(m, cx, cy):
    t = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1.0]])
    ti = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    out = t @ m @ ti
    return out / out[2, 2]


@dataclass
class ScenarioParams:
    seed: int = 0
    size: tuple = (256, 256)
    speckle_strength: float = 0.0
    shadow_count: int = 0
    brightness_shift: float = 0.0
    homography: object = "identity"  # preset name or 3x3 nested list
    blur_sigma: float = 0.0
    terrain_octaves: int = 5
    ridge_count: int = 6
    name: str = ""

    def __post_init__(self):
        self.size = tuple(int(v) for v in self.size)
        if self.size[0] < 64 or self.size[1] < 64:
            raise ValueError("scenario size must be at least 64x64")
        if self.speckle_strength < 0:
            raise ValueError("speckle_strength must be >= 0")

    def h_true(self) -> np.ndarray:
        if isinstance(self.homography, str):
            return preset_homography(self.homography, self.size)
        return np.asarray(self.homography, dtype=np.float64).reshape(3, 3)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size"] = list(self.size)
        if not isinstance(self.homography, str):
            d["homography"] = np.asarray(self.homography, dtype=float).reshape(3, 3).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioParams":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class GroundTruthPair:
    image_a: Image
    image_b: Image
    h_true: np.ndarray
    params: ScenarioParams | None = None


def value_noise(rng: np.random.Generator, size, octaves: int = 5, persistence: float = 0.55) -> np.ndarray:
    """Multi-octave value noise normalised to [0, 1]."""
    h, w = size
    out = np.zeros((h, w))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = 4 * 2**o
        grid = rng.random((cells + 1, cells + 1))
        layer = zoom(grid, ((h + 1) / (cells + 1), (w + 1) / (cells + 1)), order=3, mode="reflect")[:h, :w]
        out += amp * layer
        total += amp
        amp *= persistence
    out /= total
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)


def _capsule_distance(xs, ys, p0, p1):
    d = p1 - p0
    t = np.clip(((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / max(d @ d, 1e-12), 0, 1)
    return np.hypot(xs - (p0[0] + t * d[0]), ys - (p0[1] + t * d[1]))


def render_terrain(params: ScenarioParams, rng: np.random.Generator) -> np.ndarray:
    """Seafloor-like backscatter: value-noise texture, bright ridges with acoustic shadows."""
    h, w = params.size
    base = 0.25 + 0.45 * value_noise(rng, (h, w), params.terrain_octaves)
    grain = gaussian_filter(rng.random((h, w)), 0.8)
    base += 0.04 * (grain - grain.mean()) / (grain.std() + 1e-12)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(params.ridge_count):
        c = rng.uniform([0.1 * w, 0.1 * h], [0.9 * w, 0.9 * h])
        r = rng.uniform(3.0, 8.0)
        bump = np.exp(-((xs - c[0]) ** 2 + (ys - c[1]) ** 2) / (2 * r**2))
        base += rng.uniform(0.25, 0.45) * bump
    # shadows: dark capsules cast away from the sensor track (the left edge)
    for _ in range(params.shadow_count):
        p0 = rng.uniform([0.1 * w, 0.1 * h], [0.75 * w, 0.9 * h])
        length = rng.uniform(0.08, 0.2) * w
        angle = rng.uniform(-0.3, 0.3)
        p1 = p0 + length * np.array([math.cos(angle), math.sin(angle)])
        width = rng.uniform(3.0, 7.0)
        ridge = np.exp(-(_capsule_distance(xs, ys, p0 - [width, 0], p0 - [width, 0]) ** 2) / (2 * (width * 0.7) ** 2))
        base += 0.35 * ridge
        dist = _capsule_distance(xs, ys, p0, p1)
        shade = 1.0 / (1.0 + np.exp((dist - width) / 1.0))
        base *= 1.0 - 0.8 * shade
    return np.clip(base, 0.0, 1.0)


def warp(plane: np.ndarray, h: np.ndarray, out_shape=None, cval: float = 0.0) -> np.ndarray:
    """out(x) = plane(H^-1 x), bilinear; samples outside the source get ``cval``."""
    out_shape = out_shape or plane.shape
    hinv = np.linalg.inv(h)
    ys, xs = np.mgrid[0 : out_shape[0], 0 : out_shape[1]].astype(np.float64)
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])
    src = hinv @ pts
    sx = (src[0] / src[2]).reshape(out_shape)
    sy = (src[1] / src[2]).reshape(out_shape)
    return map_coordinates(plane, [sy, sx], order=1, mode="constant", cval=cval)


def speckle_field(rng: np.random.Generator, shape) -> np.ndarray:
    """Mean-1 exponential speckle: (g1^2 + g2^2) / 2 with standard normal g."""
    g = rng.standard_normal((2,) + tuple(shape))
    return 0.5 * (g[0] ** 2 + g[1] ** 2)


def degrade(plane: np.ndarray, params: ScenarioParams, rng: np.random.Generator) -> np.ndarray:
    noise = speckle_field(rng, plane.shape)
    out = plane * (1.0 + params.speckle_strength * (noise - 1.0))
    if params.blur_sigma > 0:
        out = gaussian_filter(out, params.blur_sigma, mode="reflect")
    return np.clip(out + params.brightness_shift, 0.0, 1.0)


def gen_sonar_pair(params: ScenarioParams) -> GroundTruthPair:
    h_true = params.h_true()
    if abs(np.linalg.det(h_true)) < 1e-12:
        raise ContractViolation("ground-truth homography is not invertible")
    rng = np.random.default_rng(params.seed)
    a = render_terrain(params, rng)
    b = degrade(warp(a, h_true), params, np.random.default_rng([params.seed, 1]))
    return GroundTruthPair(Image(a[:, :, None], GRAY), Image(b[:, :, None], GRAY), h_true, params)


TRAINING_HOMOGRAPHIES = ("rotate_scale", "perspective", "translate", "rotate_scale")


def training_pairs(n_pairs: int = 4, base_seed: int = 10, speckle_strength: float = 0.2) -> list[GroundTruthPair]:
    """Pairs for descriptor training; seeds stay clear of the bundled evaluation scenarios."""
    out = []
    for k in range(n_pairs):
        params = ScenarioParams(
            seed=base_seed + k,
            speckle_strength=speckle_strength,
            shadow_count=2,
            homography=TRAINING_HOMOGRAPHIES[k % len(TRAINING_HOMOGRAPHIES)],
            blur_sigma=0.5,
            brightness_shift=0.05,
            name=f"train_{base_seed + k}",
        )
        out.append(gen_sonar_pair(params))
    return out


def gen_optical_style(seed: int = 0, size=(256, 256)) -> Image:
    """Colourful fine-grained texture standing in for an optical style photograph."""
    rng = np.random.default_rng(seed)
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    channels = []
    for c in range(3):
        n = value_noise(rng, size, 6, 0.7)
        freq = rng.uniform(0.15, 0.35)
        stripes = 0.5 + 0.5 * np.sin(freq * (xs * math.cos(c) + ys * math.sin(c)) + 6 * n)
        channels.append(0.6 * n + 0.4 * stripes)
    rgb = np.stack(channels, axis=2)
    rgb = (rgb - rgb.min()) / (rgb.max() - rgb.min())
    return Image(rgb, RGB)


# ---------------------------------------------------------------- triplets


@dataclass
class TripletParams:
    side: int = 32
    min_separation: float = 16.0
    seed: int = 0
    max_attempts: int = 200


@dataclass
class TripletSet:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    records: list = field(default_factory=list)  # per-triplet geometry for checks and export

    def __len__(self):
        return len(self.anchors)

    def __getitem__(self, i) -> Triplet:
        return Triplet(self.anchors[i], self.positives[i], self.negatives[i])

    def split(self, n_first: int):
        return (
            TripletSet(self.anchors[:n_first], self.positives[:n_first], self.negatives[:n_first], self.records[:n_first]),
            TripletSet(self.anchors[n_first:], self.positives[n_first:], self.negatives[n_first:], self.records[n_first:]),
        )


def local_frame(h: np.ndarray, x: float, y: float):
    """(scale, rotation) of the homography's local linearisation at (x, y)."""
    eps = 0.5
    p = np.array([[x, y], [x + eps, y], [x, y + eps]])
    hom = np.hstack([p, np.ones((3, 1))]) @ h.T
    q = hom[:, :2] / hom[:, 2:]
    jac = np.column_stack([(q[1] - q[0]) / eps, (q[2] - q[0]) / eps])
    return math.sqrt(abs(np.linalg.det(jac))), math.atan2(jac[1, 0], jac[0, 0])


def map_point(h: np.ndarray, x: float, y: float) -> tuple[float, float]:
    v = h @ np.array([x, y, 1.0])
    return float(v[0] / v[2]), float(v[1] / v[2])


def gen_patch_triplets(pairs, n: int, params: TripletParams | None = None) -> TripletSet:
    """Anchor from image_a, positive at the ground-truth location in image_b, negative elsewhere in image_b."""
    params = params or TripletParams()
    pairs = list(pairs)
    if not pairs:
        raise InsufficientLocationsError("no image pairs given")
    rng = np.random.default_rng(params.seed)
    side = params.side
    margin = side * 0.75
    for pair in pairs:
        h, w = pair.image_a.shape
        if params.min_separation >= math.hypot(h, w):
            raise InsufficientLocationsError(
                f"negative separation {params.min_separation} exceeds the {h}x{w} image diagonal"
            )
    anchors, positives, negatives, records = [], [], [], []
    attempts = 0
    while len(anchors) < n:
        attempts += 1
        if attempts > params.max_attempts * max(n, 1):
            raise InsufficientLocationsError(f"found only {len(anchors)} of {n} valid triplet locations")
        k = int(rng.integers(len(pairs)))
        pair = pairs[k]
        hgt, wid = pair.image_a.shape
        x, y = rng.uniform(margin, wid - 1 - margin), rng.uniform(margin, hgt - 1 - margin)
        theta = float(rng.uniform(0, 2 * math.pi))
        kp_a = Keypoint(x, y, 1.0, theta)
        if not patch_in_bounds(pair.image_a.shape, kp_a, side):
            continue
        bx, by = map_point(pair.h_true, x, y)
        s, rot = local_frame(pair.h_true, x, y)
        kp_p = Keypoint(bx, by, s, (theta + rot) % (2 * math.pi))
        if not patch_in_bounds(pair.image_b.shape, kp_p, side):
            continue
        hinv = np.linalg.inv(pair.h_true)
        nx, ny = rng.uniform(margin, wid - 1 - margin), rng.uniform(margin, hgt - 1 - margin)
        gx, gy = map_point(hinv, nx, ny)
        if math.hypot(gx - x, gy - y) < params.min_separation:
            continue
        kp_n = Keypoint(nx, ny, 1.0, float(rng.uniform(0, 2 * math.pi)))
        if not patch_in_bounds(pair.image_b.shape, kp_n, side):
            continue
        anchors.append(extract_patch(pair.image_a, kp_a, side))
        positives.append(extract_patch(pair.image_b, kp_p, side))
        negatives.append(extract_patch(pair.image_b, kp_n, side))
        records.append({"pair": k, "anchor": kp_a.to_dict(), "positive": kp_p.to_dict(), "negative": kp_n.to_dict()})
    return TripletSet(
        np.asarray(anchors, np.float32), np.asarray(positives, np.float32), np.asarray(negatives, np.float32), records
    )


def save_triplets(triplets: TripletSet, directory) -> Path:
    """Patch PNGs (a/p/n per triplet) plus index.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for i in range(len(triplets)):
        entry = {"id": i}
        for role, arr in (("a", triplets.anchors[i]), ("p", triplets.positives[i]), ("n", triplets.negatives[i])):
            name = f"{i:06d}_{role}.png"
            save_png(Image(np.clip(arr.astype(np.float64), 0, 1)[:, :, None], GRAY), directory / name)
            entry[role] = name
        if triplets.records:
            entry.update(triplets.records[i])
        index.append(entry)
    (directory / "index.json").write_text(json.dumps({"count": len(index), "triplets": index}, indent=1))
    return directory


def load_triplets(directory) -> TripletSet:
    from .imgcore import load_png

    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())["triplets"]
    parts = {r: [] for r in "apn"}
    for entry in index:
        for r in "apn":
            parts[r].append(load_png(directory / entry[r]).plane(0))
    return TripletSet(*(np.asarray(parts[r], np.float32) for r in "apn"), records=index)


# ---------------------------------------------------------------- bundled scenarios


def scenario_names() -> list[str]:
    files = resources.files("sonarmatch").joinpath("scenarios")
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def load_scenario(name_or_path) -> ScenarioParams:
    path = Path(str(name_or_path))
    if path.suffix == ".json" and path.exists():
        data = json.loads(path.read_text())
    else:
        ref = resources.files("sonarmatch").joinpath("scenarios", f"{name_or_path}.json")
        if not ref.is_file():
            raise ConfigError(f"unknown scenario {name_or_path!r}; bundled: {scenario_names()}")
        data = json.loads(ref.read_text())
    params = dict(data.get("scenario", data))
    params.setdefault("name", data.get("name", path.stem))
    return ScenarioParams.from_dict(params)


def write_pair(pair: GroundTruthPair, out_dir, stem: str = "pair") -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pa = save_png(pair.image_a, out_dir / f"{stem}_a.png")
    pb = save_png(pair.image_b, out_dir / f"{stem}_b.png")
    gt = {
        "h_true": [float(v) for v in pair.h_true.ravel()],
        "params": pair.params.to_dict() if pair.params else None,
    }
    gt_path = out_dir / f"{stem}_gt.json"
    gt_path.write_text(json.dumps(gt, indent=2))
    return {"image_a": str(pa), "image_b": str(pb), "ground_truth": str(gt_path)}
