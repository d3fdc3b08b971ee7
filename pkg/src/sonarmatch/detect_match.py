"""Keypoint detection, cross-checked descriptor matching and RANSAC homography filtering."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter, minimum_filter
from scipy.spatial.distance import cdist

from .errors import ContractViolation, ImageTooSmallError, InsufficientDataError
from .imgcore import Image, Keypoint, extract_patch, patch_in_bounds, to_gray

PATCH_SIDE = 32


@dataclass
class DogParams:
    n_octaves: int = 4
    scales_per_octave: int = 3
    sigma0: float = 1.6
    contrast_threshold: float = 0.01
    edge_ratio: float = 10.0
    max_keypoints: int = 500


@dataclass
class CornerParams:
    sigma_d: float = 1.0
    sigma_i: float = 2.0
    k: float = 0.04
    rel_threshold: float = 0.01
    nms_radius: int = 4
    patch_scale: float = 1.0
    orientation_radius: int = 15
    max_keypoints: int = 500


@dataclass
class MatchConfig:
    cross_check: bool = True
    ratio_test: float | None = None
    ransac_threshold: float = 3.0
    ransac_max_iters: int = 2000
    ransac_confidence: float = 0.995
    seed: int = 0

    def __post_init__(self):
        if self.ransac_threshold <= 0:
            raise ValueError("ransac_threshold must be > 0")
        if not 0.0 < self.ransac_confidence < 1.0:
            raise ValueError("ransac_confidence must lie in (0, 1)")


@dataclass(frozen=True)
class Correspondence:
    index_a: int
    index_b: int
    distance: float
    inlier: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------- detectors


def _gray_plane(img) -> np.ndarray:
    if isinstance(img, Image):
        return to_gray(img).plane(0)
    return np.asarray(img, dtype=np.float64)


def _dominant_orientation(plane, x, y, sigma, n_bins=36):
    radius = int(round(3 * 1.5 * sigma))
    h, w = plane.shape
    xi, yi = int(round(x)), int(round(y))
    x0, x1 = max(1, xi - radius), min(w - 2, xi + radius)
    y0, y1 = max(1, yi - radius), min(h - 2, yi + radius)
    if x1 <= x0 or y1 <= y0:
        return 0.0
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    gx = plane[ys, xs + 1] - plane[ys, xs - 1]
    gy = plane[ys + 1, xs] - plane[ys - 1, xs]
    mag = np.hypot(gx, gy) * np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2 * (1.5 * sigma) ** 2))
    ang = np.arctan2(gy, gx) % (2 * np.pi)
    hist = np.bincount(
        (np.floor(ang / (2 * np.pi) * n_bins).astype(int) % n_bins).ravel(), weights=mag.ravel(), minlength=n_bins
    )
    if hist.max() <= 0:
        return 0.0
    k = int(np.argmax(hist))
    left, right = hist[(k - 1) % n_bins], hist[(k + 1) % n_bins]
    denom = left - 2 * hist[k] + right
    offset = 0.5 * (left - right) / denom if denom != 0 else 0.0
    return float(((k + 0.5 + offset) / n_bins * 2 * np.pi) % (2 * np.pi))


def _parabola_offset(m, c, p):
    denom = m - 2 * c + p
    if denom == 0:
        return 0.0
    return float(np.clip(0.5 * (m - p) / denom, -0.5, 0.5))


def detect_dog(img, params: DogParams | None = None) -> list[Keypoint]:
    """Difference-of-Gaussians scale-space extrema with dominant-gradient orientation."""
    params = params or DogParams()
    plane = _gray_plane(img)
    if min(plane.shape) < 32:
        raise ImageTooSmallError(f"DoG detection needs at least 32x32, got {plane.shape}")
    s = params.scales_per_octave
    sig = [params.sigma0 * 2 ** (i / s) for i in range(s + 3)]
    base = gaussian_filter(plane, math.sqrt(max(params.sigma0**2 - 0.25, 0.0)), mode="reflect")
    threshold = params.contrast_threshold
    found = []
    for octave in range(params.n_octaves):
        if min(base.shape) < 16:
            break
        gauss = [base] + [
            gaussian_filter(base, math.sqrt(sig[i] ** 2 - sig[0] ** 2), mode="reflect") for i in range(1, s + 3)
        ]
        dog = np.stack([gauss[i + 1] - gauss[i] for i in range(s + 2)])
        is_max = dog == maximum_filter(dog, size=3, mode="nearest")
        is_min = dog == minimum_filter(dog, size=3, mode="nearest")
        strong = np.abs(dog) > threshold
        cand = (is_max | is_min) & strong
        cand[0] = cand[-1] = False
        cand[:, :1, :] = cand[:, -1:, :] = False
        cand[:, :, :1] = cand[:, :, -1:] = False
        step = 2**octave
        for k, r, c in zip(*np.nonzero(cand)):
            d = dog[k]
            dxx = d[r, c + 1] - 2 * d[r, c] + d[r, c - 1]
            dyy = d[r + 1, c] - 2 * d[r, c] + d[r - 1, c]
            dxy = 0.25 * (d[r + 1, c + 1] - d[r + 1, c - 1] - d[r - 1, c + 1] + d[r - 1, c - 1])
            det = dxx * dyy - dxy**2
            tr = dxx + dyy
            if det <= 0 or tr * tr * params.edge_ratio >= (params.edge_ratio + 1) ** 2 * det:
                continue
            ox = _parabola_offset(d[r, c - 1], d[r, c], d[r, c + 1])
            oy = _parabola_offset(d[r - 1, c], d[r, c], d[r + 1, c])
            x = (c + ox) * step
            y = (r + oy) * step
            sigma = sig[k] * step
            theta = _dominant_orientation(gauss[k], c + ox, r + oy, sig[k])
            found.append(Keypoint(float(x), float(y), float(sigma / params.sigma0), theta, float(d[r, c])))
        base = gauss[s][::2, ::2]
    found.sort(key=lambda kp: (-abs(kp.response), kp.y, kp.x))
    return found[: params.max_keypoints]


def harris_response(plane: np.ndarray, params: CornerParams) -> np.ndarray:
    ix = gaussian_filter(plane, params.sigma_d, order=(0, 1), mode="reflect")
    iy = gaussian_filter(plane, params.sigma_d, order=(1, 0), mode="reflect")
    sxx = gaussian_filter(ix * ix, params.sigma_i, mode="reflect")
    syy = gaussian_filter(iy * iy, params.sigma_i, mode="reflect")
    sxy = gaussian_filter(ix * iy, params.sigma_i, mode="reflect")
    return sxx * syy - sxy**2 - params.k * (sxx + syy) ** 2


def _centroid_orientation(plane, x, y, radius):
    h, w = plane.shape
    ys, xs = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    disk = (xs**2 + ys**2 <= radius**2) & (y + ys >= 0) & (y + ys < h) & (x + xs >= 0) & (x + xs < w)
    vals = plane[np.clip(y + ys, 0, h - 1), np.clip(x + xs, 0, w - 1)]
    vals = np.where(disk, vals - vals[disk].mean(), 0.0)
    return float(math.atan2((ys * vals).sum(), (xs * vals).sum()) % (2 * math.pi))


def detect_corner(img, params: CornerParams | None = None) -> list[Keypoint]:
    """Harris corners with non-maximum suppression and intensity-centroid orientation."""
    params = params or CornerParams()
    plane = _gray_plane(img)
    if min(plane.shape) < 16:
        raise ImageTooSmallError(f"corner detection needs at least 16x16, got {plane.shape}")
    resp = harris_response(plane, params)
    peak = resp.max()
    if peak <= 1e-12:
        return []
    size = 2 * params.nms_radius + 1
    local_max = resp == maximum_filter(resp, size=size, mode="constant", cval=-np.inf)
    cand = local_max & (resp > params.rel_threshold * peak)
    rows, cols = np.nonzero(cand)
    order = np.lexsort((cols, rows, -resp[rows, cols]))[: params.max_keypoints]
    return [
        Keypoint(
            float(cols[i]),
            float(rows[i]),
            params.patch_scale,
            _centroid_orientation(plane, cols[i], rows[i], params.orientation_radius),
            float(resp[rows[i], cols[i]]),
        )
        for i in order
    ]


DETECTORS = {"dog": detect_dog, "corner": detect_corner}


def detect(img, detector: str, params=None) -> list[Keypoint]:
    try:
        fn = DETECTORS[detector]
    except KeyError:
        raise ValueError(f"unknown detector {detector!r}; choose from {sorted(DETECTORS)}") from None
    return fn(img, params)


# ---------------------------------------------------------------- matching


def match_crosscheck(desc_a, desc_b, cross_check: bool = True, ratio: float | None = None) -> list[Correspondence]:
    """Mutual nearest neighbours under L2; ties resolve to the lowest index."""
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        return []
    d = cdist(a, b)
    fwd = np.argmin(d, axis=1)
    back = np.argmin(d, axis=0)
    out = []
    for i, j in enumerate(fwd):
        if cross_check and back[j] != i:
            continue
        if ratio is not None and len(b) > 1:
            second = np.partition(d[i], 1)[1]
            if d[i, j] >= ratio * second:
                continue
        out.append(Correspondence(int(i), int(j), float(d[i, j])))
    return out


def raw_patch_descriptor(patches) -> np.ndarray:
    """Baseline descriptor: the zero-mean unit-norm flattened patch."""
    p = np.asarray(patches, dtype=np.float64).reshape(len(patches), -1)
    p = p - p.mean(axis=1, keepdims=True)
    n = np.linalg.norm(p, axis=1, keepdims=True)
    return np.divide(p, n, out=np.zeros_like(p), where=n > 0)


# ---------------------------------------------------------------- homography


def _normalizer(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def fit_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Normalised DLT homography mapping src -> dst (least squares for > 4 points)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    t1, t2 = _normalizer(src), _normalizer(dst)
    s = apply_homography(t1, src)
    d = apply_homography(t2, dst)
    n = len(s)
    a = np.zeros((2 * n, 9))
    a[0::2, 0:2] = s
    a[0::2, 2] = 1
    a[0::2, 6:8] = -d[:, :1] * s
    a[0::2, 8] = -d[:, 0]
    a[1::2, 3:5] = s
    a[1::2, 5] = 1
    a[1::2, 6:8] = -d[:, 1:] * s
    a[1::2, 8] = -d[:, 1]
    _, _, vt = np.linalg.svd(a)
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t2) @ hn @ t1
    if abs(h[2, 2]) < 1e-12:
        return None
    return h / h[2, 2]


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    hom = np.hstack([pts, np.ones((len(pts), 1))]) @ h.T
    with np.errstate(divide="ignore", invalid="ignore"):
        return hom[:, :2] / hom[:, 2:3]


def symmetric_transfer_error(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """sqrt(|dst - H src|^2 + |src - H^-1 dst|^2) per point; inf where undefined."""
    try:
        hinv = np.linalg.inv(h)
    except np.linalg.LinAlgError:
        return np.full(len(src), np.inf)
    fwd = apply_homography(h, src) - dst
    bwd = apply_homography(hinv, dst) - src
    err = np.sqrt((fwd**2).sum(axis=1) + (bwd**2).sum(axis=1))
    return np.where(np.isfinite(err), err, np.inf)


def _collinear(p, eps=1e-6):
    for i in range(4):
        q = np.delete(p, i, axis=0)
        area = (q[1, 0] - q[0, 0]) * (q[2, 1] - q[0, 1]) - (q[1, 1] - q[0, 1]) * (q[2, 0] - q[0, 0])
        if abs(area) < eps:
            return True
    return False


@dataclass
class RansacResult:
    homography: np.ndarray | None
    inliers: np.ndarray
    consensus: bool
    iterations: int

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


MIN_CONSENSUS = 5


def _required_iterations(inlier_ratio, confidence, cap):
    if inlier_ratio <= 0:
        return cap
    if inlier_ratio >= 1:
        return 1
    denom = math.log(1 - inlier_ratio**4)
    if denom == 0:
        return cap
    return min(cap, int(math.ceil(math.log(1 - confidence) / denom)))


def ransac_homography(corrs, kps_a, kps_b, cfg: MatchConfig | None = None) -> RansacResult:
    """4-point RANSAC with adaptive stopping and a least-squares refit on the consensus set.

    Fewer than MIN_CONSENSUS inliers (a bare minimal sample) is reported as no consensus.
    """
    cfg = cfg or MatchConfig()
    if len(corrs) < 4:
        raise InsufficientDataError(f"RANSAC needs at least 4 correspondences, got {len(corrs)}")
    src = np.array([[kps_a[c.index_a].x, kps_a[c.index_a].y] for c in corrs], dtype=np.float64)
    dst = np.array([[kps_b[c.index_b].x, kps_b[c.index_b].y] for c in corrs], dtype=np.float64)
    return ransac_points(src, dst, cfg)


def ransac_points(src: np.ndarray, dst: np.ndarray, cfg: MatchConfig) -> RansacResult:
    n = len(src)
    rng = np.random.default_rng(cfg.seed)
    best_h, best_in, best_err = None, np.zeros(n, bool), np.inf
    needed = cfg.ransac_max_iters
    it = 0
    while it < needed:
        it += 1
        idx = rng.choice(n, 4, replace=False)
        if _collinear(src[idx]) or _collinear(dst[idx]):
            continue
        h = fit_homography(src[idx], dst[idx])
        if h is None:
            continue
        err = symmetric_transfer_error(h, src, dst)
        inl = err < cfg.ransac_threshold
        count = int(inl.sum())
        score = float(err[inl].sum())
        if count > best_in.sum() or (count == best_in.sum() and count > 0 and score < best_err):
            best_h, best_in, best_err = h, inl, score
            needed = max(it, _required_iterations(count / n, cfg.ransac_confidence, cfg.ransac_max_iters))
    if best_h is None:
        return RansacResult(None, np.zeros(n, bool), False, it)
    # refit on the consensus set while it does not shrink
    for _ in range(5):
        if best_in.sum() < 4:
            break
        h = fit_homography(src[best_in], dst[best_in])
        if h is None:
            break
        inl = symmetric_transfer_error(h, src, dst) < cfg.ransac_threshold
        if inl.sum() < best_in.sum():
            break
        converged = np.array_equal(inl, best_in)
        best_h, best_in = h, inl
        if converged:
            break
    consensus = int(best_in.sum()) >= MIN_CONSENSUS
    return RansacResult(best_h, best_in, consensus, it)


def pocm(n_inliers: int, n_matches: int) -> float:
    """Proportion of correct matches: inliers over candidate matches (0 with no matches)."""
    if n_inliers > n_matches:
        raise ContractViolation(f"{n_inliers} inliers exceed {n_matches} matches")
    if n_matches == 0:
        return 0.0
    return n_inliers / n_matches


# ---------------------------------------------------------------- full matcher


@dataclass
class MatchReport:
    n_inliers: int = 0
    n_matches: int = 0
    pocm: float = 0.0
    runtime_seconds: float = 0.0
    runtime_runs: list = field(default_factory=list)
    homography: np.ndarray | None = None
    correspondences: list = field(default_factory=list)
    keypoints_a: list = field(default_factory=list)
    keypoints_b: list = field(default_factory=list)
    n_candidates: int = 0  # one-way nearest-neighbour matches before the cross-check
    consensus: bool = False
    reason: str | None = None

    def to_dict(self, pair_id=None, detector=None, descriptor=None, preprocessing=None, include_matches=False):
        d = {
            "pair_id": pair_id,
            "detector": detector,
            "descriptor": descriptor,
            "preprocessing": preprocessing,
            "n_inliers": self.n_inliers,
            "n_matches": self.n_matches,
            "n_matches_before_crosscheck": self.n_candidates,
            "pocm": self.pocm,
            "runtime_seconds_mean": self.runtime_seconds,
            "runtime_seconds_runs": list(self.runtime_runs),
            "homography": None if self.homography is None else [float(v) for v in self.homography.ravel()],
        }
        if self.reason:
            d["reason"] = self.reason
        if include_matches:
            d["keypoints_a"] = [kp.to_dict() for kp in self.keypoints_a]
            d["keypoints_b"] = [kp.to_dict() for kp in self.keypoints_b]
            d["correspondences"] = [c.to_dict() for c in self.correspondences]
        return d


def describe_keypoints(plane_img: Image, kps, net=None) -> np.ndarray:
    patches = np.stack([extract_patch(plane_img, kp, PATCH_SIDE) for kp in kps])
    if net is None:
        return raw_patch_descriptor(patches)
    from .descriptor import describe_batch

    return describe_batch(net, patches)


def _match_once(img_a, img_b, detector, net, cfg, params):
    ga, gb = to_gray(img_a), to_gray(img_b)
    kps_a = [kp for kp in detect(ga, detector, params) if patch_in_bounds(ga.shape, kp, PATCH_SIDE)]
    kps_b = [kp for kp in detect(gb, detector, params) if patch_in_bounds(gb.shape, kp, PATCH_SIDE)]
    report = MatchReport(keypoints_a=kps_a, keypoints_b=kps_b)
    if len(kps_a) < 4 or len(kps_b) < 4:
        report.reason = f"too few keypoints ({len(kps_a)}, {len(kps_b)})"
        return report
    da = describe_keypoints(ga, kps_a, net)
    db = describe_keypoints(gb, kps_b, net)
    corrs = match_crosscheck(da, db, cross_check=cfg.cross_check, ratio=cfg.ratio_test)
    report.n_candidates = len(kps_a)
    report.n_matches = len(corrs)
    if len(corrs) < 4:
        report.correspondences = corrs
        report.reason = f"too few matches ({len(corrs)})"
        return report
    res = ransac_homography(corrs, kps_a, kps_b, cfg)
    report.consensus = res.consensus
    if res.consensus:
        report.homography = res.homography
        report.correspondences = [replace(c, inlier=bool(f)) for c, f in zip(corrs, res.inliers)]
        report.n_inliers = res.n_inliers
    else:
        report.correspondences = corrs
        report.reason = "no consensus"
    report.pocm = pocm(report.n_inliers, report.n_matches)
    return report


def match_images(img_a, img_b, detector: str = "dog", net=None, cfg: MatchConfig | None = None,
                 repeats: int = 10, params=None) -> MatchReport:
    """Detect, describe, cross-check and RANSAC-filter; RT is averaged over ``repeats`` runs.

    ``net=None`` selects the raw normalised-patch baseline descriptor.
    """
    cfg = cfg or MatchConfig()
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    runs = []
    report = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        report = _match_once(img_a, img_b, detector, net, cfg, params)
        runs.append(time.perf_counter() - t0)
    report.runtime_runs = runs
    report.runtime_seconds = float(np.mean(runs))
    return report


def draw_matches(img_a: Image, img_b: Image, report: MatchReport, path, inliers_only: bool = True):
    """Side-by-side overlay PNG with a line per (inlier) correspondence."""
    from PIL import Image as PILImage
    from PIL import ImageDraw

    from .imgcore import to_rgb, to_uint8

    a = to_uint8(to_rgb(to_gray(img_a)))
    b = to_uint8(to_rgb(to_gray(img_b)))
    h = max(a.shape[0], b.shape[0])
    canvas = np.zeros((h, a.shape[1] + b.shape[1], 3), np.uint8)
    canvas[: a.shape[0], : a.shape[1]] = a
    canvas[: b.shape[0], a.shape[1] :] = b
    pil = PILImage.fromarray(canvas)
    draw = ImageDraw.Draw(pil)
    for c in report.correspondences:
        if inliers_only and not c.inlier:
            continue
        ka, kb = report.keypoints_a[c.index_a], report.keypoints_b[c.index_b]
        color = (0, 255, 0) if c.inlier else (255, 0, 0)
        draw.line([(ka.x, ka.y), (kb.x + a.shape[1], kb.y)], fill=color, width=1)
    pil.save(path, format="PNG")
    return path
