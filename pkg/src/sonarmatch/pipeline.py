"""USME orchestration: transfer both sonar images, match them, map results back, report.

Also hosts the six-condition comparison grid and the style quality table.
"""

from __future__ import annotations

import json
import logging
import time
from importlib import resources
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .descriptor import (
    DescriptorNet,
    TrainConfig,
    evaluate_descriptor,
    load_weights,
    save_weights,
    train,
    triplets_to_pairs,
)
from .detect_match import DETECTORS, MatchConfig, MatchReport, draw_matches, match_images
from .errors import ConfigError, ContractViolation, SonarMatchError, StageError
from .features import build_extractor
from .imgcore import Image, load_png, save_png, to_gray
from .quality import quality_indexes, score_styles
from .synthdata import (
    TripletParams,
    gen_optical_style,
    gen_patch_triplets,
    gen_sonar_pair,
    load_scenario,
    training_pairs,
)
from .transfer import TransferConfig, TransferResult, run_transfer

log = logging.getLogger(__name__)

BASELINE_DESCRIPTOR = "raw-patch"

# (condition label, preprocessing, detector, learned descriptor?)
CONDITIONS = (
    ("raw+dog", "raw", "dog", False),
    ("raw+corner", "raw", "corner", False),
    ("tran+dog", "transferred", "dog", False),
    ("tran+corner", "transferred", "corner", False),
    ("ours1", "transferred", "dog", True),
    ("ours2", "transferred", "corner", True),
)


@dataclass
class PipelineConfig:
    """Inputs come either from two PNG paths or from a synthetic scenario (bundled name or JSON path).

    ``style_c=None`` uses the seeded synthetic optical texture as the style image.
    """

    sonar_a: str | None = None
    sonar_b: str | None = None
    scenario: str | None = None
    style_c: str | None = None
    style_candidates: list = field(default_factory=list)
    auto_select_style: bool = False
    transfer: TransferConfig = field(default_factory=TransferConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    detector: str = "dog"
    descriptor_weights: str | None = None
    extractor: dict = field(default_factory=lambda: {"kind": "tiny"})
    repeats: int = 10
    output_dir: str = "out"
    seed: int = 0
    dump_matches: bool = True
    save_artifacts: bool = True

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.detector not in DETECTORS:
            raise ConfigError(f"unknown detector {self.detector!r}; choose from {sorted(DETECTORS)}")
        if (self.sonar_a is None) != (self.sonar_b is None):
            raise ConfigError("sonar_a and sonar_b must be given together")
        if self.sonar_a is None and self.scenario is None:
            raise ConfigError("give either sonar_a/sonar_b or a scenario")

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            d["transfer"] = TransferConfig(**d.get("transfer", {}))
            d["match"] = MatchConfig(**d.get("match", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if base_dir is not None:
            for key in ("sonar_a", "sonar_b", "style_c", "descriptor_weights"):
                if d.get(key):
                    d[key] = _resolve(d[key], base_dir)
            d["style_candidates"] = [_resolve(p, base_dir) for p in d.get("style_candidates", [])]
            if (d.get("scenario") or "").endswith(".json"):
                d["scenario"] = _resolve(d["scenario"], base_dir)
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        """Load a JSON config file, or a bundled config by name (see ``bundled_configs``)."""
        path = Path(str(path))
        if not path.exists() and str(path) in bundled_configs():
            ref = resources.files("sonarmatch").joinpath("configs", f"{path}.json")
            return cls.from_dict(json.loads(ref.read_text()))
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(data, base_dir=path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transfer"] = self.transfer.to_dict()
        d["match"] = asdict(self.match)
        return d

    def check_paths(self):
        """Input files must exist before any stage runs."""
        paths = [self.sonar_a, self.sonar_b, self.style_c, self.descriptor_weights, *self.style_candidates]
        missing = [p for p in paths if p is not None and not Path(p).is_file()]
        if missing:
            raise ConfigError(f"input files not found: {missing}")
        if self.sonar_a is None:
            try:
                load_scenario(self.scenario)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"bad scenario {self.scenario!r}: {exc}") from exc

    def with_seed(self, seed: int) -> "PipelineConfig":
        """One seed drives transfer, RANSAC and the untrained descriptor."""
        return replace(
            self, seed=seed, transfer=replace(self.transfer, seed=seed), match=replace(self.match, seed=seed)
        )


def bundled_configs() -> list[str]:
    files = resources.files("sonarmatch").joinpath("configs")
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def _resolve(p, base_dir) -> str:
    p = Path(p)
    return str(p if p.is_absolute() else Path(base_dir) / p)


@dataclass
class ExperimentReport:
    rows: list = field(default_factory=list)
    quality: list = field(default_factory=list)
    traces: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    version: str = __version__
    pair_id: str = ""
    style_selection: dict | None = None
    ground_truth: list | None = None
    transfer_seconds: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    match_reports: dict = field(default_factory=dict, repr=False)  # condition -> MatchReport

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("match_reports")
        return d

    def row(self, condition: str) -> dict:
        for r in self.rows:
            if r["condition"] == condition:
                return r
        raise KeyError(condition)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


# ---------------------------------------------------------------- stages


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (SonarMatchError, ValueError, OSError, KeyError, RuntimeError) as exc:
        raise StageError(name, exc) from exc


def load_inputs(cfg: PipelineConfig):
    """(image_a, image_b, pair_id, h_true or None)."""
    if cfg.sonar_a is not None:
        a, b = to_gray(load_png(cfg.sonar_a)), to_gray(load_png(cfg.sonar_b))
        return a, b, f"{Path(cfg.sonar_a).stem}|{Path(cfg.sonar_b).stem}", None
    params = load_scenario(cfg.scenario)
    pair = gen_sonar_pair(params)
    return pair.image_a, pair.image_b, params.name or str(cfg.scenario), pair.h_true


def load_style(path, seed: int, size) -> Image:
    if path is None:
        return gen_optical_style(seed, size)
    return load_png(path)


def load_descriptor(cfg: PipelineConfig):
    """(net, label); falls back to a seeded untrained net when no weights are configured."""
    if cfg.descriptor_weights is None:
        log.warning("no descriptor weights configured; using an untrained net seeded with %d", cfg.seed)
        return DescriptorNet(seed=cfg.seed), "tfeat-untrained"
    return load_weights(cfg.descriptor_weights), "tfeat"


def map_correspondences(corrs, generated_dims, raw_dims):
    """Carry correspondences from A'/B' onto A/B.

    Transfer starts from the content image and never resamples it, so the map is
    the identity; the dimension check is what guards that assumption.
    """
    if tuple(generated_dims) != tuple(raw_dims):
        raise ContractViolation(f"generated image is {tuple(generated_dims)} but raw image is {tuple(raw_dims)}")
    return list(corrs)


def _check_keypoints_in_bounds(report: MatchReport, dims_a, dims_b):
    for kps, (h, w) in ((report.keypoints_a, dims_a), (report.keypoints_b, dims_b)):
        for kp in kps:
            if not (0 <= kp.x < w and 0 <= kp.y < h):
                raise ContractViolation(f"keypoint ({kp.x}, {kp.y}) outside raw bounds {h}x{w}")


def transfer_one(content: Image, style: Image, extractor, tcfg: TransferConfig) -> tuple[TransferResult, float]:
    t0 = time.perf_counter()
    res = run_transfer(content, style, extractor, tcfg)
    return res, time.perf_counter() - t0


def _gt_error(report: MatchReport, h_true):
    """Mean forward reprojection error (px) of the RANSAC inliers under the true homography."""
    if h_true is None or not report.consensus:
        return None
    src = np.array([[report.keypoints_a[c.index_a].x, report.keypoints_a[c.index_a].y]
                    for c in report.correspondences if c.inlier])
    dst = np.array([[report.keypoints_b[c.index_b].x, report.keypoints_b[c.index_b].y]
                    for c in report.correspondences if c.inlier])
    proj = np.hstack([src, np.ones((len(src), 1))]) @ h_true.T
    proj = proj[:, :2] / proj[:, 2:]
    return float(np.linalg.norm(proj - dst, axis=1).mean())


def _row(report: MatchReport, condition, preprocessing, detector, descriptor, cfg, pair_id, h_true):
    d = report.to_dict(pair_id, detector, descriptor, preprocessing, include_matches=cfg.dump_matches)
    d["condition"] = condition
    d["seed"] = cfg.seed
    d["gt_inlier_error_px"] = _gt_error(report, h_true)
    return d


def _quality_table(reference: Image, generated: dict) -> list:
    """Style quality table: one row per style, indexes to 6 significant digits, plus total score."""
    names = list(generated)
    idx = [quality_indexes(reference, generated[n]) for n in names]
    scores = score_styles(idx) if len(idx) >= 2 else None
    rows = []
    for k, name in enumerate(names):
        row = {"style": name, **{key: float(f"{v:.6g}") for key, v in idx[k].to_dict().items()}}
        if scores is not None:
            row["total"] = scores[k].total
            row["points"] = list(scores[k].per_index_points)
            row["tied"] = scores[k].tied
        rows.append(row)
    return rows


def _write_artifacts(out: Path, images: dict, overlays: dict, report: ExperimentReport):
    out.mkdir(parents=True, exist_ok=True)
    for name, img in images.items():
        report.artifacts[name] = str(save_png(img, out / f"{name}.png"))
    for name, (a, b, rep) in overlays.items():
        report.artifacts[f"matches_{name}"] = str(draw_matches(a, b, rep, out / f"matches_{name}.png"))


def _select_style(cfg, image_a, extractor):
    """Transfer A under every candidate style and keep the highest-scoring one (first on ties)."""
    candidates = ([cfg.style_c] if cfg.style_c else []) + list(cfg.style_candidates)
    if not cfg.auto_select_style or len(candidates) < 2:
        path = cfg.style_c if cfg.style_c else (candidates[0] if candidates else None)
        return path, None, None
    generated, results = {}, {}
    for path in candidates:
        style = load_style(path, cfg.seed, image_a.shape)
        res, secs = transfer_one(image_a, style, extractor, cfg.transfer)
        generated[path], results[path] = res.image, (res, secs)
    table = _quality_table(image_a, generated)
    best = max(range(len(table)), key=lambda k: (table[k]["total"], -k))
    chosen = candidates[best]
    log.info("auto-selected style %s (score %d)", chosen, table[best]["total"])
    selection = {"mode": "auto", "chosen": chosen, "candidates": candidates}
    return chosen, selection | {"table": table}, results[chosen]


def _transfer_pair(cfg, image_a, image_b, extractor, report):
    style_path, selection, cached_a = _stage("style", _select_style, cfg, image_a, extractor)
    style = _stage("style", load_style, style_path, cfg.seed, image_a.shape)
    report.style_selection = selection or {"mode": "explicit", "chosen": style_path or f"synthetic:{cfg.seed}"}
    if cached_a is None:
        res_a, secs_a = _stage("transfer", transfer_one, image_a, style, extractor, cfg.transfer)
    else:
        res_a, secs_a = cached_a
    res_b, secs_b = _stage("transfer", transfer_one, image_b, style, extractor, cfg.transfer)
    report.traces = {"a": res_a.trace, "b": res_b.trace}
    report.transfer_seconds = {"a": secs_a, "b": secs_b}
    if selection is None:
        report.quality = _quality_table(image_a, {report.style_selection["chosen"]: res_a.image})
    else:
        report.quality = selection.pop("table")
    return res_a.image, res_b.image


def usme(cfg: PipelineConfig) -> ExperimentReport:
    """Transfer A and B toward style C, match A' and B' with the learned descriptor, map back onto A and B."""
    cfg.check_paths()
    report = ExperimentReport(config=cfg.to_dict())
    image_a, image_b, pair_id, h_true = _stage("load", load_inputs, cfg)
    report.pair_id = pair_id
    report.ground_truth = None if h_true is None else [float(v) for v in h_true.ravel()]
    extractor = _stage("extractor", build_extractor, cfg.extractor)
    gen_a, gen_b = _transfer_pair(cfg, image_a, image_b, extractor, report)
    net, label = _stage("descriptor", load_descriptor, cfg)
    rep = _stage("match", match_images, gen_a, gen_b, cfg.detector, net, cfg.match, cfg.repeats)
    rep.correspondences = _stage("map", map_correspondences, rep.correspondences, gen_a.shape, image_a.shape)
    _stage("map", map_correspondences, [], gen_b.shape, image_b.shape)
    _stage("map", _check_keypoints_in_bounds, rep, image_a.shape, image_b.shape)
    condition = "ours1" if cfg.detector == "dog" else "ours2"
    report.rows.append(_row(rep, condition, "transferred", cfg.detector, label, cfg, pair_id, h_true))
    report.match_reports[condition] = rep
    if cfg.save_artifacts:
        out = Path(cfg.output_dir)
        _stage("write", _write_artifacts, out,
               {"generated_a": gen_a, "generated_b": gen_b},
               {condition: (image_a, image_b, rep)}, report)
        _stage("write", _write_run_files, out, cfg, report)
    return report


def compare_methods(cfg: PipelineConfig) -> ExperimentReport:
    """The six-condition grid: {raw, transferred} x {dog, corner} with the baseline descriptor, plus ours1/ours2."""
    cfg.check_paths()
    report = ExperimentReport(config=cfg.to_dict())
    image_a, image_b, pair_id, h_true = _stage("load", load_inputs, cfg)
    report.pair_id = pair_id
    report.ground_truth = None if h_true is None else [float(v) for v in h_true.ravel()]
    extractor = _stage("extractor", build_extractor, cfg.extractor)
    gen_a, gen_b = _transfer_pair(cfg, image_a, image_b, extractor, report)
    net, label = _stage("descriptor", load_descriptor, cfg)
    inputs = {"raw": (image_a, image_b), "transferred": (gen_a, gen_b)}
    overlays = {}
    for condition, prep, detector, learned in CONDITIONS:
        a, b = inputs[prep]
        rep = _stage("match", match_images, a, b, detector, net if learned else None, cfg.match, cfg.repeats)
        rep.correspondences = _stage("map", map_correspondences, rep.correspondences, a.shape, image_a.shape)
        _stage("map", _check_keypoints_in_bounds, rep, image_a.shape, image_b.shape)
        descriptor = label if learned else BASELINE_DESCRIPTOR
        report.rows.append(_row(rep, condition, prep, detector, descriptor, cfg, pair_id, h_true))
        report.match_reports[condition] = rep
        overlays[condition] = (image_a, image_b, rep)
    if cfg.save_artifacts:
        out = Path(cfg.output_dir)
        _stage("write", _write_artifacts, out, {"generated_a": gen_a, "generated_b": gen_b}, overlays, report)
        _stage("write", _write_run_files, out, cfg, report)
    return report


def _write_run_files(out: Path, cfg: PipelineConfig, report: ExperimentReport):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    report.artifacts["config"] = str(out / "config.resolved.json")
    report.artifacts["report"] = str(out / "report.json")
    report.save(out / "report.json")


def evaluate_styles(reference: Image, generated: dict) -> list:
    """Quality table for already generated images keyed by style name."""
    return _quality_table(reference, generated)


# ---------------------------------------------------------------- descriptor training experiment


@dataclass
class TrainingReport:
    config: dict
    n_train: int
    n_held_out: int
    history: dict
    untrained: dict
    trained: dict
    seconds: float
    weights: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def train_descriptor_experiment(n_train=2000, n_held_out=500, train_cfg: TrainConfig | None = None,
                                n_pairs=4, base_seed=10, speckle_strength=0.2, triplet_seed=0,
                                weights_out=None):
    """Generate seeded triplets, train a net and compare held-out metrics with its untrained start.

    Returns (trained net, TrainingReport).
    """
    train_cfg = train_cfg or TrainConfig()
    pairs = training_pairs(n_pairs, base_seed, speckle_strength)
    ts = gen_patch_triplets(pairs, n_train + n_held_out, TripletParams(seed=triplet_seed))
    train_set, held_out = ts.split(n_train)
    p1, p2, labels = triplets_to_pairs(held_out)
    net = DescriptorNet(seed=train_cfg.seed)
    before = evaluate_descriptor(net, p1, p2, labels)
    t0 = time.perf_counter()
    net, history = train(net, train_set, train_cfg)
    seconds = time.perf_counter() - t0
    after = evaluate_descriptor(net, p1, p2, labels)
    path = None
    if weights_out is not None:
        path = str(save_weights(net, weights_out))
    report = TrainingReport(
        config={**asdict(train_cfg), "n_pairs": n_pairs, "base_seed": base_seed,
                "speckle_strength": speckle_strength, "triplet_seed": triplet_seed},
        n_train=len(train_set),
        n_held_out=len(held_out),
        history={"epoch_loss": list(history.epoch_loss)},
        untrained=asdict(before),
        trained=asdict(after),
        seconds=seconds,
        weights=path,
    )
    return net, report
