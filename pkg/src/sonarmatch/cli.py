"""Command line entry point: ``sonarmatch <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .descriptor import TrainConfig, load_weights
from .detect_match import DETECTORS, MatchConfig, draw_matches, match_images
from .errors import ConfigError, SonarMatchError, StageError
from .features import build_extractor
from .imgcore import load_png, save_png, to_gray
from .pipeline import PipelineConfig, compare_methods, evaluate_styles, train_descriptor_experiment, usme
from .synthdata import (
    TripletParams,
    gen_optical_style,
    gen_patch_triplets,
    gen_sonar_pair,
    load_scenario,
    save_triplets,
    write_pair,
)
from .transfer import TransferConfig, run_transfer

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("sonarmatch")


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2))
    return path


def _build(cls, data: dict, what: str):
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {what} config: {exc}") from exc


def _out(args, default="out") -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- subcommands


def cmd_transfer(args) -> int:
    data = _read_json(args.config)
    tdata = dict(data.get("transfer", data))
    for key, val in (("mode", args.mode), ("alpha", args.alpha), ("beta", args.beta),
                     ("num_iterations", args.iterations), ("step_size", args.step_size), ("seed", args.seed)):
        if val is not None:
            tdata[key] = val
    if args.color_prematch:
        tdata["color_prematch"] = True
    cfg = _build(TransferConfig, tdata, "transfer")
    content_path = args.content or data.get("content")
    if content_path is None:
        raise ConfigError("transfer needs --content")
    content = load_png(content_path)
    style_path = args.style or data.get("style")
    style = load_png(style_path) if style_path else gen_optical_style(cfg.seed, content.shape)
    extractor = build_extractor(data.get("extractor"))
    try:
        res = run_transfer(content, style, extractor, cfg)
    except SonarMatchError as exc:
        raise StageError("transfer", exc) from exc
    out = _out(args)
    img_path = save_png(res.image, out / "generated.png")
    _write_json(out / "trace.json", {"config": cfg.to_dict(), "trace": res.trace})
    print(json.dumps({"image": str(img_path), "initial_loss": res.initial_loss, "final_loss": res.final_loss}))
    return EXIT_OK


def cmd_match(args) -> int:
    data = _read_json(args.config)
    mdata = dict(data.get("match", {}))
    if args.seed is not None:
        mdata["seed"] = args.seed
    cfg = _build(MatchConfig, mdata, "match")
    a_path, b_path = args.image_a or data.get("image_a"), args.image_b or data.get("image_b")
    if not a_path or not b_path:
        raise ConfigError("match needs --image-a and --image-b")
    detector = args.detector or data.get("detector", "dog")
    if detector not in DETECTORS:
        raise ConfigError(f"unknown detector {detector!r}")
    weights = args.weights or data.get("descriptor_weights")
    img_a, img_b = to_gray(load_png(a_path)), to_gray(load_png(b_path))
    net = load_weights(weights) if weights else None
    repeats = args.repeats or data.get("repeats", 10)
    try:
        rep = match_images(img_a, img_b, detector, net, cfg, repeats)
    except SonarMatchError as exc:
        raise StageError("match", exc) from exc
    out = _out(args)
    d = rep.to_dict(f"{Path(a_path).stem}|{Path(b_path).stem}", detector, "tfeat" if net else "raw-patch", "raw",
                    include_matches=True)
    _write_json(out / "match_report.json", d)
    draw_matches(img_a, img_b, rep, out / "matches.png")
    print(json.dumps({k: d[k] for k in ("n_inliers", "n_matches", "pocm", "runtime_seconds_mean")}))
    return EXIT_OK


def cmd_train(args) -> int:
    data = _read_json(args.config)
    tdata = dict(data.get("train", {}))
    for key, val in (("epochs", args.epochs), ("loss", args.loss), ("learning_rate", args.lr),
                     ("batch_size", args.batch_size), ("seed", args.seed)):
        if val is not None:
            tdata[key] = val
    cfg = _build(TrainConfig, tdata, "train")
    out = _out(args)
    try:
        _, report = train_descriptor_experiment(
            n_train=args.n_triplets or data.get("n_triplets", 2000),
            n_held_out=args.held_out if args.held_out is not None else data.get("held_out", 500),
            train_cfg=cfg,
            n_pairs=data.get("n_pairs", 4),
            speckle_strength=data.get("speckle_strength", 0.2),
            weights_out=out / "descriptor.tfw",
        )
    except SonarMatchError as exc:
        raise StageError("train", exc) from exc
    _write_json(out / "train_report.json", report.to_dict())
    print(json.dumps({"weights": report.weights, "untrained": report.untrained, "trained": report.trained}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    data = _read_json(args.config)
    ref = args.reference or data.get("reference")
    generated = dict(data.get("generated", {}))
    for item in args.generated or []:
        name, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--generated expects NAME=PATH, got {item!r}")
        generated[name] = path
    if not ref or not generated:
        raise ConfigError("evaluate needs --reference and at least one --generated NAME=PATH")
    reference = load_png(ref)
    images = {name: load_png(p) for name, p in generated.items()}
    try:
        table = evaluate_styles(reference, images)
    except SonarMatchError as exc:
        raise StageError("evaluate", exc) from exc
    out = _out(args)
    _write_json(out / "quality_table.json", {"reference": ref, "rows": table})
    print(json.dumps(table))
    return EXIT_OK


def cmd_synth(args) -> int:
    name = args.scenario or (args.config if args.config else None)
    if name is None:
        raise ConfigError("synth needs --scenario NAME|PATH or --config PATH")
    params = load_scenario(name)
    if args.seed is not None:
        params = replace(params, seed=args.seed)
    pair = gen_sonar_pair(params)
    out = _out(args)
    result = write_pair(pair, out, params.name or "pair")
    if args.triplets:
        ts = gen_patch_triplets([pair], args.triplets, TripletParams(seed=params.seed))
        result["triplets"] = str(save_triplets(ts, out / "triplets"))
    print(json.dumps(result))
    return EXIT_OK


def _pipeline_config(args) -> PipelineConfig:
    if args.config is None and args.scenario is None:
        raise ConfigError("give --config PATH|NAME or --scenario NAME")
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig(scenario=args.scenario)
    updates = {}
    if args.scenario is not None and args.config is not None:
        updates["scenario"] = args.scenario
    if args.out is not None:
        updates["output_dir"] = args.out
    if args.repeats is not None:
        updates["repeats"] = args.repeats
    if args.weights is not None:
        updates["descriptor_weights"] = args.weights
    if args.detector is not None:
        updates["detector"] = args.detector
    try:
        cfg = replace(cfg, **updates)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _summary(report) -> list:
    keys = ("condition", "n_inliers", "n_matches", "pocm", "runtime_seconds_mean")
    return [{k: row[k] for k in keys} for row in report.rows]


def cmd_pipeline(args) -> int:
    report = usme(_pipeline_config(args))
    print(json.dumps({"report": report.artifacts.get("report"), "rows": _summary(report)}))
    return EXIT_OK


def cmd_compare(args) -> int:
    report = compare_methods(_pipeline_config(args))
    print(json.dumps({"report": report.artifacts.get("report"), "rows": _summary(report)}))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _common(p):
    p.add_argument("--config", help="JSON config file (pipeline/compare also accept a bundled config name)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--repeats", type=int, help="runs averaged for the runtime figure")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sonarmatch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("transfer", help="style transfer of one content image")
    _common(p)
    p.add_argument("--content", help="content (sonar) PNG")
    p.add_argument("--style", help="style PNG; a synthetic optical texture when omitted")
    p.add_argument("--mode", choices=["full", "luminance_only"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--color-prematch", action="store_true", help="match the style colour statistics to the content first")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("match", help="match two images and report n_INLs, POCM and RT")
    _common(p)
    p.add_argument("--image-a")
    p.add_argument("--image-b")
    p.add_argument("--detector", choices=sorted(DETECTORS))
    p.add_argument("--weights", help="TFW1 descriptor weights; raw-patch baseline when omitted")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("train", help="train the patch descriptor on synthetic triplets")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--loss", choices=["margin", "ratio"])
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n-triplets", type=int, help="training triplets (default 2000)")
    p.add_argument("--held-out", type=int, help="held-out triplets (default 500)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="quality table of generated images against a reference")
    _common(p)
    p.add_argument("--reference")
    p.add_argument("--generated", action="append", metavar="NAME=PATH")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="write a synthetic pair with ground truth")
    _common(p)
    p.add_argument("--scenario", help="bundled scenario name or scenario JSON path")
    p.add_argument("--triplets", type=int, default=0, help="also write this many patch triplets")
    p.set_defaults(func=cmd_synth)

    for name, fn, text in (("pipeline", cmd_pipeline, "run USME on one pair"),
                           ("compare", cmd_compare, "run the six-condition comparison grid")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--scenario", help="bundled scenario name or scenario JSON path")
        p.add_argument("--weights", help="TFW1 descriptor weights")
        p.add_argument("--detector", choices=sorted(DETECTORS))
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except OSError as exc:
        print(f"config error: unreadable input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SonarMatchError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
