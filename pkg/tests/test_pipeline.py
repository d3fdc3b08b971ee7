import json

import numpy as np
import pytest

from sonarmatch.descriptor import DescriptorNet, TrainConfig, save_weights
from sonarmatch.detect_match import Correspondence, match_images
from sonarmatch.errors import ConfigError, ContractViolation, StageError
from sonarmatch.imgcore import save_png
from sonarmatch.pipeline import (
    CONDITIONS,
    PipelineConfig,
    bundled_configs,
    compare_methods,
    map_correspondences,
    train_descriptor_experiment,
    usme,
)
from sonarmatch.synthdata import gen_optical_style, gen_sonar_pair, load_scenario
from sonarmatch.transfer import TransferConfig

RT_KEYS = {"runtime_seconds_mean", "runtime_seconds_runs"}


def scenario_file(tmp_path, **overrides):
    data = {"seed": 21, "size": [128, 128], "homography": "translate", "speckle_strength": 0.1, "blur_sigma": 0.5}
    data.update(overrides)
    path = tmp_path / f"scen_{abs(hash(json.dumps(data, sort_keys=True)))}.json"
    path.write_text(json.dumps({"name": "small", "scenario": data}))
    return str(path)


def small_cfg(tmp_path, **kw):
    base = dict(
        scenario=kw.pop("scenario") if "scenario" in kw else scenario_file(tmp_path),
        transfer=TransferConfig(mode="luminance_only", beta=1e9, num_iterations=5),
        repeats=1,
        output_dir=str(tmp_path / "out"),
        save_artifacts=False,
    )
    base.update(kw)
    return PipelineConfig(**base)


def strip_rt(rows):
    return [{k: v for k, v in r.items() if k not in RT_KEYS} for r in rows]


def test_map_correspondences():
    corrs = [Correspondence(0, 3, 0.5, True), Correspondence(2, 1, 0.7, False)]
    assert map_correspondences(corrs, (256, 256), (256, 256)) == corrs
    assert map_correspondences([], (4, 4), (4, 4)) == []
    with pytest.raises(ContractViolation, match=r"\(256, 256\).*\(255, 256\)"):
        map_correspondences(corrs, (256, 256), (255, 256))


def test_config_validation():
    with pytest.raises(ConfigError):
        PipelineConfig(scenario="degraded_pair", repeats=0)
    with pytest.raises(ConfigError):
        PipelineConfig()
    with pytest.raises(ConfigError):
        PipelineConfig(sonar_a="a.png")
    with pytest.raises(ConfigError):
        PipelineConfig(scenario="degraded_pair", detector="sift")
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"scenario": "degraded_pair", "colour": 1})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"scenario": "degraded_pair", "transfer": {"mode": "sepia"}})


def test_config_roundtrip_and_bundled(tmp_path):
    assert set(bundled_configs()) == {"general_pair", "shadow_pair", "degraded_pair"}
    cfg = PipelineConfig.load("degraded_pair")
    assert cfg.transfer.mode == "luminance_only" and cfg.scenario == "degraded_pair"
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert PipelineConfig.load(path).to_dict() == cfg.to_dict()
    seeded = cfg.with_seed(5)
    assert seeded.transfer.seed == seeded.match.seed == seeded.seed == 5


def test_config_relative_paths_resolve(tmp_path):
    (tmp_path / "cfg").mkdir()
    path = tmp_path / "cfg" / "c.json"
    path.write_text(json.dumps({"sonar_a": "a.png", "sonar_b": "b.png"}))
    cfg = PipelineConfig.load(path)
    assert cfg.sonar_a == str(tmp_path / "cfg" / "a.png")
    with pytest.raises(ConfigError):
        usme(cfg)


def test_compare_has_six_complete_rows(tmp_path):
    report = compare_methods(small_cfg(tmp_path, save_artifacts=True))
    assert [r["condition"] for r in report.rows] == [c[0] for c in CONDITIONS]
    schema = {"pair_id", "detector", "descriptor", "preprocessing", "n_inliers", "n_matches", "pocm",
              "runtime_seconds_mean", "runtime_seconds_runs", "homography", "condition", "seed"}
    for row in report.rows:
        assert schema <= set(row)
        assert 0 <= row["pocm"] <= 1 and row["n_inliers"] <= row["n_matches"]
        assert row["seed"] == 0
    assert report.row("raw+dog")["descriptor"] == "raw-patch"
    assert report.row("ours2")["descriptor"] == "tfeat-untrained"
    assert report.quality and report.traces["a"] and report.version
    out = tmp_path / "out"
    saved = json.loads((out / "report.json").read_text())
    assert len(saved["rows"]) == 6
    assert (out / "config.resolved.json").exists() and (out / "generated_a.png").exists()
    assert (out / "matches_ours1.png").exists()


def test_transfer_disabled_rows_match_raw(tmp_path):
    cfg = small_cfg(tmp_path, transfer=TransferConfig(num_iterations=1, step_size=0.0))
    report = compare_methods(cfg)
    for det in ("dog", "corner"):
        raw, tran = strip_rt([report.row(f"raw+{det}"), report.row(f"tran+{det}")])
        raw.pop("preprocessing"), tran.pop("preprocessing")
        raw.pop("condition"), tran.pop("condition")
        assert raw == tran
    # the learned-descriptor row is the learned descriptor applied to the untouched images
    params = load_scenario(cfg.scenario)
    pair = gen_sonar_pair(params)
    direct = match_images(pair.image_a, pair.image_b, "dog", DescriptorNet(seed=0), cfg.match, 1)
    assert report.row("ours1")["n_inliers"] == direct.n_inliers
    assert report.row("ours1")["n_matches"] == direct.n_matches


def test_identity_pair_every_condition_near_perfect(tmp_path):
    cfg = small_cfg(tmp_path, scenario=scenario_file(tmp_path, homography="identity", speckle_strength=0.0,
                                                     blur_sigma=0.0, size=[256, 256]))
    report = compare_methods(cfg)
    for row in report.rows:
        assert row["pocm"] >= 0.99, row["condition"]


def test_usme_deterministic_and_in_bounds(tmp_path):
    cfg = small_cfg(tmp_path, detector="corner")
    r1, r2 = usme(cfg), usme(cfg)
    assert strip_rt(r1.rows) == strip_rt(r2.rows)
    assert r1.rows[0]["condition"] == "ours2"
    for kp in r1.rows[0]["keypoints_a"] + r1.rows[0]["keypoints_b"]:
        assert 0 <= kp["x"] < 128 and 0 <= kp["y"] < 128


def test_usme_with_weights_and_png_inputs(tmp_path):
    pair = gen_sonar_pair(load_scenario(scenario_file(tmp_path)))
    a = save_png(pair.image_a, tmp_path / "a.png")
    b = save_png(pair.image_b, tmp_path / "b.png")
    c = save_png(gen_optical_style(3, (64, 64)), tmp_path / "c.png")
    w = save_weights(DescriptorNet(seed=4), tmp_path / "w.tfw")
    cfg = small_cfg(tmp_path, scenario=None, sonar_a=str(a), sonar_b=str(b), style_c=str(c),
                    descriptor_weights=str(w))
    report = usme(cfg)
    assert report.rows[0]["descriptor"] == "tfeat"
    assert report.style_selection == {"mode": "explicit", "chosen": str(c)}
    assert report.ground_truth is None


def test_stage_error_names_stage(tmp_path):
    bad = tmp_path / "bad.tfw"
    bad.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(StageError) as err:
        usme(small_cfg(tmp_path, descriptor_weights=str(bad)))
    assert err.value.stage == "descriptor"


def test_auto_style_selection(tmp_path):
    pair = gen_sonar_pair(load_scenario(scenario_file(tmp_path)))
    s1 = save_png(gen_optical_style(1, (128, 128)), tmp_path / "s1.png")
    s2 = save_png(gen_optical_style(2, (128, 128)), tmp_path / "s2.png")
    cfg = small_cfg(tmp_path, style_c=str(s1), style_candidates=[str(s2)], auto_select_style=True)
    report = usme(cfg)
    sel = report.style_selection
    assert sel["mode"] == "auto" and sel["candidates"] == [str(s1), str(s2)]
    totals = {row["style"]: row["total"] for row in report.quality}
    assert sum(totals.values()) >= 40
    assert totals[sel["chosen"]] == max(totals.values())
    assert pair.image_a.shape == (128, 128)


def test_train_descriptor_experiment_small(tmp_path):
    net, rep = train_descriptor_experiment(n_train=64, n_held_out=32, train_cfg=TrainConfig(epochs=1, batch_size=32),
                                           n_pairs=1, weights_out=tmp_path / "w.tfw")
    assert rep.n_train == 64 and rep.n_held_out == 32
    assert len(rep.history["epoch_loss"]) == 1
    assert (tmp_path / "w.tfw").exists()
    assert np.isfinite(rep.trained["fpr95"])
