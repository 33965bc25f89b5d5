"""CLI stages on a small configuration: outputs, gating, exit codes."""

import json

import numpy as np
import pytest

from advdissect import cli


def small_raw(output_dir, num_classes=4, kinds=("bim", "pgd"), images_per_pair=2):
    return {
        "seed": 3,
        "output_dir": str(output_dir),
        "dataset": {"num_classes": num_classes, "samples_per_class": 20, "image_size": [24, 24],
                    "channels": 3, "noise_std": 0.02, "seed": 3,
                    "test_fraction": 0.25, "split_seed": 3},
        "idx_dataset": None,
        "model": {
            "layers": [
                {"type": "conv2d", "name": "conv1", "out_channels": 8,
                 "kernel_size": 3, "stride": 1, "padding": 1},
                {"type": "relu", "name": "relu1"},
                {"type": "maxpool2d", "name": "pool1", "size": 2},
                {"type": "conv2d", "name": "conv2", "out_channels": 16,
                 "kernel_size": 3, "stride": 1, "padding": 1},
                {"type": "relu", "name": "relu2"},
                {"type": "maxpool2d", "name": "pool2", "size": 2},
                {"type": "conv2d", "name": "conv3", "out_channels": 32,
                 "kernel_size": 3, "stride": 1, "padding": 1},
                {"type": "relu", "name": "relu3"},
                {"type": "global_avg_pool", "name": "gap"},
                {"type": "dense", "name": "fc", "out_features": num_classes},
            ],
            "seed": 3,
            "train": {"epochs": 30, "batch_size": 8, "learning_rate": 0.02,
                      "seed": 3, "optimizer": "sgd-momentum"},
        },
        "attacks": {
            "kinds": list(kinds),
            "images_per_pair": images_per_pair,
            "epsilon": 0.15, "alpha": 0.02, "steps": 15,
            "cw_beta": 2.0, "cw_lr": 0.05, "cw_steps": 30,
            "patch_target_class": 1, "patch_loc": [6, 6, 8],
            "patch_steps": 30, "patch_alpha": 0.05,
            "seed": 3,
        },
        "analysis": {
            "profile_layers": ["relu1", "relu2", "relu3"],
            "discovery_layer": "relu3",
            "k_mine": 3, "k_anatomy": 2,
            "iou_quantile": 0.75,
            "change_thresholds": [75, 50, 25],
            "gammas": [0.0, 0.25, 0.5, 0.75, 1.0, 1.25],
        },
    }


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    cfg = cli.parse_config(small_raw(out))
    metrics = cli.cmd_train(cfg)
    manifest = cli.cmd_attack(cfg)
    for stage in cli.STAGES:
        cli.cmd_dissect(cfg, stage)
    summary = cli.cmd_report(cfg)
    return cfg, metrics, manifest, summary


def test_train_outputs(pipeline):
    cfg, metrics, _, _ = pipeline
    assert (cfg.output_dir / "train" / "model.tnet").exists()
    written = json.loads((cfg.output_dir / "train" / "metrics.json").read_text())
    assert written["clean_accuracy"] == metrics["clean_accuracy"]
    assert written["config_hash"] == cfg.hash
    assert metrics["clean_accuracy"] >= 0.85


def test_train_rerun_identical_checksum(pipeline, tmp_path):
    cfg, metrics, _, _ = pipeline
    cfg2 = cli.parse_config(small_raw(tmp_path / "again"))
    metrics2 = cli.cmd_train(cfg2)
    assert metrics2["model_checksum"] == metrics["model_checksum"]


def test_attack_result_file_count(pipeline):
    cfg, _, manifest, _ = pipeline
    # 4 classes -> 12 ordered pairs, 2 kinds, 2 images each
    files = list((cfg.output_dir / "attack").rglob("sample_*.bin"))
    assert len(files) == 12 * 2 * 2
    assert len(manifest["cells"]) == 24


def test_manifest_rates_in_unit_interval(pipeline):
    _, _, manifest, _ = pipeline
    for cell in manifest["cells"]:
        assert 0.0 <= cell["success_rate"] <= 1.0
        for s in cell["samples"]:
            assert 0.0 <= s["prob_target_adv"] <= 1.0
    for rate in manifest["success_rate_by_kind"].values():
        assert 0.0 <= rate <= 1.0


def test_bim_pgd_rates_close(pipeline):
    _, _, manifest, _ = pipeline
    rates = manifest["success_rate_by_kind"]
    assert abs(rates["bim"] - rates["pgd"]) <= 0.1


def test_layers_stage_outputs(pipeline):
    cfg, _, _, _ = pipeline
    layers_dir = cfg.output_dir / "dissect" / "layers"
    control = (layers_dir / "profile_clean_control.csv").read_text().splitlines()
    assert control[0] == "layer,mean_cosine,std_cosine"
    for line in control[1:]:
        _, mean, std = line.split(",")
        assert float(mean) == 1.0
        assert float(std) == 0.0
    assert (layers_dir / "profile_pgd.csv").exists()
    assert json.loads((layers_dir / "meta.json").read_text())["config_hash"] == cfg.hash


def test_mine_stage_outputs(pipeline):
    cfg, _, manifest, _ = pipeline
    mine_dir = cfg.output_dir / "dissect" / "mine"
    changes = (mine_dir / "changes.csv").read_text().splitlines()
    assert changes[0] == "kind,threshold,mean_changes,ci99_halfwidth,n_cells"
    assert len(changes) == 1 + 2 * 3  # kinds x thresholds
    matchings = json.loads((mine_dir / "matchings.json").read_text())
    k = cfg.analysis["k_mine"]
    for key, entry in matchings.items():
        assert sorted(entry["permutation"]) == list(range(k))
        assert len(entry["matched_diagonal"]) == k
    assert len(list((mine_dir / "bases").glob("clean_*.cbs"))) == 4
    assert len(list((mine_dir / "saliency").glob("*.pgm"))) > 0


def test_anatomy_stage_outputs(pipeline):
    cfg, _, _, _ = pipeline
    adir = cfg.output_dir / "dissect" / "anatomy"
    vp = (adir / "variance_profile.csv").read_text().splitlines()
    assert vp[0].startswith("kind,mean_50,std_50")
    stats = json.loads((adir / "stats.json").read_text())
    assert "interpolation" in stats
    curves = list((adir / "curves").glob("*.csv"))
    assert curves
    header = curves[0].read_text().splitlines()[0]
    assert header == "direction,gamma,conf_original,conf_target"


def test_anatomy_curve_endpoint_matches_manifest(pipeline):
    cfg, _, manifest, _ = pipeline
    adir = cfg.output_dir / "dissect" / "anatomy"
    gammas = cfg.analysis["gammas"]
    for cell in manifest["cells"]:
        path = adir / "curves" / f"{cell['origin']}_{cell['target']}_{cell['kind']}.csv"
        if not path.exists():
            continue
        succ = [s for s in cell["samples"] if s["success"]]
        expected = float(np.mean([s["prob_target_adv"] for s in succ]))
        rows = [l.split(",") for l in path.read_text().splitlines()[1:]]
        at_one = [float(r[3]) for r in rows if r[0] == "full_delta" and float(r[1]) == 1.0]
        assert len(at_one) == 1
        assert abs(at_one[0] - expected) <= 1e-9


def test_report_summary(pipeline):
    cfg, metrics, manifest, summary = pipeline
    assert summary["clean_accuracy"] == metrics["clean_accuracy"]
    assert summary["success_rate_by_kind"] == manifest["success_rate_by_kind"]
    assert (cfg.output_dir / "report" / "summary.json").exists()


def test_missing_output_dir_created(tmp_path):
    nested = tmp_path / "a" / "b" / "c"
    cfg = cli.parse_config(small_raw(nested))
    cli.cmd_train(cfg)
    assert (nested / "train" / "model.tnet").exists()


def test_attack_requires_model(tmp_path):
    cfg = cli.parse_config(small_raw(tmp_path))
    with pytest.raises(cli.PipelineError, match="missing"):
        cli.cmd_attack(cfg)


def test_attack_refuses_bad_model(pipeline, tmp_path):
    src = pipeline[0]
    cfg = cli.parse_config(small_raw(tmp_path))
    (cfg.output_dir / "train").mkdir(parents=True)
    (cfg.output_dir / "train" / "model.tnet").write_bytes(
        (src.output_dir / "train" / "model.tnet").read_bytes())
    bad_metrics = {"clean_accuracy": 0.5, "model_checksum": "x", "config_hash": cfg.hash}
    (cfg.output_dir / "train" / "metrics.json").write_text(json.dumps(bad_metrics))
    with pytest.raises(cli.PipelineError, match="refusing"):
        cli.cmd_attack(cfg)


def test_dissect_requires_attack_tree(tmp_path):
    cfg = cli.parse_config(small_raw(tmp_path))
    cli.cmd_train(cfg)
    with pytest.raises(cli.PipelineError, match="manifest"):
        cli.cmd_dissect(cfg, "layers")


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["--config", str(bad), "train"]) == 2
    raw = small_raw(tmp_path)
    raw["analysis"]["discovery_layer"] = "nope"
    good_syntax = tmp_path / "semantic.json"
    good_syntax.write_text(json.dumps(raw))
    assert cli.main(["--config", str(good_syntax), "train"]) == 2


def test_invariant_violation_exit_code(tmp_path):
    raw = small_raw(tmp_path)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    # attack without a trained model -> dependency missing -> 3
    assert cli.main(["--config", str(path), "attack"]) == 3


def test_default_config_parses():
    cfg = cli.parse_config(cli.default_config())
    assert cfg.analysis["discovery_layer"] == "relu4"
    assert len(cli.attack_grid(cfg)) == 3 * 56 + 7


def test_idx_dataset_pipeline(tmp_path):
    from advdissect import datagen

    ds = datagen.generate(datagen.ShapeDatasetConfig(
        num_classes=4, samples_per_class=20, image_size=(24, 24), seed=3))
    datagen.save_idx(ds, tmp_path / "imgs.idx", tmp_path / "labels.idx")
    raw = small_raw(tmp_path / "out")
    raw["idx_dataset"] = {"images": str(tmp_path / "imgs.idx"), "labels": str(tmp_path / "labels.idx")}
    raw["dataset"]["test_fraction"] = 0.25
    cfg = cli.parse_config(raw)
    metrics = cli.cmd_train(cfg)
    # 8-bit quantization aside, this is the same generated dataset
    assert metrics["clean_accuracy"] >= 0.85
