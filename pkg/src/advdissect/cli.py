"""Experiment orchestration: train, attack, dissect, report.

Every stage reads one JSON config, writes into a stage directory under
the config's output_dir, and drops a meta.json carrying the config hash
and a file inventory. All randomness is seeded, so rerunning a stage
with an unchanged config reproduces its outputs byte for byte. Plots
are never rendered; stages emit plot-ready CSV.

Exit codes: 0 success, 2 config error, 3 invariant violation or missing
stage dependency.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import anatomy as an
from . import attacks as atk
from . import datagen as dg
from . import metrics as mt
from . import mining as mn
from .tensornet import Model, ModelFormatError, TrainConfig, TrainingDiverged, accuracy, train
from .tensornet.layers import layer_from_dict

# attacks on a model this bad are meaningless
MIN_CLEAN_ACCURACY = 0.85

WORKERS_ENV = "ADVDISSECT_WORKERS"

STAGES = ("layers", "mine", "anatomy")


class ConfigError(Exception):
    pass


class PipelineError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def default_layer_spec() -> list:
    """VGG-like toy net: 4 conv blocks, GAP head; mining happens at relu4."""
    return [
        {"type": "conv2d", "name": "conv1", "out_channels": 16, "kernel_size": 3, "stride": 1, "padding": 1},
        {"type": "relu", "name": "relu1"},
        {"type": "maxpool2d", "name": "pool1", "size": 2},
        {"type": "conv2d", "name": "conv2", "out_channels": 32, "kernel_size": 3, "stride": 1, "padding": 1},
        {"type": "relu", "name": "relu2"},
        {"type": "maxpool2d", "name": "pool2", "size": 2},
        {"type": "conv2d", "name": "conv3", "out_channels": 64, "kernel_size": 3, "stride": 1, "padding": 1},
        {"type": "relu", "name": "relu3"},
        {"type": "maxpool2d", "name": "pool3", "size": 2},
        {"type": "conv2d", "name": "conv4", "out_channels": 64, "kernel_size": 3, "stride": 1, "padding": 1},
        {"type": "relu", "name": "relu4"},
        {"type": "global_avg_pool", "name": "gap"},
        {"type": "dense", "name": "fc", "out_features": 8},
    ]


def default_config() -> dict:
    """The pinned desk-scale protocol (8 classes, 50 images each, seed 42)."""
    return {
        "seed": 42,
        "output_dir": "out",
        "dataset": {
            "num_classes": 8, "samples_per_class": 50, "image_size": [32, 32],
            "channels": 3, "noise_std": 0.02, "seed": 42,
            "test_fraction": 0.2, "split_seed": 42,
        },
        "idx_dataset": None,
        "model": {
            "layers": default_layer_spec(),
            "seed": 42,
            "train": {"epochs": 30, "batch_size": 32, "learning_rate": 0.01,
                      "seed": 42, "optimizer": "sgd-momentum"},
        },
        "attacks": {
            "kinds": ["bim", "pgd", "cw", "patch"],
            "images_per_pair": 4,
            "epsilon": 0.1, "alpha": 0.01, "steps": 50,
            "cw_beta": 2.0, "cw_lr": 0.05, "cw_steps": 200,
            "patch_target_class": 1, "patch_loc": [12, 12, 8],
            "patch_steps": 200, "patch_alpha": 0.05,
            "seed": 42,
        },
        "analysis": {
            "profile_layers": ["relu1", "relu2", "relu3", "relu4"],
            "discovery_layer": "relu4",
            "k_mine": 5,
            "k_anatomy": 3,
            "iou_quantile": 0.75,
            "change_thresholds": [75, 50, 25],
            "gammas": [i / 20 for i in range(31)],
        },
    }


@dataclass
class ExperimentConfig:
    raw: dict
    output_dir: Path
    dataset: dg.ShapeDatasetConfig | None
    idx_paths: tuple | None
    test_fraction: float
    split_seed: int
    layers: list
    model_seed: int
    train_cfg: TrainConfig
    attack: dict
    analysis: dict

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    """Hash of the experiment parameters (output location excluded)."""
    scrubbed = {k: v for k, v in raw.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(scrubbed, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def parse_config(raw: dict) -> ExperimentConfig:
    try:
        dataset_cfg = None
        idx_paths = None
        if raw.get("idx_dataset"):
            idx_paths = (raw["idx_dataset"]["images"], raw["idx_dataset"]["labels"])
        else:
            d = raw["dataset"]
            dataset_cfg = dg.ShapeDatasetConfig(
                num_classes=d["num_classes"], samples_per_class=d["samples_per_class"],
                image_size=tuple(d["image_size"]), channels=d.get("channels", 3),
                noise_std=d["noise_std"], seed=d["seed"],
            )
        layers = [layer_from_dict(d) for d in raw["model"]["layers"]]
        t = raw["model"]["train"]
        train_cfg = TrainConfig(
            epochs=t["epochs"], batch_size=t["batch_size"], learning_rate=t["learning_rate"],
            seed=t["seed"], optimizer=t.get("optimizer", "sgd-momentum"),
        )
        attack = dict(raw["attacks"])
        analysis = dict(raw["analysis"])
        dataset_raw = raw.get("dataset") or {}
        cfg = ExperimentConfig(
            raw=raw,
            output_dir=Path(raw["output_dir"]),
            dataset=dataset_cfg,
            idx_paths=idx_paths,
            test_fraction=dataset_raw.get("test_fraction", 0.2),
            split_seed=dataset_raw.get("split_seed", raw.get("seed", 0)),
            layers=layers,
            model_seed=raw["model"].get("seed", raw.get("seed", 0)),
            train_cfg=train_cfg,
            attack=attack,
            analysis=analysis,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid config: {e}") from e
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    names = {l.name for l in cfg.layers}
    analysis = cfg.analysis
    if analysis["discovery_layer"] not in names:
        raise ConfigError(f"discovery layer {analysis['discovery_layer']!r} is not a model layer")
    for name in analysis["profile_layers"]:
        if name not in names:
            raise ConfigError(f"profile layer {name!r} is not a model layer")
    for kind in cfg.attack["kinds"]:
        if kind not in atk.KINDS:
            raise ConfigError(f"unknown attack kind {kind!r}")
    if cfg.attack["images_per_pair"] < 1:
        raise ConfigError("images_per_pair must be >= 1")
    gammas = analysis["gammas"]
    if gammas[0] != 0.0 or any(b <= a for a, b in zip(gammas, gammas[1:])):
        raise ConfigError("gammas must be ascending and start at 0")
    if not 0.0 < analysis["iou_quantile"] < 1.0:
        raise ConfigError("iou_quantile must be in (0, 1)")


def load_config(path) -> ExperimentConfig:
    if path is None:
        return parse_config(default_config())
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except ValueError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return parse_config(raw)


# ---------------------------------------------------------------------------
# deterministic output helpers


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=1)
        f.write("\n")


def write_meta(stage_dir: Path, cfg: ExperimentConfig, stage: str, extra: dict | None = None):
    files = sorted(
        str(p.relative_to(stage_dir))
        for p in stage_dir.rglob("*")
        if p.is_file() and p.name != "meta.json"
    )
    meta = {"config_hash": cfg.hash, "stage": stage, "files": files}
    if extra:
        meta.update(extra)
    write_json(stage_dir / "meta.json", meta)


# ---------------------------------------------------------------------------
# shared pipeline pieces


def load_dataset(cfg: ExperimentConfig):
    if cfg.idx_paths is not None:
        ds = dg.load_idx(*cfg.idx_paths)
    else:
        ds = dg.generate(cfg.dataset)
    return dg.stratified_split(ds, cfg.test_fraction, seed=cfg.split_seed)


def _num_classes(cfg: ExperimentConfig) -> int:
    return cfg.layers[-1].out_features


def attack_grid(cfg: ExperimentConfig) -> list:
    """(origin, target, kind) cells: full cross grid for gradient attacks,
    origin -> fixed patch target for the patch attack."""
    n = _num_classes(cfg)
    cells = []
    for kind in cfg.attack["kinds"]:
        if kind == "patch":
            pt = cfg.attack["patch_target_class"]
            if pt >= n:
                raise ConfigError("patch_target_class out of range")
            cells.extend((o, pt, kind) for o in range(n) if o != pt)
        else:
            cells.extend((o, t, kind) for o in range(n) for t in range(n) if o != t)
    return cells


def cell_config(cfg: ExperimentConfig, target: int, kind: str) -> atk.AttackConfig:
    a = cfg.attack
    if kind in ("bim", "pgd"):
        return atk.AttackConfig(kind=kind, target_class=target, epsilon=a["epsilon"],
                                alpha=a["alpha"], steps=a["steps"], seed=a["seed"])
    if kind == "cw":
        return atk.AttackConfig(kind="cw", target_class=target, beta=a["cw_beta"],
                                cw_lr=a["cw_lr"], steps=a["cw_steps"], seed=a["seed"])
    if kind == "patch":
        return atk.AttackConfig(kind="patch", target_class=target, alpha=a["patch_alpha"],
                                steps=a["patch_steps"], patch_loc=tuple(a["patch_loc"]),
                                seed=a["seed"])
    raise ConfigError(f"unknown kind {kind!r}")


def _model_path(cfg: ExperimentConfig) -> Path:
    return cfg.output_dir / "train" / "model.tnet"


def _load_model(cfg: ExperimentConfig) -> Model:
    path = _model_path(cfg)
    if not path.exists():
        raise PipelineError(f"model file {path} missing; run the train stage first")
    try:
        return Model.load(path)
    except ModelFormatError as e:
        raise PipelineError(f"model file corrupt: {e}") from e


def _origin_images(test_set: dg.LabeledImages, origin: int, count: int) -> np.ndarray:
    imgs = test_set.of_class(origin)[:count]
    if imgs.shape[0] < count:
        raise PipelineError(f"class {origin} has only {imgs.shape[0]} test images, need {count}")
    return imgs


# ---------------------------------------------------------------------------
# stages


def cmd_train(cfg: ExperimentConfig) -> dict:
    train_dir = cfg.output_dir / "train"
    train_dir.mkdir(parents=True, exist_ok=True)
    train_set, test_set = load_dataset(cfg)
    input_shape = train_set.images.shape[1:]
    model = Model(cfg.layers, input_shape, seed=cfg.model_seed)
    history = train(model, train_set.images, train_set.labels, cfg.train_cfg)
    metrics = {
        "clean_accuracy": accuracy(model, test_set.images, test_set.labels),
        "train_accuracy": accuracy(model, train_set.images, train_set.labels),
        "loss_history": history,
        "n_train": len(train_set),
        "n_test": len(test_set),
        "model_checksum": model.state_checksum(),
        "config_hash": cfg.hash,
    }
    model.save(_model_path(cfg))
    write_json(train_dir / "metrics.json", metrics)
    write_meta(train_dir, cfg, "train")
    return metrics


def _attack_one_cell(args):
    model_path, origin, target, kind, images, config = args
    global _WORKER_MODEL
    model = _WORKER_MODEL if _WORKER_MODEL is not None else Model.load(model_path)
    results = atk.attack_batch(model, images, config)
    probs = [model.predict_proba(r.x_adv[None])[0] for r in results]
    return origin, target, kind, results, probs


_WORKER_MODEL = None


def _worker_init(model_path):
    global _WORKER_MODEL
    _WORKER_MODEL = Model.load(model_path)


def cmd_attack(cfg: ExperimentConfig) -> dict:
    model = _load_model(cfg)
    metrics_path = cfg.output_dir / "train" / "metrics.json"
    if not metrics_path.exists():
        raise PipelineError("train metrics missing; run the train stage first")
    with open(metrics_path) as f:
        clean_acc = json.load(f)["clean_accuracy"]
    if clean_acc < MIN_CLEAN_ACCURACY:
        raise PipelineError(
            f"clean accuracy {clean_acc:.3f} below {MIN_CLEAN_ACCURACY}; refusing to attack a bad model"
        )

    attack_dir = cfg.output_dir / "attack"
    attack_dir.mkdir(parents=True, exist_ok=True)
    _, test_set = load_dataset(cfg)
    b = cfg.attack["images_per_pair"]

    jobs = [
        (str(_model_path(cfg)), o, t, kind, _origin_images(test_set, o, b), cell_config(cfg, t, kind))
        for (o, t, kind) in attack_grid(cfg)
    ]
    workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1:
        from multiprocessing import Pool

        with Pool(workers, initializer=_worker_init, initargs=(str(_model_path(cfg)),)) as pool:
            outcomes = list(pool.imap(_attack_one_cell, jobs))
    else:
        global _WORKER_MODEL
        _WORKER_MODEL = model
        outcomes = [_attack_one_cell(j) for j in jobs]
        _WORKER_MODEL = None

    cells = []
    for origin, target, kind, results, probs in outcomes:
        fragment = atk.save_cell(attack_dir, origin, target, kind, results)
        for sample, p in zip(fragment["samples"], probs):
            sample["prob_origin_adv"] = float(p[origin])
            sample["prob_target_adv"] = float(p[target])
        cells.append(fragment)

    by_kind = {}
    for c in cells:
        by_kind.setdefault(c["kind"], []).append(c["success_rate"])
    manifest = {
        "config_hash": cfg.hash,
        "clean_accuracy": clean_acc,
        "cells": cells,
        "success_rate_by_kind": {k: float(np.mean(v)) for k, v in sorted(by_kind.items())},
    }
    write_json(attack_dir / "manifest.json", manifest)
    write_meta(attack_dir, cfg, "attack")
    return manifest


def _load_manifest(cfg: ExperimentConfig) -> dict:
    path = cfg.output_dir / "attack" / "manifest.json"
    if not path.exists():
        raise PipelineError("attack manifest missing; run the attack stage first")
    with open(path) as f:
        return json.load(f)


def _cells_of_kind(manifest: dict, kind: str):
    return [(c["origin"], c["target"]) for c in manifest["cells"] if c["kind"] == kind]


def _dissect_layers(cfg: ExperimentConfig, model, test_set, manifest, out_dir: Path):
    b = cfg.attack["images_per_pair"]
    layers = cfg.analysis["profile_layers"]
    for kind in cfg.attack["kinds"]:
        clean_list, adv_list = [], []
        for o, t in _cells_of_kind(manifest, kind):
            imgs = _origin_images(test_set, o, b)
            results = atk.load_cell(cfg.output_dir / "attack", o, t, kind)
            clean_list.append(imgs)
            adv_list.append(np.stack([r.x_adv for r in results]))
        profile = mt.layer_profile(model, layers, np.concatenate(clean_list), np.concatenate(adv_list))
        write_csv(out_dir / f"profile_{kind}.csv", ["layer", "mean_cosine", "std_cosine"],
                  zip(profile.layers, profile.mean_sim, profile.std_sim))
    # clean-vs-clean control: identically (1.0, 0.0) at every layer
    control_imgs = test_set.images[: b * 4]
    control = mt.layer_profile(model, layers, control_imgs, control_imgs)
    write_csv(out_dir / "profile_clean_control.csv", ["layer", "mean_cosine", "std_cosine"],
              zip(control.layers, control.mean_sim, control.std_sim))


def _dissect_mine(cfg: ExperimentConfig, model, test_set, manifest, out_dir: Path):
    b = cfg.attack["images_per_pair"]
    layer = cfg.analysis["discovery_layer"]
    k = cfg.analysis["k_mine"]
    quantile = cfg.analysis["iou_quantile"]
    thresholds = cfg.analysis["change_thresholds"]
    seed = cfg.raw.get("seed", 0)
    input_size = tuple(model.input_shape[1:])

    def collect(images):
        return mn.collect_activations(model, layer, images)

    (out_dir / "bases").mkdir(parents=True, exist_ok=True)
    (out_dir / "similarity").mkdir(exist_ok=True)
    (out_dir / "saliency").mkdir(exist_ok=True)

    clean_bases = {}
    for o in range(_num_classes(cfg)):
        imgs = _origin_images(test_set, o, b)
        basis = mn.nmf_fit(collect(imgs), k, seed=seed)
        clean_bases[o] = (imgs, basis)
        mn.save_basis(out_dir / "bases" / f"clean_{o}.cbs", basis)
        for idx, smap in enumerate(mn.project_saliency(collect(imgs[:1]), basis, input_size)):
            mn.export_pgm(smap.upscaled, out_dir / "saliency" / f"clean_{o}_c{idx}.pgm")

    matchings = {}
    change_rows = []
    corr_rows = []
    for kind in cfg.attack["kinds"]:
        counts = {thr: [] for thr in thresholds}
        for o, t in _cells_of_kind(manifest, kind):
            imgs, clean_basis = clean_bases[o]
            results = atk.load_cell(cfg.output_dir / "attack", o, t, kind)
            adv = np.stack([r.x_adv for r in results])
            adv_basis = mn.nmf_fit(collect(adv), k, seed=seed)
            mn.save_basis(out_dir / "bases" / f"adv_{o}_{t}_{kind}.cbs", adv_basis)
            for idx, smap in enumerate(mn.project_saliency(collect(adv[:1]), adv_basis, input_size)):
                mn.export_pgm(smap.upscaled, out_dir / "saliency" / f"adv_{o}_{t}_{kind}_c{idx}.pgm")

            sim = mt.concept_sim_matrix(
                clean_basis, adv_basis, mode="iou",
                probe_images=imgs, probe_images_b=adv,
                input_size=input_size, quantile=quantile, collect=collect,
                row_labels=[f"{o}-clean-{i}" for i in range(k)],
                col_labels=[f"{o}-{kind}-{i}" for i in range(k)],
            )
            write_csv(out_dir / "similarity" / f"{o}_{t}_{kind}.csv",
                      ["row_label"] + sim.col_labels,
                      [[sim.row_labels[i]] + list(sim.values[i]) for i in range(k)])
            perm, diag = mt.match_concepts(sim)
            for thr in thresholds:
                counts[thr].append(mt.count_changes(diag * 100.0, thr))
            w_clean = mn.concept_importance(model, layer, clean_basis, o)
            w_adv = mn.concept_importance(model, layer, adv_basis, o)[perm]
            try:
                pearson, spearman = mt.weight_correlations(w_clean, w_adv)
            except mt.MetricsError:
                pearson, spearman = float("nan"), float("nan")
            corr_rows.append([kind, o, t, pearson, spearman])
            matchings[f"{o}_{t}_{kind}"] = {
                "permutation": [int(p) for p in perm],
                "matched_diagonal": [float(d) for d in diag],
                "importances_clean": [float(v) for v in w_clean],
                "importances_adv_matched": [float(v) for v in w_adv],
            }
        for thr in thresholds:
            mean, ci = mt.t_confidence_interval(np.asarray(counts[thr], dtype=np.float64), level=0.99)
            change_rows.append([kind, thr, mean, ci, len(counts[thr])])

    write_json(out_dir / "matchings.json", matchings)
    write_csv(out_dir / "changes.csv",
              ["kind", "threshold", "mean_changes", "ci99_halfwidth", "n_cells"], change_rows)
    write_csv(out_dir / "correlations.csv",
              ["kind", "origin", "target", "pearson", "spearman"], corr_rows)


def _dissect_anatomy(cfg: ExperimentConfig, model, test_set, manifest, out_dir: Path):
    b = cfg.attack["images_per_pair"]
    layer = cfg.analysis["discovery_layer"]
    k = cfg.analysis["k_anatomy"]
    gammas = np.asarray(cfg.analysis["gammas"], dtype=np.float64)
    seed = cfg.raw.get("seed", 0)

    (out_dir / "curves").mkdir(parents=True, exist_ok=True)
    (out_dir / "clustermaps").mkdir(exist_ok=True)

    directions = {}   # (origin, target, kind) -> (k, c) unit rows
    perts_by_kind = {}
    curve_stats = {}  # kind -> {"n_samples", "n_with_lifting_component"}

    for kind in cfg.attack["kinds"]:
        for o, t in _cells_of_kind(manifest, kind):
            imgs = _origin_images(test_set, o, b)
            results = atk.load_cell(cfg.output_dir / "attack", o, t, kind)
            cell = [
                (imgs[i], an.latent_delta(model, layer, imgs[i], r.x_adv, origin_class=o,
                                          target_class=t, attack_kind=kind, sample_id=f"{o}_{t}_{kind}_{i}"))
                for i, r in enumerate(results) if r.success
            ]
            if not cell:
                continue
            perts_by_kind.setdefault(kind, []).extend(p for _, p in cell)
            try:
                _, dirs = an.nmf_perturbation_basis([p for _, p in cell], k=k, seed=seed)
            except (an.AnatomyError, mn.MiningError):
                continue
            directions[(o, t, kind)] = dirs

            kind_stats = curve_stats.setdefault(kind, {"n_samples": 0, "n_with_lifting_component": 0})
            g1 = int(np.searchsorted(gammas, 1.0)) if 1.0 in gammas else len(gammas) - 1
            sums = {}
            for img, p in cell:
                curves = [an.interpolate(model, layer, img, p.delta_tilde, gammas, (o, t), "full_delta")]
                lifted = False
                for i in range(dirs.shape[0]):
                    proj = an.project_component(p.delta_tilde, dirs[i])
                    c = an.interpolate(model, layer, img, proj, gammas, (o, t), f"component({i})")
                    curves.append(c)
                    if c.conf_target[g1] > c.conf_target[0]:
                        lifted = True
                kind_stats["n_samples"] += 1
                kind_stats["n_with_lifting_component"] += int(lifted)
                for c in curves:
                    acc = sums.setdefault(c.direction, np.zeros((2, len(gammas))))
                    acc[0] += c.conf_original
                    acc[1] += c.conf_target
            rows = []
            for direction in sorted(sums):
                acc = sums[direction] / len(cell)
                for gi, g in enumerate(gammas):
                    rows.append([direction, g, acc[0][gi], acc[1][gi]])
            write_csv(out_dir / "curves" / f"{o}_{t}_{kind}.csv",
                      ["direction", "gamma", "conf_original", "conf_target"], rows)

    # variance profiles (Table-2 style: one row per kind, columns are levels)
    levels = an.DEFAULT_LEVELS
    vp_rows = []
    for kind in cfg.attack["kinds"]:
        if kind not in perts_by_kind or len(perts_by_kind[kind]) < 2:
            continue
        vp = an.variance_profile(perts_by_kind[kind], levels)
        row = [kind]
        for mean, std in zip(vp.component_fraction_mean, vp.component_fraction_std):
            row.extend([mean, std])
        vp_rows.append(row)
    header = ["kind"]
    for lv in levels:
        header.extend([f"mean_{lv:g}", f"std_{lv:g}"])
    write_csv(out_dir / "variance_profile.csv", header, vp_rows)

    # clustermaps: per cell across kinds, and per target across origins and kinds
    by_cell, by_target = {}, {}
    for (o, t, kind), dirs in sorted(directions.items()):
        for i, d in enumerate(dirs):
            label = f"{o}-{kind}-{i}"
            by_cell.setdefault((o, t), ([], []))
            by_cell[(o, t)][0].append(d)
            by_cell[(o, t)][1].append(label)
            by_target.setdefault(t, ([], []))
            by_target[t][0].append(d)
            by_target[t][1].append(label)

    def emit_clustermap(name, vectors, labels):
        sim, order = an.clustermap(np.stack(vectors), labels)
        write_csv(out_dir / "clustermaps" / f"{name}.csv",
                  ["row_label"] + sim.col_labels,
                  [[sim.row_labels[i]] + list(sim.values[i]) for i in range(len(labels))])
        write_json(out_dir / "clustermaps" / f"{name}_order.json",
                   {"order": order, "labels": sim.row_labels})

    for (o, t), (vectors, labels) in sorted(by_cell.items()):
        emit_clustermap(f"cell_{o}_{t}", vectors, labels)
    for t, (vectors, labels) in sorted(by_target.items()):
        emit_clustermap(f"target_{t}", vectors, labels)

    # target-specificity statistic over the pooled directions
    stats = {"interpolation": {}}
    for kind, s in sorted(curve_stats.items()):
        stats["interpolation"][kind] = {
            "n_samples": s["n_samples"],
            "lifting_fraction": (s["n_with_lifting_component"] / s["n_samples"])
            if s["n_samples"] else None,
        }
    groups = {}
    for (o, t, kind), dirs in directions.items():
        groups.setdefault(t, []).append(dirs)
    groups = {t: np.concatenate(v) for t, v in groups.items() if v}
    if len(groups) >= 2:
        within, across = an.target_specificity(groups)
        stats["within_target_cosine"] = within
        stats["across_target_cosine"] = across
    write_json(out_dir / "stats.json", stats)


def cmd_dissect(cfg: ExperimentConfig, stage: str) -> Path:
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    model = _load_model(cfg)
    manifest = _load_manifest(cfg)
    _, test_set = load_dataset(cfg)
    out_dir = cfg.output_dir / "dissect" / stage
    out_dir.mkdir(parents=True, exist_ok=True)
    if stage == "layers":
        _dissect_layers(cfg, model, test_set, manifest, out_dir)
    elif stage == "mine":
        _dissect_mine(cfg, model, test_set, manifest, out_dir)
    else:
        _dissect_anatomy(cfg, model, test_set, manifest, out_dir)
    write_meta(out_dir, cfg, stage, extra={
        "model_checksum": model.state_checksum(),
        "discovery_layer": cfg.analysis["discovery_layer"],
        "profile_layers": cfg.analysis["profile_layers"],
        "attack_config": cfg.attack,
    })
    return out_dir


def cmd_report(cfg: ExperimentConfig) -> dict:
    report_dir = cfg.output_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    summary = {"config_hash": cfg.hash}

    metrics_path = cfg.output_dir / "train" / "metrics.json"
    if metrics_path.exists():
        with open(metrics_path) as f:
            m = json.load(f)
        summary["clean_accuracy"] = m["clean_accuracy"]
        summary["model_checksum"] = m["model_checksum"]

    manifest_path = cfg.output_dir / "attack" / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path) as f:
            man = json.load(f)
        summary["success_rate_by_kind"] = man["success_rate_by_kind"]

    changes_path = cfg.output_dir / "dissect" / "mine" / "changes.csv"
    if changes_path.exists():
        with open(changes_path) as f:
            lines = f.read().splitlines()[1:]
        summary["mean_concept_changes"] = {}
        for line in lines:
            kind, thr, mean, ci, n = line.split(",")
            summary["mean_concept_changes"][f"{kind}@{thr}"] = {
                "mean": float(mean), "ci99": float(ci), "n_cells": int(n),
            }

    stats_path = cfg.output_dir / "dissect" / "anatomy" / "stats.json"
    if stats_path.exists():
        with open(stats_path) as f:
            summary["anatomy"] = json.load(f)

    write_json(report_dir / "summary.json", summary)
    write_meta(report_dir, cfg, "report")
    return summary


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="advdissect",
        description="Train a small CNN, attack it, and dissect the attacks at the concept level.",
    )
    parser.add_argument("--config", help="JSON experiment config (omit for the pinned defaults)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", help="generate data, train, and save the model")
    sub.add_parser("attack", help="run the full origin x target x kind attack grid")
    p_dissect = sub.add_parser("dissect", help="analyze an existing attack tree")
    p_dissect.add_argument("--stage", choices=STAGES, required=True)
    sub.add_parser("report", help="aggregate stage outputs into one summary JSON")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if args.command == "train":
            metrics = cmd_train(cfg)
            print(f"clean accuracy: {metrics['clean_accuracy']:.4f}")
        elif args.command == "attack":
            manifest = cmd_attack(cfg)
            for kind, rate in manifest["success_rate_by_kind"].items():
                print(f"{kind}: success rate {rate:.3f}")
        elif args.command == "dissect":
            out = cmd_dissect(cfg, args.stage)
            print(f"wrote {out}")
        elif args.command == "report":
            summary = cmd_report(cfg)
            print(json.dumps(summary, sort_keys=True, indent=1))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (PipelineError, TrainingDiverged) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
