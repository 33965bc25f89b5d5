"""Acceptance suite: every criterion of the pinned desk-scale protocol.

The pinned setup (8 shape classes, 50 images each, 32x32x3, VGG-like toy
CNN with 4 conv blocks, seed 42) is trained, attacked, and dissected
once per session; the criteria assert on its outputs at their stated
tolerances. Run with `pytest tests/test_acceptance.py -v -s` to see one
line per criterion.
"""

import hashlib
import itertools
import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import finite_diff, pool_windows_have_margin, rel_err
from test_cli import small_raw

from advdissect import anatomy as an
from advdissect import attacks as atk
from advdissect import cli
from advdissect.mining import ActivationBatch, nmf_fit, nmf_objective_history, pca_fit
from advdissect.metrics import match_concepts
from advdissect.tensornet import Model, Tensor
from advdissect.tensornet import tensor as T


def ok(n, msg):
    # write to the real stdout so the line survives pytest's capture
    sys.__stdout__.write(f"\nACCEPTANCE {n:02d}: PASS — {msg}\n")
    sys.__stdout__.flush()


# ---------------------------------------------------------------------------
# session pipeline on the pinned protocol


@pytest.fixture(scope="session")
def pinned(tmp_path_factory):
    out = tmp_path_factory.mktemp("pinned")
    raw = cli.default_config()
    raw["output_dir"] = str(out)
    cfg = cli.parse_config(raw)
    metrics = cli.cmd_train(cfg)
    manifest = cli.cmd_attack(cfg)
    for stage in cli.STAGES:
        cli.cmd_dissect(cfg, stage)
    cli.cmd_report(cfg)
    return cfg, metrics, manifest


@pytest.fixture(scope="session")
def pinned_model(pinned):
    cfg, _, _ = pinned
    return Model.load(cfg.output_dir / "train" / "model.tnet")


@pytest.fixture(scope="session")
def pgd_anatomy(pinned, pinned_model):
    """Per-cell successful PGD samples, their latent deltas, and k=3 bases."""
    cfg, _, manifest = pinned
    model = pinned_model
    layer = cfg.analysis["discovery_layer"]
    _, test_set = cli.load_dataset(cfg)
    b = cfg.attack["images_per_pair"]
    seed = cfg.raw["seed"]
    cells = {}
    for o, t in [(c["origin"], c["target"]) for c in manifest["cells"] if c["kind"] == "pgd"]:
        imgs = test_set.of_class(o)[:b]
        results = atk.load_cell(cfg.output_dir / "attack", o, t, "pgd")
        samples = [
            (imgs[i], r.x_adv,
             an.latent_delta(model, layer, imgs[i], r.x_adv, origin_class=o, target_class=t,
                             attack_kind="pgd"))
            for i, r in enumerate(results) if r.success
        ]
        if not samples:
            continue
        _, dirs = an.nmf_perturbation_basis([s[2] for s in samples],
                                            k=cfg.analysis["k_anatomy"], seed=seed)
        cells[(o, t)] = (samples, dirs)
    return cells


# ---------------------------------------------------------------------------
# 1. autodiff vs central finite differences, every layer type


def _grad_config_conv(rng):
    b, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 5)
    k, stride, pad = rng.integers(1, 4), rng.integers(1, 3), rng.integers(0, 2)
    h = int(rng.integers(max(k - 2 * pad, 1) + stride, 7))
    x = rng.normal(size=(b, cin, h, h))
    w = rng.normal(size=(cout, cin, k, k)) * 0.5
    bias = rng.normal(size=cout)
    r = rng.normal(size=T.conv2d(Tensor(x), Tensor(w), Tensor(bias), int(stride), int(pad)).data.shape)

    def scalar(xt, wt, bt):
        out = T.conv2d(xt, wt, bt, int(stride), int(pad))
        return T.sum_all(T.mul(out, Tensor(r)))

    return scalar, [x, w, bias]


def _grad_config_dense(rng):
    b, d, o = rng.integers(1, 4), rng.integers(1, 7), rng.integers(1, 5)
    x, w, bias = rng.normal(size=(b, d)), rng.normal(size=(o, d)), rng.normal(size=o)
    r = rng.normal(size=(b, o))

    def scalar(xt, wt, bt):
        return T.sum_all(T.mul(T.dense(xt, wt, bt), Tensor(r)))

    return scalar, [x, w, bias]


def _grad_config_relu(rng):
    shape = tuple(rng.integers(1, 5, size=int(rng.integers(1, 4))))
    x = rng.normal(size=shape)
    x += 0.06 * np.sign(x) + 0.06 * (x == 0)
    r = rng.normal(size=shape)

    def scalar(xt):
        return T.sum_all(T.mul(T.relu(xt), Tensor(r)))

    return scalar, [x]


def _grad_config_maxpool(rng):
    size = int(rng.integers(2, 4))
    stride = int(rng.integers(1, 3))
    h = int(rng.integers(size, 7))
    for _ in range(50):
        x = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 3)), h, h))
        if pool_windows_have_margin(x, size, stride, 1e-2):
            break
    r = rng.normal(size=T.maxpool2d(Tensor(x), size, stride).data.shape)

    def scalar(xt):
        return T.sum_all(T.mul(T.maxpool2d(xt, size, stride), Tensor(r)))

    return scalar, [x]


def _grad_config_gap(rng):
    x = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 5)),
                         int(rng.integers(1, 5)), int(rng.integers(1, 5))))
    r = rng.normal(size=x.shape[:2])

    def scalar(xt):
        return T.sum_all(T.mul(T.global_avg_pool(xt), Tensor(r)))

    return scalar, [x]


def _grad_config_flatten(rng):
    x = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                         int(rng.integers(1, 4)), int(rng.integers(1, 4))))
    r = rng.normal(size=(x.shape[0], int(np.prod(x.shape[1:]))))

    def scalar(xt):
        return T.sum_all(T.mul(T.flatten2d(xt), Tensor(r)))

    return scalar, [x]


LAYER_GRAD_CONFIGS = {
    "conv2d": _grad_config_conv,
    "dense": _grad_config_dense,
    "relu": _grad_config_relu,
    "maxpool2d": _grad_config_maxpool,
    "global_avg_pool": _grad_config_gap,
    "flatten": _grad_config_flatten,
}


def test_criterion_01_gradients_match_finite_differences():
    start = time.perf_counter()
    rng = np.random.default_rng(1234)
    worst = 0.0
    for name, make in LAYER_GRAD_CONFIGS.items():
        for _ in range(100):
            scalar, arrays = make(rng)
            tensors = [Tensor(a, requires_grad=True) for a in arrays]
            scalar(*tensors).backward()
            for arr, ten in zip(arrays, tensors):
                g_fd = finite_diff(lambda: scalar(*[Tensor(a) for a in arrays]).item(), arr)
                err = rel_err(ten.grad, g_fd)
                worst = max(worst, err)
                assert err <= 1e-3, f"{name}: relative error {err}"
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s"
    ok(1, f"6 layer types x 100 configs, worst relative error {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. split identity


def test_criterion_02_split_identity(pinned_model):
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(10):
        x = rng.uniform(0, 1, (10, 3, 32, 32))
        full = pinned_model.forward(x).data
        for layer in pinned_model.layers:
            a = pinned_model.forward_to(layer.name, x)
            recomposed = pinned_model.forward_from(layer.name, a.data).data
            worst = max(worst, float(np.abs(recomposed - full).max()))
    assert worst <= 1e-12
    ok(2, f"all {len(pinned_model.layers)} layers x 100 inputs, max deviation {worst:.1e}")


# ---------------------------------------------------------------------------
# 3. attack contracts


def test_criterion_03_attack_contracts(pinned):
    cfg, _, manifest = pinned
    _, test_set = cli.load_dataset(cfg)
    b = cfg.attack["images_per_pair"]
    eps = cfg.attack["epsilon"]
    row, col, size = cfg.attack["patch_loc"]
    mask = np.zeros((32, 32), dtype=bool)
    mask[row:row + size, col:col + size] = True
    n_checked = 0
    for cell in manifest["cells"]:
        o, t, kind = cell["origin"], cell["target"], cell["kind"]
        results = atk.load_cell(cfg.output_dir / "attack", o, t, kind)
        imgs = test_set.of_class(o)[:b]
        for i, r in enumerate(results):
            assert r.x_adv.min() >= 0.0 and r.x_adv.max() <= 1.0
            assert len(r.confidence_trace) == r.steps_used
            if kind in ("bim", "pgd"):
                assert np.abs(r.delta).max() <= eps + 1e-9
            if kind == "patch":
                assert np.all(r.delta[:, ~mask] == 0.0)
                assert np.array_equal(r.x_adv[:, ~mask], imgs[i][:, ~mask])
            n_checked += 1
    ok(3, f"{n_checked} results: ball/box and patch locality all hold")


# ---------------------------------------------------------------------------
# 4. PGD strength


def test_criterion_04_pgd_strength(pinned, pinned_model):
    cfg, metrics, _ = pinned
    assert metrics["clean_accuracy"] >= 0.90, "clean-accuracy prerequisite"
    _, test_set = cli.load_dataset(cfg)
    b = cfg.attack["images_per_pair"]
    n = cli._num_classes(cfg)
    start = time.perf_counter()
    succ = total = 0
    for o in range(n):
        imgs = test_set.of_class(o)[:b]
        for t in range(n):
            if t == o:
                continue
            config = atk.AttackConfig(kind="pgd", target_class=t, epsilon=0.1, alpha=0.01,
                                      steps=50, seed=cfg.attack["seed"])
            results = atk.attack_batch(pinned_model, imgs, config)
            succ += sum(r.success for r in results)
            total += len(results)
    elapsed = time.perf_counter() - start
    rate = succ / total
    assert elapsed < 600.0, f"PGD grid took {elapsed:.0f}s"
    assert rate >= 0.80, f"targeted success rate {rate:.3f}"
    ok(4, f"clean acc {metrics['clean_accuracy']:.3f}, PGD success {rate:.3f} "
          f"({succ}/{total}) in {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 5. layerwise similarity decay


def test_criterion_05_layer_similarity_decay(pinned):
    cfg, _, _ = pinned
    drops = {}
    for kind in ("bim", "pgd", "cw"):
        lines = (cfg.output_dir / "dissect" / "layers" / f"profile_{kind}.csv").read_text().splitlines()
        means = [float(l.split(",")[1]) for l in lines[1:]]
        assert means[-1] < means[0], f"{kind}: deepest {means[-1]} !< shallowest {means[0]}"
        drops[kind] = (means[0], means[-1])
    ok(5, "; ".join(f"{k}: {a:.3f} -> {b:.3f}" for k, (a, b) in drops.items()))


# ---------------------------------------------------------------------------
# 6. decomposition oracles


def test_criterion_06_decomposition_oracles():
    rng = np.random.default_rng(5150)
    # PCA vs the dense symmetric eigensolver
    for _ in range(20):
        c = int(rng.integers(3, 24))
        data = rng.normal(size=(int(rng.integers(c + 5, 300)), c))
        batch = ActivationBatch(data=data, b=1, h=data.shape[0], w=1, c=c, layer="L")
        basis = pca_fit(batch, k=c)
        evals, evecs = np.linalg.eigh(np.cov(data, rowvar=False))
        evals, evecs = evals[::-1], evecs[:, ::-1]
        scale = max(evals.max(), 1.0)
        assert np.abs(basis.explained_variance - evals[:basis.k]).max() <= 1e-8 * scale
        for i in range(basis.k):
            assert abs(abs(np.dot(basis.M[i], evecs[:, i])) - 1.0) <= 1e-8
    # NMF objective never increases
    for seed in range(3):
        A = np.random.default_rng(seed).uniform(0, 1, size=(120, 20))
        history = nmf_objective_history(A, k=4, iters=150, seed=seed)
        assert np.all(np.diff(history) <= 1e-12 * history[0])
    # rank-1 reconstruction
    for seed in range(5):
        r = np.random.default_rng(seed + 100)
        A = r.uniform(0.3, 2.0, size=(40, 1)) @ r.uniform(0.3, 2.0, size=(1, 9))
        batch = ActivationBatch(data=A, b=1, h=40, w=1, c=9, layer="L")
        basis = nmf_fit(batch, k=1, seed=seed)
        assert basis.reconstruction_error / np.linalg.norm(A) <= 1e-3
    ok(6, "PCA matches eigh on 20 matrices at 1e-8; NMF monotone, rank-1 error <= 1e-3")


# ---------------------------------------------------------------------------
# 7. matching optimality


def test_criterion_07_matching_optimality():
    rng = np.random.default_rng(777)
    for _ in range(50):
        k = int(rng.integers(2, 7))
        S = rng.uniform(0, 1, size=(k, k))
        _, diag = match_concepts(S)
        best = max(sum(S[i, p[i]] for i in range(k))
                   for p in itertools.permutations(range(k)))
        assert diag.sum() == pytest.approx(best, abs=1e-12)
    ok(7, "assignment equals brute force on 50 random matrices, k in [2, 6]")


# ---------------------------------------------------------------------------
# 8. concept-change counts: gradient sign attacks > C&W


def test_criterion_08_concept_change_trend(pinned):
    cfg, _, _ = pinned
    lines = (cfg.output_dir / "dissect" / "mine" / "changes.csv").read_text().splitlines()
    means = {}
    for line in lines[1:]:
        kind, thr, mean, _, _ = line.split(",")
        means[(kind, int(thr))] = float(mean)
    assert means[("pgd", 50)] > means[("cw", 50)]
    assert means[("bim", 50)] > means[("cw", 50)]
    ok(8, f"mean changes @50: pgd {means[('pgd', 50)]:.3f}, bim {means[('bim', 50)]:.3f} "
          f"> cw {means[('cw', 50)]:.3f}")


# ---------------------------------------------------------------------------
# 9. variance concentration of latent PGD perturbations


def test_criterion_09_variance_concentration(pinned):
    cfg, _, _ = pinned
    lines = (cfg.output_dir / "dissect" / "anatomy" / "variance_profile.csv").read_text().splitlines()
    header = lines[0].split(",")
    row = next(l.split(",") for l in lines[1:] if l.startswith("pgd,"))
    f50 = float(row[header.index("mean_50")])
    f90 = float(row[header.index("mean_90")])
    f99 = float(row[header.index("mean_99")])
    assert f50 < f90 < f99
    assert f50 <= 30.0
    ok(9, f"components for 50/90/99% variance: {f50:.1f}% < {f90:.1f}% < {f99:.1f}% of channels")


# ---------------------------------------------------------------------------
# 10. interpolation curves: components reproduce the attack


def test_criterion_10_interpolation(pinned, pinned_model, pgd_anatomy):
    cfg, _, _ = pinned
    layer = cfg.analysis["discovery_layer"]
    gammas = np.asarray(cfg.analysis["gammas"])
    i1 = int(np.flatnonzero(gammas == 1.0)[0])
    n_samples = n_lifting = 0
    worst_endpoint = 0.0
    for (o, t), (samples, dirs) in pgd_anatomy.items():
        for img, x_adv, pert in samples:
            clean_p = pinned_model.predict_proba(img[None])[0]
            adv_p = pinned_model.predict_proba(x_adv[None])[0]
            full = an.interpolate(pinned_model, layer, img, pert.delta_tilde, gammas, (o, t))
            worst_endpoint = max(
                worst_endpoint,
                abs(full.conf_target[0] - clean_p[t]),
                abs(full.conf_original[0] - clean_p[o]),
                abs(full.conf_target[i1] - adv_p[t]),
                abs(full.conf_original[i1] - adv_p[o]),
            )
            lifted = False
            for i in range(dirs.shape[0]):
                proj = an.project_component(pert.delta_tilde, dirs[i])
                curve = an.interpolate(pinned_model, layer, img, proj, gammas, (o, t))
                if curve.conf_target[i1] > curve.conf_target[0]:
                    lifted = True
            n_samples += 1
            n_lifting += int(lifted)
    assert worst_endpoint <= 1e-9, f"endpoint identity violated by {worst_endpoint:.2e}"
    fraction = n_lifting / n_samples
    assert fraction >= 0.60, f"lifting fraction {fraction:.3f}"
    ok(10, f"{n_lifting}/{n_samples} samples have a confidence-lifting component "
           f"({fraction:.2f}); endpoints exact to {worst_endpoint:.1e}")


# ---------------------------------------------------------------------------
# 11. target-specificity of perturbation concepts


def test_criterion_11_target_specificity(pinned, pgd_anatomy):
    cfg, _, _ = pinned
    groups = {}
    origins = set()
    for (o, t), (_, dirs) in pgd_anatomy.items():
        groups.setdefault(t, []).append(dirs)
        origins.add(o)
    assert len(groups) >= 3 and len(origins) >= 3
    groups = {t: np.concatenate(v) for t, v in groups.items()}
    within, across = an.target_specificity(groups)
    assert within > across
    # the pipeline's pooled statistic (all kinds) agrees on direction
    stats = json.loads((cfg.output_dir / "dissect" / "anatomy" / "stats.json").read_text())
    assert stats["within_target_cosine"] > stats["across_target_cosine"]
    ok(11, f"within-target cosine {within:.3f} > across-target {across:.3f} "
           f"({len(groups)} targets x {len(origins)} origins)")


# ---------------------------------------------------------------------------
# 12. byte-identical reruns


def test_supplementary_cw_finds_smaller_perturbations(pinned):
    # C&W looks for the minimally sufficient perturbation; targeted sign
    # attacks walk to the ball edge
    _, _, manifest = pinned
    l2 = {"pgd": [], "cw": []}
    for cell in manifest["cells"]:
        if cell["kind"] in l2:
            l2[cell["kind"]].extend(s["l2"] for s in cell["samples"] if s["success"])
    assert np.median(l2["cw"]) < np.median(l2["pgd"])
    print(f"\nsupplementary: median L2 cw {np.median(l2['cw']):.3f} "
          f"< pgd {np.median(l2['pgd']):.3f}")


def test_supplementary_full_image_patch_at_least_pgd_eps1(pinned, pinned_model):
    cfg, _, _ = pinned
    _, test_set = cli.load_dataset(cfg)
    imgs = test_set.of_class(0)[:3]
    c_patch = atk.AttackConfig(kind="patch", target_class=3, alpha=0.05, steps=100,
                               patch_loc=(0, 0, 32), seed=1)
    c_pgd = atk.AttackConfig(kind="pgd", target_class=3, epsilon=1.0, alpha=0.05,
                             steps=100, seed=1)
    patch_rate = np.mean([r.success for r in atk.attack_batch(pinned_model, imgs, c_patch)])
    pgd_rate = np.mean([r.success for r in atk.attack_batch(pinned_model, imgs, c_pgd)])
    assert patch_rate >= pgd_rate  # unconstrained superset of the eps=1 ball


def test_supplementary_patch_success_reported(pinned):
    _, _, manifest = pinned
    rate = manifest["success_rate_by_kind"].get("patch")
    # measured and reported, not asserted: small patches need not succeed often
    print(f"\nsupplementary: 8x8 patch targeted success rate {rate:.3f} (reported)")


def test_supplementary_bim_pgd_rates_close(pinned):
    _, _, manifest = pinned
    rates = manifest["success_rate_by_kind"]
    assert abs(rates["bim"] - rates["pgd"]) <= 0.1


def test_criterion_12_determinism(tmp_path_factory):
    def tree_hash(root):
        root = Path(root)
        return {
            str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()
        }

    hashes = []
    for name in ("detA", "detB"):
        out = tmp_path_factory.mktemp(name)
        raw = small_raw(out, kinds=("bim", "pgd", "cw", "patch"))
        cfg = cli.parse_config(raw)
        cli.cmd_train(cfg)
        cli.cmd_attack(cfg)
        for stage in cli.STAGES:
            cli.cmd_dissect(cfg, stage)
        cli.cmd_report(cfg)
        hashes.append(tree_hash(out))
    assert set(hashes[0]) == set(hashes[1])
    differing = [k for k in hashes[0] if hashes[0][k] != hashes[1][k]]
    assert not differing, f"files differ: {differing[:5]}"
    ok(12, f"full pipeline rerun byte-identical across {len(hashes[0])} files")
