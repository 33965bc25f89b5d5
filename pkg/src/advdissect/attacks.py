"""Targeted white-box attacks: BIM, PGD, C&W (L2), and a localized patch.

All attacks move the input toward a chosen target class. The iterative
sign attacks step down the cross-entropy toward the target (the descent
direction that actually raises the target's probability) and clip or
project back into the epsilon-ball and the [0,1] pixel box each step.
C&W minimizes ||delta||_2 + beta * margin(x + delta) under a tanh change
of variables; the patch attack optimizes only inside a fixed square.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import TAG_ATTACK_START, TAG_PATCH_INIT, substream
from .tensornet import Tensor
from .tensornet import tensor as T

KINDS = ("bim", "pgd", "cw", "patch")
BALLS = ("linf", "l2")

# iterative sign attacks stop this many steps after first success
CONFIRM_STEPS = 5

RESULT_MAGIC = b"ATK1"


class AttackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    target_class: int
    epsilon: float = 0.1
    alpha: float = 0.01
    steps: int = 50
    beta: float = 2.0
    cw_lr: float = 0.05
    patch_loc: tuple | None = None  # (row, col, size)
    ball: str = "linf"
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AttackConfigError(f"kind must be one of {KINDS}")
        if self.target_class < 0:
            raise AttackConfigError("target_class must be >= 0")
        if self.epsilon < 0:
            raise AttackConfigError("epsilon must be >= 0")
        if self.alpha <= 0:
            raise AttackConfigError("alpha must be > 0")
        if self.steps < 1:
            raise AttackConfigError("steps must be >= 1")
        if self.beta < 0:
            raise AttackConfigError("beta must be >= 0")
        if self.cw_lr <= 0:
            raise AttackConfigError("cw_lr must be > 0")
        if self.ball not in BALLS:
            raise AttackConfigError(f"ball must be one of {BALLS}")
        # with epsilon == 0 the ball collapses and alpha is irrelevant
        if self.kind in ("bim", "pgd") and self.epsilon > 0 and self.alpha > self.epsilon:
            raise AttackConfigError("alpha must not exceed epsilon (single step would overshoot)")
        if self.kind == "patch":
            if self.patch_loc is None:
                raise AttackConfigError("patch attack needs patch_loc=(row, col, size)")
            row, col, size = self.patch_loc
            if row < 0 or col < 0:
                raise AttackConfigError("patch_loc offsets must be >= 0")
            if size < 1:
                raise AttackConfigError("patch region degenerate (size < 1)")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "target_class": self.target_class,
            "epsilon": self.epsilon, "alpha": self.alpha, "steps": self.steps,
            "beta": self.beta, "cw_lr": self.cw_lr,
            "patch_loc": list(self.patch_loc) if self.patch_loc else None,
            "ball": self.ball, "random_start": self.random_start, "seed": self.seed,
        }


@dataclass
class AttackResult:
    x_adv: np.ndarray
    delta: np.ndarray
    success: bool
    steps_used: int
    confidence_trace: np.ndarray  # target-class probability after each step
    config: AttackConfig


def project_to_ball(delta: np.ndarray, epsilon: float, ball: str = "linf") -> np.ndarray:
    """Project a (possibly batched) perturbation onto the epsilon-ball around 0."""
    if ball == "linf":
        return np.clip(delta, -epsilon, epsilon)
    if ball == "l2":
        flat = delta.reshape(delta.shape[0], -1) if delta.ndim > 1 else delta.reshape(1, -1)
        norms = np.sqrt((flat * flat).sum(axis=1, keepdims=True))
        factor = np.minimum(1.0, epsilon / np.maximum(norms, 1e-300))
        out = (flat * factor).reshape(delta.shape)
        return out
    raise AttackConfigError(f"unknown ball {ball!r}")


def _targeted_grad(model, x: np.ndarray, targets: np.ndarray) -> np.ndarray:
    xt = Tensor(x, requires_grad=True)
    logits = model.forward(xt)
    loss = T.cross_entropy_with_logits(logits, targets, reduction="sum")
    loss.backward()
    return xt.grad


def _batched(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 3 else x


def _iterative_sign_attack(model, x, config: AttackConfig) -> list:
    """Shared BIM/PGD loop; BIM clips, PGD projects (identical for linf)."""
    x0 = _batched(x)
    bsz = x0.shape[0]
    targets = np.full(bsz, config.target_class, dtype=np.int64)
    eps = config.epsilon

    with model.frozen():
        xt = x0.copy()
        if config.random_start and config.kind == "pgd":
            start = substream(config.seed, TAG_ATTACK_START).uniform(-eps, eps, size=x0.shape)
            xt = np.clip(x0 + project_to_ball(start, eps, config.ball), 0.0, 1.0)

        traces = [[] for _ in range(bsz)]
        active = np.ones(bsz, dtype=bool)
        success_step = np.full(bsz, -1, dtype=np.int64)
        final_probs = np.zeros((bsz, model.num_classes))

        for t in range(config.steps):
            if not active.any():
                break
            g = _targeted_grad(model, xt, targets)
            cand = xt - config.alpha * np.sign(g)
            delta = cand - x0
            if config.kind == "bim":
                delta = np.clip(delta, -eps, eps)
            else:
                delta = project_to_ball(delta, eps, config.ball)
            cand = np.clip(x0 + delta, 0.0, 1.0)
            sel = active.reshape((bsz,) + (1,) * (x0.ndim - 1))
            xt = np.where(sel, cand, xt)

            probs = model.predict_proba(xt)
            pred = probs.argmax(axis=1)
            for i in np.flatnonzero(active):
                traces[i].append(probs[i, config.target_class])
                final_probs[i] = probs[i]
                if success_step[i] < 0 and pred[i] == config.target_class:
                    success_step[i] = t
                if success_step[i] >= 0 and t - success_step[i] >= CONFIRM_STEPS:
                    active[i] = False

    results = []
    for i in range(bsz):
        results.append(AttackResult(
            x_adv=xt[i].copy(),
            delta=(xt[i] - x0[i]),
            success=bool(final_probs[i].argmax() == config.target_class),
            steps_used=len(traces[i]),
            confidence_trace=np.asarray(traces[i]),
            config=config,
        ))
    return results


_ATANH_CLAMP = 1e-6


def _cw_attack(model, x, config: AttackConfig) -> list:
    x0 = _batched(x)
    bsz = x0.shape[0]
    targets = np.full(bsz, config.target_class, dtype=np.int64)
    x0c = np.clip(x0, _ATANH_CLAMP, 1.0 - _ATANH_CLAMP)
    w = np.arctanh(2.0 * x0c - 1.0)

    best_l2 = np.full(bsz, np.inf)
    best_x = x0.copy()
    best_obj = np.full(bsz, np.inf)
    best_obj_x = x0.copy()
    got_success = np.zeros(bsz, dtype=bool)
    traces = [[] for _ in range(bsz)]

    with model.frozen():
        for t in range(config.steps):
            wt = Tensor(w, requires_grad=True)
            xprime = T.scale(T.shift(T.tanh_t(wt), 1.0), 0.5)
            delta_t = T.sub(xprime, Tensor(x0))
            objective = T.add(T.l2_norm_sum(delta_t), T.scale(T.target_margin(model.forward(xprime), targets), config.beta))
            objective.backward()
            w = w - config.cw_lr * wt.grad

            x_new = (np.tanh(w) + 1.0) * 0.5
            logits = model.forward(x_new).data
            probs = T.softmax(logits)
            pred = logits.argmax(axis=1)
            d = (x_new - x0).reshape(bsz, -1)
            l2 = np.sqrt((d * d).sum(axis=1))
            rows = np.arange(bsz)
            masked = logits.copy()
            masked[rows, targets] = -np.inf
            margin = np.maximum(masked.max(axis=1) - logits[rows, targets], 0.0)
            obj = l2 + config.beta * margin
            for i in range(bsz):
                traces[i].append(probs[i, config.target_class])
                if pred[i] == config.target_class and l2[i] < best_l2[i]:
                    best_l2[i] = l2[i]
                    best_x[i] = x_new[i]
                    got_success[i] = True
                if obj[i] < best_obj[i]:
                    best_obj[i] = obj[i]
                    best_obj_x[i] = x_new[i]

    results = []
    for i in range(bsz):
        xa = best_x[i] if got_success[i] else best_obj_x[i]
        results.append(AttackResult(
            x_adv=xa.copy(),
            delta=(xa - x0[i]),
            success=bool(got_success[i]),
            steps_used=config.steps,
            confidence_trace=np.asarray(traces[i]),
            config=config,
        ))
    return results


def _patch_attack(model, x, config: AttackConfig) -> list:
    x0 = _batched(x)
    bsz, c, h, w = x0.shape
    row, col, size = config.patch_loc
    if row + size > h or col + size > w:
        raise AttackConfigError(f"patch {config.patch_loc} exceeds image bounds {h}x{w}")
    targets = np.full(bsz, config.target_class, dtype=np.int64)
    mask = np.zeros((h, w), dtype=bool)
    mask[row:row + size, col:col + size] = True

    xt = x0.copy()
    for i in range(bsz):
        noise = substream(config.seed, TAG_PATCH_INIT, i).uniform(0.0, 1.0, size=(c, size, size))
        xt[i, :, row:row + size, col:col + size] = noise

    traces = [[] for _ in range(bsz)]
    final_probs = np.zeros((bsz, model.num_classes))
    with model.frozen():
        for t in range(config.steps):
            g = _targeted_grad(model, xt, targets)
            cand = np.clip(xt - config.alpha * np.sign(g), 0.0, 1.0)
            xt = np.where(mask[None, None, :, :], cand, x0)
            probs = model.predict_proba(xt)
            for i in range(bsz):
                traces[i].append(probs[i, config.target_class])
                final_probs[i] = probs[i]

    results = []
    for i in range(bsz):
        delta = xt[i] - x0[i]
        delta[:, ~mask] = 0.0  # exact zeros outside the patch, by contract
        results.append(AttackResult(
            x_adv=xt[i].copy(),
            delta=delta,
            success=bool(final_probs[i].argmax() == config.target_class),
            steps_used=len(traces[i]),
            confidence_trace=np.asarray(traces[i]),
            config=config,
        ))
    return results


def _dispatch(model, x, config: AttackConfig) -> list:
    if config.kind in ("bim", "pgd"):
        return _iterative_sign_attack(model, x, config)
    if config.kind == "cw":
        return _cw_attack(model, x, config)
    if config.kind == "patch":
        return _patch_attack(model, x, config)
    raise AttackConfigError(f"unknown kind {config.kind!r}")


def attack_batch(model, images: np.ndarray, config: AttackConfig) -> list:
    """Attack a batch (B, C, H, W); returns one AttackResult per sample."""
    return _dispatch(model, images, config)


def bim(model, x, config: AttackConfig) -> AttackResult:
    if config.kind != "bim":
        raise AttackConfigError("config.kind must be 'bim'")
    return _dispatch(model, x, config)[0]


def pgd(model, x, config: AttackConfig) -> AttackResult:
    if config.kind != "pgd":
        raise AttackConfigError("config.kind must be 'pgd'")
    return _dispatch(model, x, config)[0]


def cw(model, x, config: AttackConfig) -> AttackResult:
    if config.kind != "cw":
        raise AttackConfigError("config.kind must be 'cw'")
    return _dispatch(model, x, config)[0]


def patch(model, x, config: AttackConfig) -> AttackResult:
    if config.kind != "patch":
        raise AttackConfigError("config.kind must be 'patch'")
    return _dispatch(model, x, config)[0]


# ---------------------------------------------------------------------------
# result files: {origin}_{target}_{kind}/sample_{i}.bin + manifest built by caller


def save_result(path, result: AttackResult):
    header = {
        "shape": list(result.x_adv.shape),
        "success": result.success,
        "steps_used": result.steps_used,
        "trace_len": int(result.confidence_trace.shape[0]),
        "config": result.config.to_dict(),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(RESULT_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        f.write(np.ascontiguousarray(result.x_adv, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(result.delta, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(result.confidence_trace, dtype="<f8").tobytes())


def load_result(path) -> AttackResult:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != RESULT_MAGIC:
        raise ValueError(f"{path}: not an attack result file")
    hlen = struct.unpack("<I", blob[4:8])[0]
    header = json.loads(blob[8:8 + hlen])
    shape = tuple(header["shape"])
    n = int(np.prod(shape))
    off = 8 + hlen
    x_adv = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
    off += n * 8
    delta = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
    off += n * 8
    trace = np.frombuffer(blob, dtype="<f8", count=header["trace_len"], offset=off).copy()
    cfg = dict(header["config"])
    if cfg.get("patch_loc") is not None:
        cfg["patch_loc"] = tuple(cfg["patch_loc"])
    return AttackResult(
        x_adv=x_adv, delta=delta, success=header["success"],
        steps_used=header["steps_used"], confidence_trace=trace,
        config=AttackConfig(**cfg),
    )


def cell_dirname(origin: int, target: int, kind: str) -> str:
    return f"{origin}_{target}_{kind}"


def save_cell(root, origin: int, target: int, kind: str, results: list) -> dict:
    """Write one grid cell's samples; returns its manifest fragment."""
    cell = Path(root) / cell_dirname(origin, target, kind)
    cell.mkdir(parents=True, exist_ok=True)
    samples = []
    for i, r in enumerate(results):
        save_result(cell / f"sample_{i}.bin", r)
        flat = r.delta.reshape(-1)
        samples.append({
            "success": r.success,
            "steps_used": r.steps_used,
            "linf": float(np.abs(flat).max()),
            "l2": float(np.sqrt((flat * flat).sum())),
        })
    return {
        "origin": origin,
        "target": target,
        "kind": kind,
        "n_samples": len(results),
        "success_rate": float(np.mean([s["success"] for s in samples])) if samples else 0.0,
        "samples": samples,
    }


def load_cell(root, origin: int, target: int, kind: str) -> list:
    cell = Path(root) / cell_dirname(origin, target, kind)
    results = []
    i = 0
    while (cell / f"sample_{i}.bin").exists():
        results.append(load_result(cell / f"sample_{i}.bin"))
        i += 1
    return results
