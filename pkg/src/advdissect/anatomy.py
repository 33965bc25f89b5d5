"""Dissection of adversarial perturbations in latent space.

The perturbation of a sample at layer L is the difference of its clean
and adversarial activation tensors. This module measures how that
difference concentrates on few PCA directions, discovers NMF components
in it, projects it onto single components, sweeps interpolation curves
of class confidence against perturbation magnitude, and clusters
component directions across attacks and origin classes.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import leaves_list, linkage

from .metrics import SimilarityMatrix, cosine
from .mining import jacobi_eigh, nmf_fit
from .tensornet import softmax

DEFAULT_LEVELS = (50.0, 70.0, 80.0, 90.0, 95.0, 99.0)
# gamma grid 0..1.5 step 0.05; exact binary endpoints at 0 and 1
DEFAULT_GAMMAS = np.arange(31) / 20.0


class AnatomyError(Exception):
    pass


@dataclass
class LatentPerturbation:
    delta_tilde: np.ndarray  # (c, h, w), shaped like the layer output
    layer: str
    origin_class: int
    target_class: int
    attack_kind: str
    sample_id: str = ""


@dataclass
class InterpolationCurve:
    gammas: np.ndarray
    conf_original: np.ndarray
    conf_target: np.ndarray
    direction: str  # "full_delta" | "component(i)"


@dataclass
class VarianceProfile:
    retained_levels: tuple
    component_fraction_mean: np.ndarray  # % of components per level
    component_fraction_std: np.ndarray
    n_groups: int


def latent_delta(model, layer: str, x: np.ndarray, x_adv: np.ndarray,
                 origin_class: int = -1, target_class: int = -1,
                 attack_kind: str = "", sample_id: str = "") -> LatentPerturbation:
    """Exact activation difference f_to_L(x_adv) - f_to_L(x) for one sample."""
    if x.shape != x_adv.shape:
        raise AnatomyError(f"shape mismatch {x.shape} vs {x_adv.shape}")
    a_clean = model.forward_to(layer, x[None]).data[0]
    a_adv = model.forward_to(layer, x_adv[None]).data[0]
    return LatentPerturbation(
        delta_tilde=a_adv - a_clean, layer=layer,
        origin_class=origin_class, target_class=target_class,
        attack_kind=attack_kind, sample_id=sample_id,
    )


def _stack_pixels(perturbations) -> np.ndarray:
    """Rows = spatial locations of every perturbation, columns = channels."""
    mats = []
    for p in perturbations:
        c = p.delta_tilde.shape[0]
        mats.append(p.delta_tilde.reshape(c, -1).T)
    return np.concatenate(mats, axis=0)


def _fractions_for_group(X: np.ndarray, levels) -> np.ndarray:
    c = X.shape[1]
    mu = X.mean(axis=0)
    Xc = X - mu
    cov = (Xc.T @ Xc) / max(X.shape[0] - 1, 1)
    evals, _, _ = jacobi_eigh(cov)
    evals = np.maximum(evals, 0.0)
    total = evals.sum()
    if total <= 0:
        raise AnatomyError("degenerate (zero) perturbation set")
    cum = np.cumsum(evals) / total
    fractions = []
    for level in levels:
        k = min(int(np.searchsorted(cum, level / 100.0 - 1e-12) + 1), c)
        fractions.append(k / c * 100.0)
    return np.asarray(fractions)


def variance_profile(perturbations, levels=DEFAULT_LEVELS) -> VarianceProfile:
    """Percentage of PCA components needed per retained-variance level.

    Perturbations are grouped by (origin, target) pair; the profile is
    the mean and standard deviation of per-group fractions.
    """
    perts = list(perturbations)
    if len(perts) < 2:
        raise AnatomyError("need at least 2 perturbations")
    layers = {p.layer for p in perts}
    if len(layers) != 1:
        raise AnatomyError(f"perturbations span several layers: {sorted(layers)}")
    if list(levels) != sorted(levels):
        raise AnatomyError("levels must be ascending")

    groups = defaultdict(list)
    for p in perts:
        groups[(p.origin_class, p.target_class)].append(p)
    per_group = []
    for key in sorted(groups):
        if len(groups[key]) < 1:
            continue
        per_group.append(_fractions_for_group(_stack_pixels(groups[key]), levels))
    if not per_group:
        raise AnatomyError("no usable perturbation groups")
    stacked = np.stack(per_group)
    return VarianceProfile(
        retained_levels=tuple(levels),
        component_fraction_mean=stacked.mean(axis=0),
        component_fraction_std=stacked.std(axis=0),
        n_groups=len(per_group),
    )


def nmf_perturbation_basis(perturbations, k: int = 3, max_iters: int = 500,
                           tol: float = 1e-5, seed: int = 0):
    """NMF components of the ReLU'd perturbation pixels, most prominent first.

    Returns (basis, directions) where directions are the unit-normalized
    component rows, ordered by total fitted weight mass (descending).
    Negative perturbation information is discarded by the ReLU.
    """
    perts = list(perturbations)
    if not perts:
        raise AnatomyError("empty perturbation set")
    X = np.maximum(_stack_pixels(perts), 0.0)
    if not np.any(X > 0):
        raise AnatomyError("all perturbations are nonpositive; nothing for NMF")
    basis = nmf_fit(X, k, max_iters=max_iters, tol=tol, seed=seed, layer=perts[0].layer)
    mass = basis.weights.sum(axis=0)
    order = np.argsort(-mass, kind="stable")
    M = basis.M[order]
    basis.M = M
    basis.weights = basis.weights[:, order]
    norms = np.linalg.norm(M, axis=1)
    if np.any(norms == 0):
        raise AnatomyError("NMF produced a zero component; decrease k")
    return basis, M / norms[:, None]


def project_component(delta_tilde: np.ndarray, m: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Per-pixel projection onto the unit direction m: at each location,
    the pixel's channel vector p becomes (p . m) m."""
    m = np.asarray(m, dtype=np.float64)
    if abs(np.linalg.norm(m) - 1.0) > tol:
        raise AnatomyError(f"direction is not unit-norm (|1 - ||m||| > {tol})")
    if delta_tilde.shape[0] != m.shape[0]:
        raise AnatomyError(
            f"channel mismatch: perturbation {delta_tilde.shape[0]}, direction {m.shape[0]}"
        )
    coeff = np.einsum("chw,c->hw", delta_tilde, m)
    return m[:, None, None] * coeff[None, :, :]


def interpolate(model, layer: str, x: np.ndarray, direction: np.ndarray,
                gammas=DEFAULT_GAMMAS, classes: tuple = (0, 1),
                label: str = "full_delta") -> InterpolationCurve:
    """Class probabilities along x_tilde + gamma * direction, swept over gammas."""
    gammas = np.asarray(gammas, dtype=np.float64)
    if gammas[0] != 0.0 or np.any(np.diff(gammas) <= 0):
        raise AnatomyError("gammas must be ascending and start at 0")
    y, y_target = classes
    x_tilde = model.forward_to(layer, x[None]).data[0]
    if direction.shape != x_tilde.shape:
        raise AnatomyError(f"direction shape {direction.shape} != layer output {x_tilde.shape}")
    gcol = gammas.reshape((-1,) + (1,) * x_tilde.ndim)
    batch = x_tilde[None] + gcol * direction[None]
    logits = model.forward_from(layer, batch).data
    probs = softmax(logits)
    return InterpolationCurve(
        gammas=gammas,
        conf_original=probs[:, y].copy(),
        conf_target=probs[:, y_target].copy(),
        direction=label,
    )


def clustermap(vectors: np.ndarray, labels: list):
    """Cosine similarity matrix reordered by average-linkage clustering.

    Rows of `vectors` are concept directions; labels follow the
    `{origin}-{attack}-{index}` convention. Returns (SimilarityMatrix,
    leaf order) with rows/columns permuted to the dendrogram order.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise AnatomyError("need a nonempty (n, c) vector stack")
    n = vectors.shape[0]
    if len(labels) != n:
        raise AnatomyError("labels must match vector count")
    sim = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            sim[i, j] = 1.0 if i == j else cosine(vectors[i], vectors[j])
    if n == 1:
        order = [0]
    else:
        dist = []
        for i in range(n - 1):
            for j in range(i + 1, n):
                dist.append(max(1.0 - sim[i, j], 0.0))
        order = [int(i) for i in leaves_list(linkage(np.asarray(dist), method="average"))]
    ordered = sim[np.ix_(order, order)]
    ordered_labels = [labels[i] for i in order]
    return SimilarityMatrix(ordered, ordered_labels, list(ordered_labels), mode="cosine"), order


def target_specificity(vector_groups: dict) -> tuple:
    """Mean cosine among same-target concept pairs vs different-target pairs.

    `vector_groups` maps target class -> (n_i, c) arrays of unit concept
    directions pooled over origins/attacks. Returns (within, across).
    """
    targets = sorted(vector_groups)
    if len(targets) < 2:
        raise AnatomyError("need at least two target classes")
    within, across = [], []
    flat = [(t, v) for t in targets for v in np.asarray(vector_groups[t])]
    for i in range(len(flat)):
        for j in range(i + 1, len(flat)):
            s = cosine(flat[i][1], flat[j][1])
            (within if flat[i][0] == flat[j][0] else across).append(s)
    if not within or not across:
        raise AnatomyError("need both within-target and across-target pairs")
    return float(np.mean(within)), float(np.mean(across))
