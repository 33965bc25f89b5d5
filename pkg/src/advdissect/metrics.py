"""Comparison instruments for latent representations and concept sets.

Cosine similarity between directions, IoU between binarized saliency
maps, full pairwise similarity matrices, trace-maximizing concept
matching, concept-change counting at a threshold, weight/rank
correlations, and layerwise clean-vs-adversarial similarity profiles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import t as student_t

from .mining import ActivationBatch, ConceptBasis, project_saliency


class MetricsError(Exception):
    pass


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    row_labels: list
    col_labels: list
    mode: str = "cosine"  # "cosine" | "iou"


@dataclass
class LayerProfile:
    layers: list
    mean_sim: np.ndarray
    std_sim: np.ndarray


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise MetricsError(f"cosine: length mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise MetricsError("cosine undefined for a zero vector")
    if np.array_equal(u, v):
        return 1.0  # exact, so identical-representation checks hold to the last bit
    return float(np.dot(u / nu, v / nv))


def layer_profile(model, layers, clean_images: np.ndarray, adv_images: np.ndarray) -> LayerProfile:
    """Mean/std over paired samples of cos(f_to_L(x), f_to_L(x_adv)) per layer."""
    if clean_images.shape != adv_images.shape:
        raise MetricsError("clean and adversarial sets must be paired (same shape)")
    taps_clean = model.forward_collect(clean_images, layers)
    taps_adv = model.forward_collect(adv_images, layers)
    n = clean_images.shape[0]
    means, stds = [], []
    for name in layers:
        a = taps_clean[name].reshape(n, -1)
        b = taps_adv[name].reshape(n, -1)
        sims = np.array([cosine(a[i], b[i]) for i in range(n)])
        means.append(sims.mean())
        stds.append(sims.std())
    return LayerProfile(layers=list(layers), mean_sim=np.asarray(means), std_sim=np.asarray(stds))


def saliency_iou(map_a: np.ndarray, map_b: np.ndarray, quantile: float = 0.5) -> float:
    """Jaccard index of the two maps binarized at their own q-quantiles.

    A pixel is active when strictly above the quantile; an empty union
    scores 0 by convention.
    """
    if map_a.shape != map_b.shape:
        raise MetricsError(f"iou: shape mismatch {map_a.shape} vs {map_b.shape}")
    if not 0.0 < quantile < 1.0:
        raise MetricsError("quantile must be in (0, 1)")
    sup_a = map_a > np.quantile(map_a, quantile)
    sup_b = map_b > np.quantile(map_b, quantile)
    union = np.logical_or(sup_a, sup_b).sum()
    if union == 0:
        return 0.0
    inter = np.logical_and(sup_a, sup_b).sum()
    return float(inter / union)


def concept_sim_matrix(
    concepts_a: ConceptBasis | np.ndarray,
    concepts_b: ConceptBasis | np.ndarray,
    mode: str = "cosine",
    probe_images: np.ndarray | None = None,
    probe_images_b: np.ndarray | None = None,
    input_size: tuple | None = None,
    quantile: float = 0.5,
    row_labels=None,
    col_labels=None,
    collect=None,
) -> SimilarityMatrix:
    """Pairwise concept similarities; IoU mode averages over a probe image set.

    `collect` maps an image batch to a single-image ActivationBatch for
    the right layer; required only in IoU mode. When `probe_images_b` is
    given (aligned with `probe_images`, e.g. attacked versions of the
    same samples) each basis projects saliency on its own distribution.
    """
    Ma = concepts_a.M if isinstance(concepts_a, ConceptBasis) else np.asarray(concepts_a)
    Mb = concepts_b.M if isinstance(concepts_b, ConceptBasis) else np.asarray(concepts_b)
    ka, kb = Ma.shape[0], Mb.shape[0]
    row_labels = list(row_labels) if row_labels is not None else [f"a-{i}" for i in range(ka)]
    col_labels = list(col_labels) if col_labels is not None else [f"b-{j}" for j in range(kb)]

    if mode == "cosine":
        if isinstance(concepts_a, ConceptBasis) and isinstance(concepts_b, ConceptBasis):
            if concepts_a.layer != concepts_b.layer or concepts_a.model_id != concepts_b.model_id:
                raise MetricsError("cosine mode needs concepts from the same layer and model")
        values = np.empty((ka, kb))
        for i in range(ka):
            for j in range(kb):
                values[i, j] = cosine(Ma[i], Mb[j])
        return SimilarityMatrix(values, row_labels, col_labels, mode="cosine")

    if mode == "iou":
        if probe_images is None or probe_images.shape[0] == 0:
            raise MetricsError("iou mode needs a nonempty probe image set")
        if collect is None or input_size is None:
            raise MetricsError("iou mode needs a collect function and input_size")
        if probe_images_b is None:
            probe_images_b = probe_images
        if probe_images_b.shape != probe_images.shape:
            raise MetricsError("probe sets must be aligned (same shape)")
        values = np.zeros((ka, kb))
        for img_a, img_b in zip(probe_images, probe_images_b):
            batch_a = collect(img_a[None])
            batch_b = collect(img_b[None])
            maps_a = project_saliency(batch_a, _as_basis(concepts_a, batch_a), input_size)
            maps_b = project_saliency(batch_b, _as_basis(concepts_b, batch_b), input_size)
            for i in range(ka):
                for j in range(kb):
                    values[i, j] += saliency_iou(maps_a[i].upscaled, maps_b[j].upscaled, quantile)
        values /= probe_images.shape[0]
        return SimilarityMatrix(values, row_labels, col_labels, mode="iou")

    raise MetricsError(f"unknown mode {mode!r}")


def _as_basis(concepts, batch: ActivationBatch) -> ConceptBasis:
    if isinstance(concepts, ConceptBasis):
        return concepts
    M = np.asarray(concepts)
    return ConceptBasis(method="nmf", M=M, mean=np.zeros(M.shape[1]), k=M.shape[0],
                        reconstruction_error=0.0, fit_iterations=0,
                        layer=batch.layer, model_id=batch.model_id)


def match_concepts(matrix: SimilarityMatrix | np.ndarray):
    """Permutation of columns maximizing the matched diagonal sum.

    Returns (perm, diagonal): row i is matched to column perm[i], and
    diagonal[i] is that pair's similarity.
    """
    values = matrix.values if isinstance(matrix, SimilarityMatrix) else np.asarray(matrix)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise MetricsError(f"matching needs a square matrix, got {values.shape}")
    rows, cols = linear_sum_assignment(values, maximize=True)
    perm = np.empty(values.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm, values[np.arange(values.shape[0]), perm]


def count_changes(matched_diagonal: np.ndarray, threshold: float) -> int:
    """Number of matched pairs strictly below the threshold (same scale as the diagonal)."""
    return int((np.asarray(matched_diagonal) < threshold).sum())


def weight_correlations(w_orig: np.ndarray, w_adv: np.ndarray) -> tuple:
    """(Pearson, Spearman) between matched concept weight vectors."""
    a = np.asarray(w_orig, dtype=np.float64)
    b = np.asarray(w_adv, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricsError("weight vectors must be 1-d and of equal length")
    if a.size < 3:
        raise MetricsError("need at least 3 matched weights")
    return _pearson(a, b), _pearson(_rank(a), _rank(b))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    ac = a - a.mean()
    bc = b - b.mean()
    na, nb = np.linalg.norm(ac), np.linalg.norm(bc)
    if na == 0.0 or nb == 0.0:
        raise MetricsError("correlation undefined: zero variance")
    return float(np.dot(ac, bc) / (na * nb))


def _rank(x: np.ndarray) -> np.ndarray:
    """Average ranks (ties share the mean of their rank range)."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def t_confidence_interval(values: np.ndarray, level: float = 0.99) -> tuple:
    """(mean, halfwidth) Student-t confidence interval."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    mean = float(values.mean())
    if n < 2:
        return mean, 0.0
    sem = values.std(ddof=1) / np.sqrt(n)
    halfwidth = float(student_t.ppf(0.5 + level / 2.0, n - 1) * sem)
    return mean, halfwidth
