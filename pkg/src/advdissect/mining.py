"""Concept discovery in activation space via PCA and NMF.

Activation maps are flattened to a pixel matrix whose rows are
per-location channel vectors; fitting factorizes that matrix into k
component directions. Components project back onto single images as
per-pixel coefficients (concept saliency maps), which upscale to input
resolution for visual and IoU comparison.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .rng import TAG_NMF_INIT, substream
from .tensornet import Dense, Flatten, GlobalAvgPool

_NMF_EPS = 1e-12
BASIS_MAGIC = b"CBS1"


class MiningError(Exception):
    pass


class RankError(MiningError):
    pass


@dataclass
class ActivationBatch:
    """Activation-map pixels as rows: (b*h*w) x c, sample-major then row then column."""

    data: np.ndarray
    b: int
    h: int
    w: int
    c: int
    layer: str
    model_id: str = ""

    def __post_init__(self):
        if self.data.shape != (self.b * self.h * self.w, self.c):
            raise MiningError(
                f"activation matrix {self.data.shape} does not match b*h*w={self.b * self.h * self.w}, c={self.c}"
            )

    def pixels_of_image(self, i: int) -> np.ndarray:
        n = self.h * self.w
        return self.data[i * n:(i + 1) * n]


@dataclass
class ConceptBasis:
    method: str                    # "pca" | "nmf"
    M: np.ndarray                  # (k, c) component rows
    mean: np.ndarray               # (c,); zero for nmf
    k: int
    reconstruction_error: float
    fit_iterations: int
    explained_variance: np.ndarray | None = None  # (k,), pca only
    weights: np.ndarray | None = None             # fit-time W, diagnostics
    layer: str = ""
    model_id: str = ""


@dataclass
class SaliencyMap:
    values: np.ndarray    # (h, w) at activation resolution
    upscaled: np.ndarray  # (H, W) at input resolution
    concept_index: int


def collect_activations(model, layer: str, images: np.ndarray, model_id: str = "") -> ActivationBatch:
    """Stack a layer's activation maps into the pixel-row matrix."""
    if images.shape[0] == 0:
        raise MiningError("empty image set")
    act = model.forward_to(layer, images).data  # (b, c, h, w)
    if act.ndim != 4:
        raise MiningError(f"layer {layer!r} output is not spatial (shape {act.shape})")
    b, c, h, w = act.shape
    data = np.ascontiguousarray(act.transpose(0, 2, 3, 1)).reshape(b * h * w, c)
    return ActivationBatch(data=data, b=b, h=h, w=w, c=c, layer=layer, model_id=model_id)


# ---------------------------------------------------------------------------
# eigensolver (cyclic Jacobi on the covariance; the tests compare it against
# a dense library eigensolver, which stays independent of this code)


def jacobi_eigh(S: np.ndarray, tol: float = 1e-14, max_sweeps: int = 40):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues descending, eigenvectors as columns, sweeps used).
    """
    A = np.array(S, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n):
        raise MiningError("jacobi_eigh needs a square matrix")
    V = np.eye(n)
    norm = np.sqrt((A * A).sum())
    sweeps = 0
    if n > 1:
        for sweeps in range(1, max_sweeps + 1):
            off = np.sqrt(max((A * A).sum() - (np.diag(A) ** 2).sum(), 0.0))
            if off <= tol * max(norm, 1e-300):
                sweeps -= 1
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = A[p, q]
                    # rotations on negligible entries add round-off, never accuracy
                    if abs(apq) <= 1e-300 or abs(apq) <= 1e-20 * (abs(A[p, p]) + abs(A[q, q])):
                        A[p, q] = 0.0
                        A[q, p] = 0.0
                        continue
                    theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                    if abs(theta) > 1e150:
                        t = 1.0 / (2.0 * theta)  # large-angle limit; theta**2 would overflow
                    elif theta != 0:
                        t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    else:
                        t = 1.0
                    c = 1.0 / np.sqrt(t * t + 1.0)
                    s = t * c
                    rp, rq = A[p, :].copy(), A[q, :].copy()
                    A[p, :] = c * rp - s * rq
                    A[q, :] = s * rp + c * rq
                    cp, cq = A[:, p].copy(), A[:, q].copy()
                    A[:, p] = c * cp - s * cq
                    A[:, q] = s * cp + c * cq
                    A[p, q] = 0.0
                    A[q, p] = 0.0
                    vp, vq = V[:, p].copy(), V[:, q].copy()
                    V[:, p] = c * vp - s * vq
                    V[:, q] = s * vp + c * vq
    evals = np.diag(A).copy()
    order = np.argsort(-evals, kind="stable")
    return evals[order], V[:, order], sweeps


def _fix_signs(M: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude entry is positive (deterministic)."""
    out = M.copy()
    for i in range(out.shape[0]):
        j = np.abs(out[i]).argmax()
        if out[i, j] < 0:
            out[i] = -out[i]
    return out


def pca_fit(batch: ActivationBatch, k: int) -> ConceptBasis:
    """Top-k principal directions of the mean-centered pixel matrix."""
    A = batch.data
    n, c = A.shape
    if n < 2:
        raise MiningError("pca needs at least 2 rows")
    if k < 1 or k > c:
        raise RankError(f"k={k} out of range for {c} channels")
    mu = A.mean(axis=0)
    Ac = A - mu
    cov = (Ac.T @ Ac) / (n - 1)
    evals, V, sweeps = jacobi_eigh(cov)
    evals = np.maximum(evals, 0.0)  # clip tiny negative round-off
    rank = int((evals > max(evals.max(initial=0.0), 1e-300) * 1e-12).sum())
    if k > rank:
        raise RankError(f"k={k} exceeds effective rank {rank}")
    M = _fix_signs(V[:, :k].T)
    W = Ac @ M.T
    err = float(np.linalg.norm(Ac - W @ M))
    return ConceptBasis(
        method="pca", M=M, mean=mu, k=k, reconstruction_error=err,
        fit_iterations=sweeps, explained_variance=evals[:k], weights=W,
        layer=batch.layer, model_id=batch.model_id,
    )


def explained_variance_ratio(basis: ConceptBasis, total_variance: float | None = None) -> np.ndarray:
    if basis.explained_variance is None:
        raise MiningError("basis has no variance spectrum")
    total = total_variance if total_variance is not None else basis.explained_variance.sum()
    return basis.explained_variance / total


def nmf_fit(batch: ActivationBatch | np.ndarray, k: int, max_iters: int = 500,
            tol: float = 1e-5, seed: int = 0, layer: str = "", model_id: str = "") -> ConceptBasis:
    """Multiplicative-update NMF (Frobenius objective) on a nonnegative pixel matrix."""
    if isinstance(batch, ActivationBatch):
        A, layer, model_id = batch.data, batch.layer, batch.model_id
    else:
        A = np.asarray(batch, dtype=np.float64)
    n, c = A.shape
    if np.any(A < 0):
        raise MiningError("nmf input must be nonnegative (apply ReLU first)")
    if not np.any(A > 0):
        raise MiningError("nmf input is all zero; nothing to factorize")
    if k < 1 or k > c:
        raise RankError(f"k={k} out of range for {c} channels")

    rng = substream(seed, TAG_NMF_INIT)
    init_scale = np.sqrt(A.mean() / k)
    W = rng.uniform(0.0, 1.0, size=(n, k)) * init_scale
    M = rng.uniform(0.0, 1.0, size=(k, c)) * init_scale

    prev = np.linalg.norm(A - W @ M)
    iters = 0
    for iters in range(1, max_iters + 1):
        W *= (A @ M.T) / (W @ (M @ M.T) + _NMF_EPS)
        M *= (W.T @ A) / ((W.T @ W) @ M + _NMF_EPS)
        err = np.linalg.norm(A - W @ M)
        if prev > 0 and (prev - err) / prev < tol:
            prev = err
            break
        prev = err

    return ConceptBasis(
        method="nmf", M=M.copy(), mean=np.zeros(c), k=k,
        reconstruction_error=float(prev), fit_iterations=iters,
        weights=W.copy(), layer=layer, model_id=model_id,
    )


def nmf_objective_history(A: np.ndarray, k: int, iters: int, seed: int = 0) -> np.ndarray:
    """Frobenius error after each multiplicative update pass (for monotonicity checks)."""
    rng = substream(seed, TAG_NMF_INIT)
    init_scale = np.sqrt(A.mean() / k)
    W = rng.uniform(0.0, 1.0, size=(A.shape[0], k)) * init_scale
    M = rng.uniform(0.0, 1.0, size=(k, A.shape[1])) * init_scale
    history = [np.linalg.norm(A - W @ M)]
    for _ in range(iters):
        W *= (A @ M.T) / (W @ (M @ M.T) + _NMF_EPS)
        M *= (W.T @ A) / ((W.T @ W) @ M + _NMF_EPS)
        history.append(np.linalg.norm(A - W @ M))
    return np.asarray(history)


# ---------------------------------------------------------------------------
# saliency


def upscale(values: np.ndarray, target: tuple) -> np.ndarray:
    """Bilinear, corner-aligned upscale of a 2-d map; output stays within source bounds."""
    h, w = values.shape
    H, W = target
    if H < h or W < w:
        raise MiningError(f"target {target} smaller than source {(h, w)}")
    if H == h and W == w:
        return values.copy()

    def axis_coords(src, dst):
        if src == 1:
            return np.zeros(dst), np.zeros(dst, dtype=np.int64), np.zeros(dst, dtype=np.int64)
        pos = np.arange(dst) * (src - 1) / (dst - 1)
        lo = np.floor(pos).astype(np.int64)
        lo = np.minimum(lo, src - 2)
        return pos - lo, lo, lo + 1

    fy, y0, y1 = axis_coords(h, H)
    fx, x0, x1 = axis_coords(w, W)
    rows = values[y0] * (1 - fy)[:, None] + values[y1] * fy[:, None]
    out = rows[:, x0] * (1 - fx)[None, :] + rows[:, x1] * fx[None, :]
    return out


def nearest_upscale(values: np.ndarray, target: tuple) -> np.ndarray:
    """Nearest-neighbor upscale (robustness comparisons only)."""
    h, w = values.shape
    H, W = target
    yi = np.minimum(np.rint(np.arange(H) * (h - 1) / max(H - 1, 1)).astype(np.int64), h - 1)
    xi = np.minimum(np.rint(np.arange(W) * (w - 1) / max(W - 1, 1)).astype(np.int64), w - 1)
    return values[np.ix_(yi, xi)]


def project_saliency(batch: ActivationBatch, basis: ConceptBasis, input_size: tuple) -> list:
    """Per-pixel concept coefficients for one image, as k saliency maps.

    The component matrix is (k, c) and pixels are length-c rows, so the
    back-projection is the per-pixel dot product with each component
    (a row-matrix product against M transposed).
    """
    if batch.b != 1:
        raise MiningError("project_saliency expects a single-image batch")
    if batch.c != basis.M.shape[1]:
        raise MiningError(f"channel mismatch: activations {batch.c}, basis {basis.M.shape[1]}")
    A = batch.data
    if basis.method == "pca":
        A = A - basis.mean
    coeffs = A @ basis.M.T  # (h*w, k)
    maps = []
    for i in range(basis.k):
        values = coeffs[:, i].reshape(batch.h, batch.w)
        maps.append(SaliencyMap(values=values, upscaled=upscale(values, input_size), concept_index=i))
    return maps


def concept_importance(model, layer: str, basis: ConceptBasis, y: int) -> np.ndarray:
    """Dot products of unit concept vectors with the class-y head direction.

    Requires the layers after `layer` to be global-average-pool
    (optionally flatten) then the final dense head, so the pooled feature
    space is linear in the logits and each class has one direction.
    """
    idx = model.layer_index(layer)
    tail = model.layers[idx + 1:]
    core = [l for l in tail if not isinstance(l, Flatten)]
    if len(core) != 2 or not isinstance(core[0], GlobalAvgPool) or not isinstance(core[1], Dense):
        raise MiningError(
            "unsupported head: layers after the cut must be global-average-pool (+flatten) + dense"
        )
    if y < 0 or y >= model.num_classes:
        raise MiningError(f"class {y} out of range")
    v = model.params[core[1].name]["w"].data[y]
    if v.shape[0] != basis.M.shape[1]:
        raise MiningError("basis channel count does not match head input width")
    norms = np.linalg.norm(basis.M, axis=1)
    if np.any(norms == 0):
        raise MiningError("basis contains a zero component")
    return (basis.M / norms[:, None]) @ v


# ---------------------------------------------------------------------------
# serialization


def save_basis(path, basis: ConceptBasis):
    header = {
        "method": basis.method, "k": basis.k,
        "c": int(basis.M.shape[1]),
        "reconstruction_error": basis.reconstruction_error,
        "fit_iterations": basis.fit_iterations,
        "has_variance": basis.explained_variance is not None,
        "layer": basis.layer, "model_id": basis.model_id,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(BASIS_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        f.write(np.ascontiguousarray(basis.M, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(basis.mean, dtype="<f8").tobytes())
        if basis.explained_variance is not None:
            f.write(np.ascontiguousarray(basis.explained_variance, dtype="<f8").tobytes())


def load_basis(path) -> ConceptBasis:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != BASIS_MAGIC:
        raise MiningError(f"{path}: not a concept basis file")
    hlen = struct.unpack("<I", blob[4:8])[0]
    header = json.loads(blob[8:8 + hlen])
    k, c = header["k"], header["c"]
    off = 8 + hlen
    M = np.frombuffer(blob, dtype="<f8", count=k * c, offset=off).reshape(k, c).copy()
    off += k * c * 8
    mean = np.frombuffer(blob, dtype="<f8", count=c, offset=off).copy()
    off += c * 8
    ev = None
    if header["has_variance"]:
        ev = np.frombuffer(blob, dtype="<f8", count=k, offset=off).copy()
    return ConceptBasis(
        method=header["method"], M=M, mean=mean, k=k,
        reconstruction_error=header["reconstruction_error"],
        fit_iterations=header["fit_iterations"], explained_variance=ev,
        layer=header["layer"], model_id=header["model_id"],
    )


def export_pgm(values: np.ndarray, path, sidecar_path=None):
    """Write a min-max normalized 8-bit binary PGM plus its normalization sidecar."""
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        scaled = np.rint((values - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(values)
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(scaled.astype(np.uint8).tobytes())
    sidecar = sidecar_path if sidecar_path is not None else str(path) + ".json"
    with open(sidecar, "w") as f:
        json.dump({"min": lo, "max": hi}, f, sort_keys=True)
        f.write("\n")
