"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new Tensor carrying a closure that routes the output
gradient back to whichever inputs require one. Graphs are only retained
when some input requires a gradient, so plain inference pays no
bookkeeping cost. All math is float64.
"""

from __future__ import annotations

import numpy as np


class TensorError(Exception):
    """Base class for tensor engine errors."""


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer."""

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Accumulate d(self)/d(ancestor) into every ancestor's .grad.

        Without a seed, self must be scalar and the seed is 1.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        _accum(self, np.asarray(seed, dtype=np.float64))

        # iterative post-order topological sort (graphs can be deep)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _result(data: np.ndarray, parents: tuple, backward) -> Tensor:
    """Build an op output, keeping graph structure only if some parent needs it."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _result(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: shape mismatch {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return _result(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _result(a.data * b.data, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        if x.requires_grad:
            _accum(x, g * s)

    return _result(x.data * s, (x,), backward)


def shift(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        if x.requires_grad:
            _accum(x, g)

    return _result(x.data + s, (x,), backward)


def tanh_t(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)

    def backward(g):
        if x.requires_grad:
            _accum(x, g * (1.0 - out_data * out_data))

    return _result(out_data, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        if x.requires_grad:
            _accum(x, np.full_like(x.data, float(g)))

    return _result(np.asarray(x.data.sum()), (x,), backward)


def l2_norm_sum(x: Tensor, zero_tol: float = 1e-12) -> Tensor:
    """Sum over the batch of per-sample L2 norms of x[b].

    The norm's gradient at (numerically) zero is taken as the zero
    subgradient: samples with norm <= zero_tol contribute no gradient,
    so an exact zero perturbation is a fixed point.
    """
    b = x.data.shape[0]
    flat = x.data.reshape(b, -1)
    norms = np.sqrt((flat * flat).sum(axis=1))

    def backward(g):
        if x.requires_grad:
            coef = np.where(norms > zero_tol, float(g) / np.maximum(norms, zero_tol), 0.0)
            _accum(x, x.data * coef.reshape((b,) + (1,) * (x.data.ndim - 1)))

    return _result(np.asarray(norms.sum()), (x,), backward)


# ---------------------------------------------------------------------------
# layer ops


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def backward(g):
        if x.requires_grad:
            _accum(x, g * mask)

    return _result(x.data * mask, (x,), backward)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    b, c, oh, ow = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, oh * ow, c * kh * kw)
    return cols, oh, ow


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), zero padding.

    x: (B, Cin, H, W); w: (Cout, Cin, kh, kw); b: (Cout,).
    Output spatial size: floor((in + 2*pad - kernel) / stride) + 1.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    bsz, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != weight channels {cin_w}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError("conv2d: kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols, oh, ow = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T + b.data
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(bsz, cout, oh, ow)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(bsz, oh * ow, cout)
        if w.requires_grad:
            _accum(w, np.tensordot(gmat, cols, axes=([0, 1], [0, 1])).reshape(w.data.shape))
        if b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = gmat @ wmat  # (B, oh*ow, cin*kh*kw)
            dwin = dcols.reshape(bsz, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dwin[..., i, j]
            if padding:
                _accum(x, dxp[:, :, padding:padding + h, padding:padding + wd])
            else:
                _accum(x, dxp)

    return _result(out, (x, w, b), backward)


def maxpool2d(x: Tensor, size: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling; gradient routes to the first maximal element per window."""
    if stride is None:
        stride = size
    bsz, c, h, w = x.data.shape
    if h < size or w < size:
        raise ShapeError(f"maxpool2d: window {size} larger than input {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (size, size), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    flat = win.reshape(bsz, c, oh, ow, size * size)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            for p in range(size * size):
                i, j = divmod(p, size)
                contrib = np.where(idx == p, g, 0.0)
                dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += contrib
            _accum(x, dx)

    return _result(np.ascontiguousarray(out), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    bsz, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        if x.requires_grad:
            _accum(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy())

    return _result(out, (x,), backward)


def flatten2d(x: Tensor) -> Tensor:
    bsz = x.data.shape[0]
    in_shape = x.data.shape

    def backward(g):
        if x.requires_grad:
            _accum(x, g.reshape(in_shape))

    return _result(x.data.reshape(bsz, -1), (x,), backward)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine layer: x (B, D) @ w.T (D, out) + b."""
    if x.data.ndim != 2:
        raise ShapeError("dense expects flattened (B, D) input")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"dense: input width {x.data.shape[1]} != weight width {w.data.shape[1]}")
    out = x.data @ w.data.T + b.data

    def backward(g):
        if w.requires_grad:
            _accum(w, g.T @ x.data)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))
        if x.requires_grad:
            _accum(x, g @ w.data)

    return _result(out, (x, w, b), backward)


# ---------------------------------------------------------------------------
# losses and heads


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array (no gradient)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def cross_entropy_with_logits(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy from raw logits, log-sum-exp stabilized.

    labels: int array (B,). reduction: "mean" or "sum" over the batch.
    Raises NonFiniteError if the loss is not finite.
    """
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    bsz = z.shape[0]
    if labels.shape != (bsz,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {bsz}")
    with np.errstate(over="ignore", invalid="ignore"):
        m = z.max(axis=1, keepdims=True)
        ez = np.exp(z - m)
        se = ez.sum(axis=1, keepdims=True)
        probs = ez / se
        lse = m[:, 0] + np.log(se[:, 0])
        nll = lse - z[np.arange(bsz), labels]
    if reduction == "mean":
        loss = nll.mean()
        grad_scale = 1.0 / bsz
    elif reduction == "sum":
        loss = nll.sum()
        grad_scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    if not np.isfinite(loss):
        raise NonFiniteError("cross-entropy loss is not finite")

    def backward(g):
        if logits.requires_grad:
            d = probs.copy()
            d[np.arange(bsz), labels] -= 1.0
            _accum(logits, d * (float(g) * grad_scale))

    return _result(np.asarray(loss), (logits,), backward)


def target_margin(logits: Tensor, targets) -> Tensor:
    """Sum over the batch of max(max_{j != t} z_j - z_t, 0).

    Zero exactly when every sample's top logit is its target class; the
    standard margin surrogate for a targeted misclassification objective.
    """
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data
    bsz = z.shape[0]
    rows = np.arange(bsz)
    zt = z[rows, targets]
    masked = z.copy()
    masked[rows, targets] = -np.inf
    jmax = masked.argmax(axis=1)
    h = np.maximum(masked[rows, jmax] - zt, 0.0)

    def backward(g):
        if logits.requires_grad:
            d = np.zeros_like(z)
            active = h > 0.0
            d[rows[active], jmax[active]] += float(g)
            d[rows[active], targets[active]] -= float(g)
            _accum(logits, d)

    return _result(np.asarray(h.sum()), (logits,), backward)
