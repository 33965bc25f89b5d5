"""Deterministic procedural image dataset plus IDX-format file IO.

Each class renders one shape family (circle, triangle, bars, checker,
ring, cross, square, stripes, ...) at randomized position and scale.
Foreground color is sampled per image from a shared mid-contrast range,
so the classifier has to use spatial features: that gives the CNN
part-like concepts (edges, blobs, stripes) for factorization-based
discovery, and keeps decision boundaries within reach of small-budget
pixel attacks. Texture families are confined to a random box for the
same reason; whole-image textures make a classifier far more robust
than the localized shapes.

Per-image randomness comes from a counter-based stream keyed by
(seed, image index); generation is byte-reproducible across platforms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .rng import TAG_DATAGEN_IMAGE, TAG_DATAGEN_SPLIT, substream

IDX_MAGIC_LABELS = 0x00000801
IDX_MAGIC_IMAGES_3D = 0x00000803
IDX_MAGIC_IMAGES_4D = 0x00000804


class IdxFormatError(Exception):
    pass


@dataclass(frozen=True)
class ShapeDatasetConfig:
    num_classes: int = 8
    samples_per_class: int = 50
    image_size: tuple = (32, 32)
    channels: int = 3
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not 4 <= self.num_classes <= 10:
            raise ValueError("num_classes must be in [4, 10]")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.channels != 3:
            raise ValueError("generator renders 3-channel images")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if len(self.image_size) != 2 or min(self.image_size) < 8:
            raise ValueError("image_size must be (H, W) with H, W >= 8")


@dataclass
class LabeledImages:
    """Images (N, C, H, W) float64 in [0,1] with integer labels (N,)."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels disagree on sample count")

    def __len__(self):
        return self.images.shape[0]

    def of_class(self, cls: int) -> np.ndarray:
        return self.images[self.labels == cls]


# ---------------------------------------------------------------------------
# shape families

_BG = np.array([0.12, 0.12, 0.14])
_FG_RANGE = (0.30, 0.65)


def _grid(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy + 0.5) / h, (xx + 0.5) / w


def _box(rng, h, w):
    """Random axis-aligned region confining the texture families."""
    cy, cx = rng.uniform(0.38, 0.62, size=2)
    sy, sx = rng.uniform(0.22, 0.38, size=2)
    yy, xx = _grid(h, w)
    return (np.abs(yy - cy) < sy) & (np.abs(xx - cx) < sx)


def _mask_circle(rng, h, w):
    cy, cx = rng.uniform(0.35, 0.65, size=2)
    r = rng.uniform(0.15, 0.28)
    yy, xx = _grid(h, w)
    return ((yy - cy) ** 2 + (xx - cx) ** 2) < r * r


def _mask_triangle(rng, h, w):
    cy, cx = rng.uniform(0.4, 0.6, size=2)
    s = rng.uniform(0.2, 0.33)
    yy, xx = _grid(h, w)
    inside = (yy > cy - s) & (yy < cy + s)
    half = (yy - (cy - s)) / 2.0  # width grows toward the base
    return inside & (np.abs(xx - cx) < half)


def _mask_hbars(rng, h, w):
    box = _box(rng, h, w)
    period = rng.integers(4, 7)
    phase = rng.integers(0, period)
    rows = np.arange(h)[:, None]
    stripes = np.broadcast_to((rows + phase) % period < (period + 1) // 2, (h, w))
    return box & stripes


def _mask_checker(rng, h, w):
    box = _box(rng, h, w)
    cell = rng.integers(3, 6)
    py, px = rng.integers(0, cell, size=2)
    yy, xx = np.mgrid[0:h, 0:w]
    return box & (((yy + py) // cell + (xx + px) // cell) % 2 == 0)


def _mask_ring(rng, h, w):
    cy, cx = rng.uniform(0.38, 0.62, size=2)
    r_out = rng.uniform(0.2, 0.32)
    r_in = r_out * rng.uniform(0.5, 0.68)
    yy, xx = _grid(h, w)
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return (d2 < r_out * r_out) & (d2 > r_in * r_in)


def _mask_cross(rng, h, w):
    cy, cx = rng.uniform(0.4, 0.6, size=2)
    arm = rng.uniform(0.25, 0.4)
    t = rng.uniform(0.05, 0.1)
    yy, xx = _grid(h, w)
    horiz = (np.abs(yy - cy) < t) & (np.abs(xx - cx) < arm)
    vert = (np.abs(xx - cx) < t) & (np.abs(yy - cy) < arm)
    return horiz | vert


def _mask_square(rng, h, w):
    cy, cx = rng.uniform(0.38, 0.62, size=2)
    s = rng.uniform(0.14, 0.26)
    yy, xx = _grid(h, w)
    return (np.abs(yy - cy) < s) & (np.abs(xx - cx) < s)


def _mask_dstripes(rng, h, w):
    box = _box(rng, h, w)
    period = rng.integers(5, 9)
    phase = rng.integers(0, period)
    yy, xx = np.mgrid[0:h, 0:w]
    return box & ((yy + xx + phase) % period < (period + 1) // 2)


def _mask_vbars(rng, h, w):
    box = _box(rng, h, w)
    period = rng.integers(4, 7)
    phase = rng.integers(0, period)
    cols = np.arange(w)[None, :]
    stripes = np.broadcast_to((cols + phase) % period < (period + 1) // 2, (h, w))
    return box & stripes


def _mask_diamond(rng, h, w):
    cy, cx = rng.uniform(0.38, 0.62, size=2)
    r = rng.uniform(0.18, 0.3)
    yy, xx = _grid(h, w)
    return (np.abs(yy - cy) + np.abs(xx - cx)) < r


_FAMILIES = [
    _mask_circle, _mask_triangle, _mask_hbars, _mask_checker, _mask_ring,
    _mask_cross, _mask_square, _mask_dstripes, _mask_vbars, _mask_diamond,
]


def _render(cls: int, rng: np.random.Generator, h: int, w: int, noise_std: float) -> np.ndarray:
    mask = _FAMILIES[cls](rng, h, w).astype(np.float64)
    fg = rng.uniform(*_FG_RANGE, size=3)
    bg = _BG + rng.uniform(-0.04, 0.04, size=3)
    img = bg[:, None, None] * (1.0 - mask) + fg[:, None, None] * mask
    if noise_std > 0:
        img = img + rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate(config: ShapeDatasetConfig) -> LabeledImages:
    """Render the full class-balanced dataset; index i holds class i // samples_per_class."""
    h, w = config.image_size
    n = config.num_classes * config.samples_per_class
    images = np.empty((n, 3, h, w), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        cls = i // config.samples_per_class
        rng = substream(config.seed, TAG_DATAGEN_IMAGE, i)
        images[i] = _render(cls, rng, h, w, config.noise_std)
        labels[i] = cls
    return LabeledImages(images, labels)


def stratified_split(ds: LabeledImages, test_fraction: float = 0.2, seed: int = 0):
    """Per-class shuffled split into (train, test); deterministic for a fixed seed."""
    train_idx, test_idx = [], []
    for cls in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == cls)
        perm = substream(seed, TAG_DATAGEN_SPLIT, int(cls)).permutation(len(idx))
        n_test = max(1, int(round(len(idx) * test_fraction)))
        test_idx.extend(idx[perm[:n_test]])
        train_idx.extend(idx[perm[n_test:]])
    train_idx = np.sort(np.asarray(train_idx))
    test_idx = np.sort(np.asarray(test_idx))
    return (
        LabeledImages(ds.images[train_idx], ds.labels[train_idx]),
        LabeledImages(ds.images[test_idx], ds.labels[test_idx]),
    )


# ---------------------------------------------------------------------------
# IDX files (big-endian magic + dims, ubyte payload)


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise IdxFormatError(f"truncated {what}")
    return buf


def load_idx(images_path, labels_path) -> LabeledImages:
    """Read an ubyte IDX image/label file pair; pixels rescaled to [0,1].

    Accepts 3-d image files (N, H, W; magic 0x00000803) read as single-channel
    and 4-d files (N, C, H, W; magic 0x00000804).
    """
    with open(images_path, "rb") as f:
        head = f.read(4)
        if len(head) < 4:
            raise IdxFormatError("image file: bad magic (file too short)")
        magic = struct.unpack(">I", head)[0]
        if magic == IDX_MAGIC_IMAGES_3D:
            n, h, w = struct.unpack(">III", _read_exact(f, 12, "image header"))
            c = 1
        elif magic == IDX_MAGIC_IMAGES_4D:
            n, c, h, w = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        else:
            raise IdxFormatError(f"image file: bad magic 0x{magic:08x}")
        payload = _read_exact(f, n * c * h * w, "image payload")
        if f.read(1):
            raise IdxFormatError("image file: trailing bytes")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(n, c, h, w).astype(np.float64) / 255.0

    with open(labels_path, "rb") as f:
        head = f.read(4)
        if len(head) < 4:
            raise IdxFormatError("label file: bad magic (file too short)")
        magic = struct.unpack(">I", head)[0]
        if magic != IDX_MAGIC_LABELS:
            raise IdxFormatError(f"label file: bad magic 0x{magic:08x}")
        (n_lab,) = struct.unpack(">I", _read_exact(f, 4, "label header"))
        labels = np.frombuffer(_read_exact(f, n_lab, "label payload"), dtype=np.uint8).astype(np.int64)

    if n_lab != n:
        raise IdxFormatError(f"count mismatch: {n} images vs {n_lab} labels")
    return LabeledImages(images, labels)


def save_idx(ds: LabeledImages, images_path, labels_path):
    """Write the dataset as an ubyte IDX pair (4-d images unless single-channel)."""
    n, c, h, w = ds.images.shape
    pixels = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        if c == 1:
            f.write(struct.pack(">IIII", IDX_MAGIC_IMAGES_3D, n, h, w))
            f.write(pixels[:, 0].tobytes())
        else:
            f.write(struct.pack(">IIIII", IDX_MAGIC_IMAGES_4D, n, c, h, w))
            f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_MAGIC_LABELS, n))
        f.write(ds.labels.astype(np.uint8).tobytes())
