"""Seed-derived random streams on a counter-based generator.

Every random draw in the package comes from a Philox stream keyed by
(seed, tag, index), so results are reproducible across platforms and
independent of call order. Tags namespace the call sites; indices give
per-item streams (per image, per layer, ...).
"""

import numpy as np

_MASK64 = (1 << 64) - 1
_MASK32 = (1 << 32) - 1

# call-site tags; never reuse a value
TAG_DATAGEN_IMAGE = 1
TAG_DATAGEN_SPLIT = 2
TAG_MODEL_INIT = 3
TAG_TRAIN_SHUFFLE = 4
TAG_ATTACK_START = 5
TAG_PATCH_INIT = 6
TAG_NMF_INIT = 7


def substream(seed: int, tag: int, index: int = 0) -> np.random.Generator:
    """Return an independent generator for (seed, tag, index)."""
    key = np.array(
        [seed & _MASK64, ((tag & _MASK32) << 32) | (index & _MASK32)],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))
