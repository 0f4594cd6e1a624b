"""Normal distribution helpers and reproducible random streams."""

from __future__ import annotations

import numpy as np
from scipy import special

# stream identifiers for counter-based substreams
MODEL_STREAM = 0
TEST_STREAM = 1
MC_STREAM = 2


def norm_cdf(x):
    return special.ndtr(x)


def norm_ppf(p):
    return special.ndtri(p)


def two_sided_p(t: float) -> float:
    """``2 * (1 - Phi(|t|))``, evaluated in the tail to avoid cancellation."""
    return float(min(1.0, 2.0 * special.ndtr(-abs(t))))


def stream(seed: int, *key: int) -> np.random.Generator:
    """Philox generator for the substream ``key`` of ``seed``.

    The same ``(seed, key)`` always yields the same stream, independent of the
    order in which streams are requested.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
