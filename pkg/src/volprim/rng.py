"""Counter-based random streams.

All randomness in the renderer is derived by hashing (seed, pixel, sample,
draw-index) tuples with a splitmix64-style finalizer, so any draw can be
regenerated from its indices alone.  This is what makes path replay possible:
the backward pass reconstructs the exact random sequence of the primal pass
without storing it, and worker scheduling can never change the result.
"""

from __future__ import annotations

import numpy as np

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix(z):
    # uint64 wraparound is the point; silence the overflow warnings.
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def hash_words(*words):
    """Hash integer words (scalars or broadcastable uint64 arrays) to uint64."""
    state = _GOLDEN
    with np.errstate(over="ignore"):
        for w in words:
            w = np.asarray(w, dtype=np.uint64)
            state = _mix((state + _GOLDEN) ^ (w * _M1 + _GOLDEN))
    return state


def uniform_field(seed, dim, *ids):
    """Uniform floats in the open interval (0, 1) indexed by counters.

    ``ids`` are broadcast together; ``dim`` distinguishes successive draws of
    the same logical stream.  Identical arguments always produce identical
    output.
    """
    bits = hash_words(np.uint64(seed), np.uint64(dim), *ids)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)


class PathRNG:
    """Sequential view of one counter-based stream (one pixel/sample pair).

    Draws are numbered internally; recreating the object with the same seed
    and ids replays the sequence exactly.
    """

    def __init__(self, seed, *ids):
        self._seed = int(seed)
        self._ids = tuple(int(i) for i in ids)
        self._dim = 0

    def next_1d(self):
        u = uniform_field(self._seed, self._dim, *self._ids)
        self._dim += 1
        return float(u)

    def next_2d(self):
        return self.next_1d(), self.next_1d()

    def fork(self, tag):
        """Independent child stream (e.g. one per shadow ray)."""
        return PathRNG(self._seed, *self._ids, 0xF0F0F0F0, tag)
