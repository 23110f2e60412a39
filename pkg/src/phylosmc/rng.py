"""Counter-based random streams.

Every stochastic component draws from a stream keyed by integers
(seed, purpose, rank, particle) instead of sharing one stateful
generator. Streams are independent Philox instances, so the draws a
particle makes are a pure function of its key. That is what makes runs
reproducible regardless of how particles are scheduled across threads.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# purpose codes for stream keys
RESAMPLE = 1
PROPOSE = 2
SELECT = 3
MINIBATCH = 4
DATAGEN = 5


def _mix64(x: int) -> int:
    """splitmix64 finalizer; avalanches one 64-bit word."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1E4E5B97) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def stream_key(seed: int, purpose: int, rank: int = 0, particle: int = 0) -> int:
    """128-bit Philox key derived by chaining the mixed fields."""
    h = _mix64(seed & _MASK64)
    for field in (purpose, rank, particle):
        h = _mix64(h ^ ((field + 0x0123456789ABCDEF) & _MASK64))
    lo = _mix64(h ^ 0xA5A5A5A5A5A5A5A5)
    return (h << 64) | lo


def substream(seed: int, purpose: int, rank: int = 0, particle: int = 0) -> np.random.Generator:
    """Independent generator for one (seed, purpose, rank, particle) slot.

    Within a slot, draws must be consumed in a canonical order that does
    not depend on parameter values, so common-random-number comparisons
    across parameter perturbations stay aligned.
    """
    return np.random.Generator(np.random.Philox(key=stream_key(seed, purpose, rank, particle)))


def derive_seed(seed: int, *fields: int) -> int:
    """Deterministic child seed from a parent seed and integer labels.

    Used for per-step training seeds so every optimizer step keys a
    disjoint family of streams.
    """
    h = _mix64(seed & _MASK64)
    for field in fields:
        h = _mix64(h ^ ((field + 0x5851F42D4C957F2D) & _MASK64))
    return h


def gumbel(rng: np.random.Generator, size) -> np.ndarray:
    """Standard Gumbel noise via -log(-log U), clipped away from 0 and 1."""
    u = rng.random(size)
    tiny = np.finfo(np.float64).tiny
    return -np.log(-np.log(np.clip(u, tiny, 1.0 - 1e-16)))


def gumbel_argmax(rng: np.random.Generator, log_weights: np.ndarray, n: int) -> np.ndarray:
    """n independent categorical draws proportional to exp(log_weights).

    The Gumbel-max construction: argmax_i(log w_i + G_i) is an exact
    categorical sample. Returns an int array of n indices.
    """
    g = gumbel(rng, (n, log_weights.shape[0]))
    return np.argmax(log_weights[None, :] + g, axis=1)
