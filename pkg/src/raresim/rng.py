"""Counter-based noise streams.

Every Gaussian increment is a pure function of ``(master_seed, sample_index,
step, block)``, computed with the Philox4x32-10 bijection of Salmon et al.
(SC'11).  Nothing is carried between draws, so a path's noise does not depend
on which worker simulated it, on batch sizes, or on the order in which paths
are processed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "philox4x32",
    "NoiseStream",
    "standard_normals",
    "uniforms",
    "BRIDGE_BLOCK",
]

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)

# counter word c1 reserved for auxiliary uniforms (exit-bridge tests)
BRIDGE_BLOCK = 0x80000000


def philox4x32(counter, key, rounds: int = 10):
    """Philox4x32 block function on broadcastable uint32 words.

    Parameters
    ----------
    counter : tuple of 4 array_like
        Counter words ``(c0, c1, c2, c3)``; values must fit in 32 bits.
    key : tuple of 2 int
        Key words ``(k0, k1)``.

    Returns
    -------
    tuple of 4 ndarray
        Output words as ``uint64`` arrays holding 32-bit values.
    """
    c0, c1, c2, c3 = np.broadcast_arrays(
        *(np.asarray(c, dtype=np.uint64) & _MASK32 for c in counter)
    )
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for _ in range(rounds):
        p0 = c0 * _M0
        p1 = c2 * _M1
        hi0, lo0 = p0 >> _SHIFT32, p0 & _MASK32
        hi1, lo1 = p1 >> _SHIFT32, p1 & _MASK32
        c0, c1, c2, c3 = hi1 ^ c1 ^ np.uint64(k0), lo1, hi0 ^ c3 ^ np.uint64(k1), lo0
        k0 = (k0 + _W0) & 0xFFFFFFFF
        k1 = (k1 + _W1) & 0xFFFFFFFF
    return c0, c1, c2, c3


def _to_unit(hi, lo):
    # 53-bit uniform strictly inside (0, 1)
    bits = ((hi >> np.uint64(5)) << np.uint64(26)) | (lo >> np.uint64(6))
    return (bits.astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def _split_key(seed: int):
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return seed & 0xFFFFFFFF, seed >> 32


def _counters(indices, step: int, block: int):
    idx = np.asarray(indices, dtype=np.uint64)
    return (
        np.uint64(step & 0xFFFFFFFF),
        np.uint64(block & 0xFFFFFFFF),
        idx & _MASK32,
        idx >> _SHIFT32,
    )


def standard_normals(seed: int, indices, step: int, d: int) -> np.ndarray:
    """Standard normal draws of shape ``(len(indices), d)`` for one time step.

    Each call to the block function yields two Box-Muller normals, so
    ``ceil(d / 2)`` blocks are consumed per step.
    """
    indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    key = _split_key(seed)
    cols = []
    for block in range((d + 1) // 2):
        w0, w1, w2, w3 = philox4x32(_counters(indices, step, block), key)
        u1 = _to_unit(w0, w1)
        u2 = _to_unit(w2, w3)
        r = np.sqrt(-2.0 * np.log(u1))
        cols.append(r * np.cos(2.0 * np.pi * u2))
        cols.append(r * np.sin(2.0 * np.pi * u2))
    return np.stack(cols[:d], axis=-1)


def uniforms(seed: int, indices, step: int, block: int = BRIDGE_BLOCK) -> np.ndarray:
    """Uniform (0, 1) draws, one per index, from a reserved counter block."""
    indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    w0, w1, _, _ = philox4x32(_counters(indices, step, block), _split_key(seed))
    return _to_unit(w0, w1)


@dataclass
class NoiseStream:
    """Brownian increments for a single sample index.

    ``step_counter`` is the only state; rewinding it replays the same
    increments.
    """

    master_seed: int
    sample_index: int
    step_counter: int = 0

    def increment(self, dt: float, d: int) -> np.ndarray:
        """Return ``sqrt(dt) * Z`` for the current step and advance."""
        z = standard_normals(self.master_seed, [self.sample_index], self.step_counter, d)[0]
        self.step_counter += 1
        return np.sqrt(dt) * z

    def uniform(self, step: int) -> float:
        return float(uniforms(self.master_seed, [self.sample_index], step)[0])
