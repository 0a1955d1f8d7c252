"""Deterministic counter-based random number generation.

The generator hashes a 64-bit counter with a 64-bit stream key
(SplitMix64 finalizer), so any draw is a pure function of
``(key, counter)``. That buys two things the pipeline relies on:

* identical seeds replay identical streams, run after run;
* ``split`` derives statistically independent child streams, so chunked
  or parallel evaluation consumes the same numbers regardless of how
  work is carved up.

Bulk generation is vectorized with numpy uint64 arithmetic, which wraps
modulo 2**64 exactly like the scalar recurrence.
"""
from __future__ import annotations

import numpy as np

from .errors import ValidationError

_MASK = 0xFFFF_FFFF_FFFF_FFFF
_GOLDEN = 0x9E37_79B9_7F4A_7C15
_SPLIT_SALT = 0xD1B5_4A32_D192_ED03
_MIX_1 = 0xBF58_476D_1CE4_E5B9
_MIX_2 = 0x94D0_49BB_1331_11EB

_TWO_NEG_53 = 2.0 ** -53


def _mix_scalar(z: int) -> int:
    z &= _MASK
    z = (z ^ (z >> 30)) * _MIX_1 & _MASK
    z = (z ^ (z >> 27)) * _MIX_2 & _MASK
    return z ^ (z >> 31)


class Rng:
    """Splittable counter-based generator producing float64 variates."""

    def __init__(self, seed: int, _counter: int = 0):
        if not isinstance(seed, (int, np.integer)):
            raise ValidationError(f"seed must be an integer, got {type(seed).__name__}")
        self.key = _mix_scalar(int(seed) ^ _GOLDEN)
        self.counter = int(_counter)

    def split(self, index: int) -> "Rng":
        """Derive an independent child stream identified by ``index``."""
        if index < 0:
            raise ValidationError("split index must be non-negative")
        child = Rng.__new__(Rng)
        child.key = _mix_scalar(self.key ^ _mix_scalar((index + 1) * _SPLIT_SALT))
        child.counter = 0
        return child

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + np.uint64(_GOLDEN) * idx
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX_1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX_2)
            z = z ^ (z >> np.uint64(31))
        return z

    def uniform(self, shape=None) -> np.ndarray:
        """Uniform float64 in [0, 1). Scalar shape ``None`` returns a 0-d draw."""
        size = 1 if shape is None else int(np.prod(shape))
        u = (self._raw(size) >> np.uint64(11)).astype(np.float64) * _TWO_NEG_53
        if shape is None:
            return float(u[0])
        return u.reshape(shape)

    def normal(self, shape=None) -> np.ndarray:
        """Standard normal float64 via the Box-Muller transform."""
        size = 1 if shape is None else int(np.prod(shape))
        pairs = (size + 1) // 2
        # Shift into (0, 1] so the log never sees zero.
        u1 = ((self._raw(pairs) >> np.uint64(11)).astype(np.float64) + 1.0) * _TWO_NEG_53
        u2 = (self._raw(pairs) >> np.uint64(11)).astype(np.float64) * _TWO_NEG_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:size]
        if shape is None:
            return float(z[0])
        return z.reshape(shape)

    def integers(self, upper: int, shape=None) -> np.ndarray:
        """Integers drawn uniformly from [0, upper)."""
        if upper <= 0:
            raise ValidationError("upper bound must be positive")
        u = self.uniform(shape if shape is not None else (1,))
        out = np.minimum(np.floor(np.asarray(u) * upper), upper - 1).astype(np.int64)
        if shape is None:
            return int(out[0])
        return out
