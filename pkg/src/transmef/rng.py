"""Seedable 64-bit PRNG (splitmix64) with a documented stream discipline.

All randomness in the package (weight init, subregion sampling, corruption
parameters, data shuffling) flows through this generator so that a run is
fully determined by its seed.  Golden images and log hashes are portable
only between builds that use this exact generator and draw order.

Stream discipline: independent substreams are derived with ``derive(seed,
*tags)`` where the tags are small integers identifying the consumer
(see ``transmef.train`` for the tag layout).  Derivation folds each tag
through the splitmix64 finalizer, so substreams never overlap in practice.
"""

import numpy as np

_GOLDEN = 0x9E3779B97F4A7C15
_MASK = 0xFFFFFFFFFFFFFFFF

# Substream tags (first argument after the seed in ``derive``).  Keeping them
# in one place guarantees no two consumers share a stream.
STREAM_WEIGHTS = 1   # model weight initialization
STREAM_DATA = 2      # per-epoch dataset shuffling; derive(seed, STREAM_DATA, epoch)
STREAM_CORRUPT = 3   # derive(seed, STREAM_CORRUPT, step, slot, task_index)
STREAM_CROP = 4      # per-image random crop; derive(seed, STREAM_CROP, index)


def _mix(z: int) -> int:
    """splitmix64 output finalizer."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive(seed: int, *tags: int) -> int:
    """Derive an independent substream seed from a base seed and tag ints."""
    z = _mix(seed & _MASK)
    for t in tags:
        z = _mix(z ^ _mix((t + _GOLDEN) & _MASK))
    return z


class SplitMix64:
    """Counter-based splitmix64: state advances by a golden-ratio increment,
    outputs are the finalizer of the state.  Blocks of draws are vectorized
    with numpy uint64 arithmetic and are identical to sequential draws.
    """

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK
        return _mix(self._state)

    def u64_block(self, n: int) -> np.ndarray:
        """n sequential u64 draws as a uint64 array."""
        with np.errstate(over="ignore"):
            i = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self._state) + i * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self._state = (self._state + n * _GOLDEN) & _MASK
        return z

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        """Float64 uniform on [lo, hi) using the top 53 bits."""
        return lo + (hi - lo) * ((self.u64() >> 11) * 2.0**-53)

    def uniform_block(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        u = (self.u64_block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return lo + (hi - lo) * u

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer on the inclusive range [lo, hi], via modulo.

        Modulo bias is < 2**-58 for the range sizes used here (<= 256).
        """
        span = hi - lo + 1
        if span <= 0:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + self.u64() % span

    def shuffle(self, values: np.ndarray) -> None:
        """In-place Fisher-Yates shuffle of a 1-D array."""
        n = values.shape[0]
        if n < 2:
            return
        draws = self.u64_block(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] % np.uint64(i + 1))
            values[i], values[j] = values[j], values[i]
