"""Counter-based random streams.

Each stream is a pure function of (seed, stream_id, counter): draw i of a
stream is splitmix64 evaluated at ``base + (i+1)*GOLDEN`` where ``base``
mixes seed and stream id.  Streams therefore never interact - interleaving
draws from two streams yields the same per-stream sequences as drawing them
serially - and any point of the pipeline can derive its own stream from
stable string/int keys without caring about global draw order.

Everything here is reproducible bit-for-bit from the integers alone, with
no dependency on numpy's generator internals, so the sequences can be
re-derived in any language.
"""

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_STREAM_SALT = np.uint64(0x6A09E667F3BCC909)


def _mix64(x):
    """splitmix64 finalizer on uint64 scalars or arrays; wraparound intended."""
    x = np.uint64(x) if np.isscalar(x) else x.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _MIX1
        x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


def stable_hash64(text: str) -> int:
    """FNV-1a over UTF-8 bytes, then one mixing round. Stable across runs."""
    h = np.uint64(0xCBF29CE484222325)
    prime = np.uint64(0x100000001B3)
    for b in text.encode("utf-8"):
        h = (h ^ np.uint64(b)) * prime
    return int(_mix64(h))


class RngStream:
    """One independent draw sequence identified by (seed, stream_id)."""

    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)
        self._base = _mix64(_mix64(np.uint64(self.seed)) ^ _mix64(np.uint64(self.stream_id) ^ _STREAM_SALT))

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix64(self._base + idx * _GOLDEN)

    def uniform(self, shape=None) -> np.ndarray | float:
        """float64 in [0, 1)."""
        if shape is None:
            return float(self._raw(1)[0] >> np.uint64(11)) * 2.0 ** -53
        n = int(np.prod(shape))
        out = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return out.reshape(shape)

    def normal(self, shape=None) -> np.ndarray | float:
        """Standard normals via Box-Muller on consecutive uniform pairs."""
        scalar = shape is None
        n = 1 if scalar else int(np.prod(shape))
        pairs = (n + 1) // 2
        w = self._raw(2 * pairs)
        u1 = ((w[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0 ** -53  # (0, 1]
        u2 = (w[1::2] >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return float(z[0]) if scalar else z[:n].reshape(shape)

    def randint(self, n: int) -> int:
        """Integer in [0, n). Negligible modulo bias at desk scales."""
        if n <= 0:
            raise ValueError("randint: n must be positive")
        return min(int(self.uniform() * n), n - 1)

    def integers(self, n: int, size: int) -> np.ndarray:
        u = self.uniform((size,))
        return np.minimum((u * n).astype(np.int64), n - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), uniform without replacement."""
        if k > n:
            raise ValueError(f"choice: k={k} exceeds population {n}")
        return self.permutation(n)[:k]


def derive_key(seed: int, *parts) -> int:
    """Fold a master seed and stable key parts into one 64-bit key."""
    acc = _mix64(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF))
    with np.errstate(over="ignore"):
        for part in parts:
            word = np.uint64(part & 0xFFFFFFFFFFFFFFFF) if isinstance(part, (int, np.integer)) \
                else np.uint64(stable_hash64(str(part)))
            acc = _mix64(acc ^ word) + _GOLDEN
    return int(_mix64(acc))


def derive(seed: int, *parts) -> RngStream:
    """Derive a named stream from a master seed and stable key parts."""
    return RngStream(seed, derive_key(0, *parts))
