"""xoshiro256** random stream, seeded through splitmix64.

Pure-Python state updates keep the draw sequence identical on every platform;
bulk draws convert the raw 64-bit words with numpy.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
_JUMP = (0x180EC6D33CFD0ABA, 0xD5A61266F0C9392C, 0xA9582618E03FC9AA, 0x39ABDC4529B1661C)


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


class RngStream:
    """Deterministic 64-bit generator (xoshiro256**)."""

    algorithm = "xoshiro256**"

    def __init__(self, seed: int = 0, state: tuple[int, int, int, int] | None = None):
        self.seed = int(seed) & MASK64
        if state is None:
            sm = self.seed
            words = []
            for _ in range(4):
                sm, z = splitmix64(sm)
                words.append(z)
            state = tuple(words)
        if not any(state):
            raise ValueError("xoshiro256** state must not be all zero")
        self.state = tuple(int(s) & MASK64 for s in state)

    def next_u64(self) -> int:
        return self.random_raw(1)[0]

    def random_raw(self, n: int) -> list[int]:
        s0, s1, s2, s3 = self.state
        out = [0] * n
        for i in range(n):
            x = (s1 * 5) & MASK64
            out[i] = ((((x << 7) | (x >> 57)) & MASK64) * 9) & MASK64
            t = (s1 << 17) & MASK64
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
        self.state = (s0, s1, s2, s3)
        return out

    def jump(self) -> None:
        """Advance by 2**128 draws."""
        acc = [0, 0, 0, 0]
        for word in _JUMP:
            for b in range(64):
                if word & (1 << b):
                    acc = [a ^ s for a, s in zip(acc, self.state)]
                self.random_raw(1)
        self.state = tuple(acc)

    def spawn(self, n: int) -> list[RngStream]:
        """``n`` non-overlapping child streams, each 2**128 draws apart."""
        children = []
        probe = RngStream(self.seed, self.state)
        for _ in range(n):
            probe.jump()
            children.append(RngStream(self.seed, probe.state))
        return children

    # -- derived draws ---------------------------------------------------
    def random(self, size=None):
        """Uniform floats in [0, 1) with 53 random bits."""
        count = 1 if size is None else int(np.prod(size))
        raw = np.array(self.random_raw(count), dtype=np.uint64)
        vals = (raw >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return float(vals[0]) if size is None else vals.reshape(size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        u = self.random(size)
        return low + (high - low) * u

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in [low, high), unbiased by rejection."""
        span = high - low
        if span <= 0:
            raise ValueError("empty integer range")
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            r = self.next_u64()
            if r < limit:
                return low + r % span

    def normal(self, mean: float = 0.0, std: float = 1.0, size=None):
        """Gaussian draws by the Box-Muller transform."""
        count = 1 if size is None else int(np.prod(size))
        pairs = (count + 1) // 2
        u = self.random(2 * pairs).reshape(pairs, 2)
        rad = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        ang = 2.0 * np.pi * u[:, 1]
        z = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1).reshape(-1)[:count]
        z = mean + std * z
        return float(z[0]) if size is None else z.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)
