"""Deterministic 64-bit PRNG: splitmix64 seeding feeding xoshiro256**.

Every random draw in the package goes through this generator so that a
single root seed fixes weights, shuffles and corpora bit-for-bit.
"""

MASK64 = (1 << 64) - 1


def splitmix64(state):
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def fnv1a64(text):
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def derive_seed(root, name):
    """Child seed for a named stream (parameter, phase, split...)."""
    _, out = splitmix64((root ^ fnv1a64(name)) & MASK64)
    return out


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** generator.

    Not thread-safe; give each worker its own instance via :func:`derive_seed`.
    """

    def __init__(self, seed):
        state = seed & MASK64
        s = []
        for _ in range(4):
            state, out = splitmix64(state)
            s.append(out)
        self.s = s

    @classmethod
    def stream(cls, root, name):
        return cls(derive_seed(root, name))

    def next_u64(self):
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self):
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low, high):
        return low + (high - low) * self.random()

    def randbelow(self, n):
        """Unbiased integer in [0, n) (Lemire-style rejection)."""
        if n <= 0:
            raise ValueError("n must be positive")
        threshold = ((1 << 64) - n) % n
        while True:
            x = self.next_u64()
            m = x * n
            if (m & MASK64) >= threshold:
                return m >> 64

    def randint(self, low, high):
        """Integer in the closed range [low, high]."""
        return low + self.randbelow(high - low + 1)

    def choice(self, seq):
        return seq[self.randbelow(len(seq))]

    def shuffle(self, items):
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def uniform_array(self, n, low, high):
        import numpy as np

        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = low + (high - low) * ((self.next_u64() >> 11) * (1.0 / (1 << 53)))
        return out
