"""Dense float64 arithmetic and seeded random generation.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The helpers here
add shape checking and the few error-free transforms the aggregation code needs.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when tensor shapes do not agree."""


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


class Rng:
    """Counter-based deterministic generator (Philox) owned by the caller.

    ``Rng(seed, *keys)`` derives an independent stream for every key tuple, so
    per-subject and per-purpose streams never depend on draw order elsewhere.
    """

    def __init__(self, seed: int, *keys: int | str):
        self.seed = int(seed)
        self.keys = tuple(keys)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF] + [_key_to_int(k) for k in keys]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, *keys: int | str) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def gaussian(self, shape) -> np.ndarray:
        return self._gen.standard_normal(size=tuple(shape), dtype=DTYPE)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=tuple(shape))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self._gen.bit_generator.state = value

    def __deepcopy__(self, memo):
        clone = Rng.__new__(Rng)
        clone.seed = self.seed
        clone.keys = self.keys
        clone._gen = np.random.Generator(np.random.Philox())
        clone._gen.bit_generator.state = self.state
        return clone


def _key_to_int(key: int | str) -> int:
    if isinstance(key, str):
        # stable across processes, unlike hash()
        return int.from_bytes(key.encode("utf-8")[:16].ljust(16, b"\0"), "little") & (2**64 - 1)
    return int(key) & (2**64 - 1)


def gaussian(rng: Rng, shape) -> np.ndarray:
    """I.i.d. standard-normal tensor; advances ``rng``."""
    return rng.gaussian(shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise DimensionError(f"hadamard needs identical shapes, got {a.shape} and {b.shape}")
    return a * b


# Error-free transforms (Dekker / Knuth). Used for correctly rounded weighted sums.

_SPLITTER = 134217729.0  # 2**27 + 1


def _split(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = _SPLITTER * a
    hi = c - (c - a)
    return hi, a - hi


def two_product(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (p, e) with p = fl(a*b) and a*b == p + e exactly."""
    p = a * b
    a_hi, a_lo = _split(a)
    b_hi, b_lo = _split(b)
    e = a_lo * b_lo - (((p - a_hi * b_hi) - a_lo * b_hi) - a_hi * b_lo)
    return p, e


def two_sum(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (s, e) with s = fl(a+b) and a+b == s + e exactly."""
    s = a + b
    bb = s - a
    e = (a - (s - bb)) + (b - bb)
    return s, e


def weighted_mean(tensors: list[np.ndarray], counts: list[int]) -> np.ndarray:
    """Compute sum_s (counts[s] / total) * tensors[s] to within about one ulp.

    Products count*tensor are split exactly, accumulated with compensated
    summation in list order, then divided by the total with a residual
    correction. Identical inputs therefore come back bit-identical.
    """
    if not tensors:
        raise ValueError("weighted_mean needs at least one tensor")
    total = float(sum(counts))
    s = np.zeros_like(tensors[0])
    err = np.zeros_like(tensors[0])
    for t, c in zip(tensors, counts):
        p, pe = two_product(np.full_like(t, float(c)), t)
        s, se = two_sum(s, p)
        err = err + (se + pe)
    hi, lo = two_sum(s, err)
    q = hi / total
    qt, qte = two_product(q, np.full_like(q, total))
    resid = ((hi - qt) - qte + lo) / total
    return q + resid
