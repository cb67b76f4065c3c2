"""Deterministic, splittable random streams and parameter initialization.

Streams are numpy Philox generators (counter-based), keyed by hashing the
64-bit seed together with a stream name. Splitting by name makes every
parameter's initial values independent of the order in which parameters are
created, so adding a module never reshuffles another module's init.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .errors import ContractError
from .tensor import DEFAULT_DTYPE, Tensor


def _derive_key(seed: int, name: str) -> int:
    digest = hashlib.blake2b(f"{seed}/{name}".encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


class SeededRng:
    """A named, reproducible random stream rooted at a 64-bit seed."""

    def __init__(self, seed: int, name: str = ""):
        self.seed = int(seed)
        self.name = name
        self.generator = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, name)))

    def split(self, name: str) -> "SeededRng":
        """Child stream; same (seed, path) always yields the same draws."""
        path = f"{self.name}/{name}" if self.name else name
        return SeededRng(self.seed, path)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self.generator.standard_normal(size=shape) * scale

    def integers(self, low: int, high: int) -> int:
        return int(self.generator.integers(low, high))

    def random(self) -> float:
        return float(self.generator.random())

    def shuffle_order(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n), fully determined by the stream."""
        order = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = int(self.generator.integers(0, i + 1))
            order[i], order[j] = order[j], order[i]
        return order


def _fans(shape) -> tuple[int, int]:
    if len(shape) == 1:
        return shape[0], shape[0]
    fan_in = shape[0]
    fan_out = shape[1]
    for extra in shape[2:]:
        fan_out *= extra
    return fan_in, fan_out


def xavier_uniform_init(shape, rng: SeededRng, dtype=DEFAULT_DTYPE) -> Tensor:
    """Uniform in +-sqrt(6/(fan_in+fan_out)); 1-D shapes use fan_in=fan_out=D."""
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ContractError("xavier_uniform_init needs a non-empty shape")
    fan_in, fan_out = _fans(shape)
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-bound, bound, shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def zeros_init(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_init(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
