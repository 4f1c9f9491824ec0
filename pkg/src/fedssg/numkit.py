"""Dense vector helpers and deterministic random substreams.

Parameter vectors are flat ``float64`` numpy arrays. Random streams are
counter-based (Philox) and keyed by ``(master_seed, stream_id)``, so any
stream can be rebuilt from scratch without replaying other streams.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

_U64 = (1 << 64) - 1


class DimensionError(ValueError):
    """Raised when vector or matrix shapes disagree."""


class NumericError(ArithmeticError):
    """Raised when a computation produces NaN or Inf."""


def as_param_vector(values) -> np.ndarray:
    vec = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(vec)):
        raise NumericError("parameter vector contains non-finite entries")
    return vec


def check_same_length(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.shape} vs {y.shape}")


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return ``a * x + y`` as a new vector."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    check_same_length(x, y)
    return a * x + y


def dot(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    check_same_length(x, y)
    return float(np.dot(x, y))


def stream_id_for(purpose: str, index: int) -> int:
    digest = hashlib.blake2b(
        f"{purpose}\x00{int(index)}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


@dataclass
class RngStream:
    """A replayable random stream.

    The output is a pure function of ``(master_seed, stream_id, counter)``:
    the pair seeds a Philox key and ``counter`` is the Philox block counter
    the stream starts from.
    """

    master_seed: int
    stream_id: int
    counter: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.master_seed = int(self.master_seed) & _U64
        self.stream_id = int(self.stream_id) & _U64
        self.counter = int(self.counter) & _U64
        bitgen = np.random.Philox(
            key=np.array([self.master_seed, self.stream_id], dtype=np.uint64),
            counter=np.array([self.counter, 0, 0, 0], dtype=np.uint64),
        )
        self._gen = np.random.Generator(bitgen)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def replay(self) -> "RngStream":
        """Fresh copy of this stream positioned at its starting counter."""
        return RngStream(self.master_seed, self.stream_id, self.counter)

    # thin pass-throughs used across the package
    def random(self, size=None):
        return self._gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, x):
        return self._gen.permutation(x)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def dirichlet(self, alpha, size=None):
        return self._gen.dirichlet(alpha, size)


def derive_stream(master_seed: int, purpose: str, index: int = 0) -> RngStream:
    """Stream for ``(purpose, index)`` under ``master_seed``.

    Distinct ``(purpose, index)`` pairs hash to distinct 64-bit stream ids,
    so clients can draw in any order (or in parallel) without coupling.
    """
    return RngStream(master_seed, stream_id_for(purpose, index))
