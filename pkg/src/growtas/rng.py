"""Seeded random streams.

Every random draw in the package goes through numpy's Philox-4x64
counter-based generator. Philox output is a pure function of its 128-bit key
and 256-bit counter, so a given seed yields the same stream on every
platform and numpy version that ships Philox.

Two kinds of stream are used:

* ``SeededRng`` -- a sequential stream (sampling, shuffling, search).
* ``positional_trunc_normal`` -- weight initialisation where entry ``(r, c)``
  of tensor ``name`` depends only on ``(seed, name, r, c)``. A fresh small
  store is therefore exactly the top-left prefix of a fresh large one.
"""
from __future__ import annotations

import hashlib
import math

import numpy as np
from scipy.special import ndtri

TRUNC_BOUND = 2.0
_PHI = math.exp(-0.5 * TRUNC_BOUND**2) / math.sqrt(2.0 * math.pi)
_MASS = math.erf(TRUNC_BOUND / math.sqrt(2.0))
# std of a standard normal truncated to [-2, 2]; dividing by it makes the
# truncated draws have exactly the requested std.
TRUNC_STD = math.sqrt(1.0 - 2.0 * TRUNC_BOUND * _PHI / _MASS)
_CDF_LO = 0.5 * (1.0 - _MASS)


def _u64(seed: int) -> int:
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return int(seed)


class SeededRng:
    """Sequential Philox stream with a serialisable state."""

    ALGORITHM = "philox4x64-10"

    def __init__(self, seed: int):
        self.seed = _u64(seed)
        self._bitgen = np.random.Philox(key=self.seed)
        self.gen = np.random.Generator(self._bitgen)

    def integers(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return int(self.gen.integers(0, n))

    def choice(self, values):
        return values[self.integers(len(values))]

    def uniform(self) -> float:
        return float(self.gen.random())

    def normal(self, size):
        return self.gen.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def child_seed(self) -> int:
        return int(self.gen.integers(0, 2**63))

    # state round trip -------------------------------------------------
    def get_state(self) -> dict:
        st = self._bitgen.state
        return {
            "counter": [int(x) for x in st["state"]["counter"]],
            "key": [int(x) for x in st["state"]["key"]],
            "buffer": [int(x) for x in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self._bitgen.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": int(state["buffer_pos"]),
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }

    @classmethod
    def from_state(cls, seed: int, state: dict) -> "SeededRng":
        rng = cls(seed)
        rng.set_state(state)
        return rng


def _row_key(seed: int, name: str, row: int) -> int:
    h = hashlib.blake2b(f"{name}#{row}".encode(), digest_size=8).digest()
    return (_u64(seed) << 64) | int.from_bytes(h, "little")


def positional_trunc_normal(seed: int, name: str, shape, std: float) -> np.ndarray:
    """Truncated normal (bounds +-2 std, rescaled to std ``std``) keyed by position.

    Row ``r`` is drawn from ``Philox(key=seed<<64 | blake2b(name#r))``; column
    ``c`` is the ``c``-th uniform of that stream, mapped through the inverse
    normal CDF restricted to the truncation interval. 1-D tensors are a single
    row.
    """
    shape = tuple(int(s) for s in shape)
    rows, cols = (1, shape[0]) if len(shape) == 1 else shape
    out = np.empty((rows, cols))
    for r in range(rows):
        u = np.random.Generator(np.random.Philox(key=_row_key(seed, name, r))).random(cols)
        out[r] = ndtri(_CDF_LO + u * _MASS)
    out *= std / TRUNC_STD
    return out.reshape(shape)
