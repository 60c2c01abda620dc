"""Seeded, portable random streams.

All randomness goes through :class:`Rng`: Philox4x64-10 (counter based,
64-bit key) for raw 64-bit words, uniforms as ``(word >> 11) * 2**-53``,
Gaussians by Box-Muller on pairs of those uniforms.  Sub-streams are keyed
by hashing ``(seed, name)`` so independent stages never share draws.
"""
from __future__ import annotations

import hashlib
import json

import numpy as np

_TWO_PI = 2.0 * np.pi


def derive_key(seed: int, name: str = "") -> int:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    def __init__(self, seed: int = 0, name: str = ""):
        self.seed = int(seed)
        self.name = name
        self._bitgen = np.random.Philox(key=derive_key(seed, name))

    def child(self, name: str) -> "Rng":
        """Independent stream keyed by this stream's seed and a dotted name."""
        return Rng(self.seed, f"{self.name}.{name}" if self.name else name)

    def _words(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(n).astype(np.uint64)

    def uniform(self, size=None, low=0.0, high=1.0):
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        n = int(np.prod(shape, dtype=np.int64))
        u = (self._words(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(shape)

    def normal(self, size):
        """Standard normals via Box-Muller."""
        shape = size if isinstance(size, tuple) else (size,)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(_TWO_PI * u2)
        z[1::2] = r * np.sin(_TWO_PI * u2)
        return z[:n].reshape(shape)

    def integers(self, low: int, high: int, size):
        """Integers in ``[low, high)`` via ``floor(u * (high - low))``."""
        u = self.uniform(size)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, size: int) -> np.ndarray:
        return self.integers(0, n, size)

    def get_state(self) -> str:
        st = self._bitgen.state
        return json.dumps(
            {"seed": self.seed, "name": self.name, "state": _jsonable(st)}, sort_keys=True
        )

    def set_state(self, blob: str) -> None:
        d = json.loads(blob)
        self.seed, self.name = d["seed"], d["name"]
        st = d["state"]
        st["state"]["counter"] = np.array(st["state"]["counter"], dtype=np.uint64)
        st["state"]["key"] = np.array(st["state"]["key"], dtype=np.uint64)
        st["buffer"] = np.array(st["buffer"], dtype=np.uint64)
        self._bitgen.state = st


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(x) for x in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj
