"""Dense float64 kernels and a splittable, counter-based random source.

Matrices are plain 2-D ``numpy.float64`` arrays. The helpers here only add
shape checks and the finiteness guarantee that the rest of the package relies
on.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import ConfigError, NumericalError

Matrix = np.ndarray


def as_matrix(x) -> Matrix:
    m = np.array(x, dtype=np.float64, copy=True, ndmin=2)
    if m.ndim != 2:
        raise ConfigError(f"expected a 2-D matrix, got shape {m.shape}")
    return np.ascontiguousarray(m)


def check_finite(m: Matrix, what: str = "matrix") -> Matrix:
    if not np.isfinite(m).all():
        raise NumericalError(f"{what} contains non-finite entries")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    # overflow is reported by check_finite, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return check_finite(out, "matmul result")


def gather_rows(a: Matrix, idx: Sequence[int]) -> Matrix:
    """Rows of ``a`` selected by ``idx`` (duplicates allowed, order kept)."""
    idx = np.asarray(idx, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        bad = idx[(idx < 0) | (idx >= a.shape[0])][0]
        raise ConfigError(f"row index {bad} out of range for {a.shape[0]} rows")
    return a[idx]


Label = Union[int, str]


def _label_key(label: Label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ConfigError("stream labels must be non-negative")
        return int(label)
    # crc32 is stable across platforms and interpreter runs, unlike hash()
    return zlib.crc32(str(label).encode("utf-8")) | (1 << 32)


@dataclass(frozen=True)
class RngState:
    """Seed plus a path of stream labels.

    Each distinct path maps to an independent Philox stream through numpy's
    ``SeedSequence`` spawn keys, so ``RngState(7).child("sample").child(3)``
    always yields the same draws regardless of what other streams were used.
    """

    seed: int
    stream: tuple[int, ...] = ()

    def child(self, label: Label) -> "RngState":
        return RngState(self.seed, self.stream + (_label_key(label),))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(seq))


def glorot_init(rows: int, cols: int, rng: RngState) -> Matrix:
    if rows < 1 or cols < 1:
        raise ConfigError(f"glorot_init needs positive dims, got {rows}x{cols}")
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.generator().uniform(-limit, limit, size=(rows, cols))


def two_sum(a: Matrix, b: Matrix) -> tuple[Matrix, Matrix]:
    """Knuth's error-free sum: ``s + err == a + b`` exactly, ``s = fl(a + b)``."""
    s = a + b
    bb = s - a
    err = (a - (s - bb)) + (b - bb)
    return s, err
