"""Dense tensor utilities, deterministic RNG, and the AVT1 tensor file format.

Token matrices are plain 2-D numpy arrays: rows are tokens, columns are
embedding dimensions. Files store 32-bit floats row-major; in-memory math
runs in float64 so reductions accumulate at full precision and
finite-difference gradient checks stay tight.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, FormatError, ShapeError

AVT1_MAGIC = b"AVT1"
_AVT1_HEADER = struct.Struct("<4sII")


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array with at least one row and column."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(
            f"{name} must be 2-D with at least one row and one column, got shape {m.shape}"
        )
    if not np.isfinite(m).all():
        raise DegenerateInputError(f"{name} contains non-finite entries")
    return m


def round_to_f32(a: np.ndarray) -> np.ndarray:
    """Round float64 values to their nearest float32, returned as float64.

    State that must survive a 32-bit storage round trip bit-exactly is kept
    float32-representable in memory.
    """
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def matmul(a, b) -> np.ndarray:
    """Matrix product with float64 accumulation.

    Raises ShapeError naming both shapes when the inner dimensions differ.
    """
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions differ, left {a.shape} vs right {b.shape}"
        )
    return a @ b


def row_softmax(m) -> np.ndarray:
    """Row-wise softmax, shifted by the row max so large magnitudes stay finite."""
    m = as_matrix(m, "softmax input")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cosine_distance(u, v) -> float:
    """1 - cosine similarity, clipped to [0, 2].

    Raises DegenerateInputError when either vector has zero norm.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ShapeError(f"cosine_distance: length mismatch {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0:
        raise DegenerateInputError("cosine_distance: first vector has zero norm")
    if nv == 0.0:
        raise DegenerateInputError("cosine_distance: second vector has zero norm")
    d = 1.0 - float(u @ v) / (nu * nv)
    return min(2.0, max(0.0, d))


def mean_pool(m) -> np.ndarray:
    """Column-wise mean over token rows: (n, d) -> (d,)."""
    m = as_matrix(m, "pool input")
    return m.mean(axis=0)


class Rng:
    """Deterministic pseudo-random source.

    Wraps numpy's counter-based Philox generator keyed by a 64-bit seed.
    Equal seeds yield identical draw sequences. Child streams derive from
    the root seed plus an integer path via SeedSequence spawn keys, so
    independent consumers (init, shuffling, noise) never share a stream:

        Rng(seed).child(a, b)  ==  stream keyed by (seed, (a, b))

    String path components are admitted by crc32, so streams can be keyed
    by stable identifiers (group ids) without a registry.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(
            zlib.crc32(p.encode("utf-8")) if isinstance(p, str) else int(p)
            for p in _path
        )
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *path) -> "Rng":
        """Derive an independent stream for the given path of ints or strings."""
        return Rng(self.seed, self.path + path)

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int):
        return int(self._gen.integers(low, high))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def gumbel(self, shape) -> np.ndarray:
        return self._gen.gumbel(0.0, 1.0, shape)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


def write_tensor(path, m) -> None:
    """Write a matrix as an AVT1 blob: magic, u32 rows, u32 cols, f32 row-major."""
    m = as_matrix(m, "tensor")
    rows, cols = m.shape
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_AVT1_HEADER.pack(AVT1_MAGIC, rows, cols))
        fh.write(payload)


def read_tensor(path) -> np.ndarray:
    """Read an AVT1 blob back into a float64 matrix.

    Raises FormatError on a bad magic, an impossible header, or a payload
    whose byte length disagrees with the declared shape.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _AVT1_HEADER.size:
        raise FormatError(f"{path}: too short for an AVT1 header")
    magic, rows, cols = _AVT1_HEADER.unpack_from(raw)
    if magic != AVT1_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {AVT1_MAGIC!r}")
    if rows < 1 or cols < 1:
        raise FormatError(f"{path}: declared shape ({rows}, {cols}) is empty")
    expected = _AVT1_HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload is {len(raw)} bytes, expected {expected} for shape ({rows}, {cols})"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_AVT1_HEADER.size)
    out = data.astype(np.float64).reshape(rows, cols)
    if not np.isfinite(out).all():
        raise FormatError(f"{path}: tensor contains non-finite entries")
    return out
