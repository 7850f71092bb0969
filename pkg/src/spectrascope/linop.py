"""Symmetric linear operators defined only through their action on vectors.

Every spectral routine in the package consumes a :class:`LinearOperator`, so
curvature matrices that are too large to store can still be analysed as
long as a matrix-vector product is available.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "LinearOperator",
    "DenseSymOperator",
    "AffineOperator",
    "DeflatedOperator",
    "DifferenceOperator",
    "matvec",
    "shift_scale",
    "deflate",
    "subtract_op",
    "to_dense",
    "load_matrix",
    "save_matrix",
    "DENSE_LIMIT",
]

DENSE_LIMIT = 4096
_MTX_MAGIC = b"MTX1"


class LinearOperator:
    """A symmetric operator of size ``dim`` given by a matvec callable.

    The callable must not mutate shared state: operators are handed to
    worker threads and applied concurrently.
    """

    def __init__(self, dim: int, apply: Callable[[np.ndarray], np.ndarray]):
        dim = int(dim)
        if dim <= 0:
            raise ValueError(f"operator dimension must be positive, got {dim}")
        self._dim = dim
        self._apply = apply

    @property
    def dim(self) -> int:
        return self._dim

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self._dim,):
            raise ValueError(f"expected vector of length {self._dim}, got shape {v.shape}")
        return self._apply(v)

    __matmul__ = matvec

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dim={self._dim})"


class DenseSymOperator(LinearOperator):
    """Operator backed by an explicit symmetric matrix."""

    def __init__(self, entries: np.ndarray, check: bool = True):
        entries = np.array(entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {entries.shape}")
        if check and not np.array_equal(entries, entries.T):
            raise ValueError("matrix is not exactly symmetric; symmetrize with (A + A.T) / 2")
        entries.setflags(write=False)
        self.entries = entries
        super().__init__(entries.shape[0], entries.dot)


class AffineOperator(LinearOperator):
    """Represents ``(A - shift I) / scale``."""

    def __init__(self, base: LinearOperator, shift: float, scale: float):
        if not scale > 0:
            raise ValueError(f"scale must be positive, got {scale}")
        self.base = base
        self.shift = float(shift)
        self.scale = float(scale)
        super().__init__(base.dim, self._affine)

    def _affine(self, v: np.ndarray) -> np.ndarray:
        return (self.base.matvec(v) - self.shift * v) / self.scale


class DeflatedOperator(LinearOperator):
    """Projection deflation ``(I - V V^T) A (I - V V^T)``."""

    def __init__(self, base: LinearOperator, basis: np.ndarray):
        basis = np.array(basis, dtype=np.float64)
        basis.setflags(write=False)
        self.base = base
        self.basis = basis
        super().__init__(base.dim, self._deflated)

    def _project(self, v: np.ndarray) -> np.ndarray:
        return v - self.basis @ (self.basis.T @ v)

    def _deflated(self, v: np.ndarray) -> np.ndarray:
        return self._project(self.base.matvec(self._project(v)))


class DifferenceOperator(LinearOperator):
    """``A v - B v``; the operator form of a subtraction knockout."""

    def __init__(self, a: LinearOperator, b: LinearOperator):
        if a.dim != b.dim:
            raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
        self.a = a
        self.b = b
        super().__init__(a.dim, lambda v: a.matvec(v) - b.matvec(v))


def as_operator(obj) -> LinearOperator:
    if isinstance(obj, LinearOperator):
        return obj
    return DenseSymOperator(obj)


def matvec(op: LinearOperator, v: np.ndarray) -> np.ndarray:
    return op.matvec(v)


def shift_scale(op: LinearOperator, c: float, d: float) -> AffineOperator:
    return AffineOperator(op, c, d)


def deflate(op: LinearOperator, eigenpairs: Sequence[tuple[float, np.ndarray]]) -> DeflatedOperator:
    """Project the span of the given eigenvectors out of ``op`` on both sides.

    Vectors are orthonormalized with a QR factorization first, so
    approximate eigenvectors from an iterative solver are acceptable.
    """
    vectors = [np.asarray(vec, dtype=np.float64) for _, vec in eigenpairs]
    if len(vectors) >= op.dim:
        raise ValueError(f"deflation rank {len(vectors)} must be below dimension {op.dim}")
    if not vectors:
        return DeflatedOperator(op, np.zeros((op.dim, 0)))
    q, _ = np.linalg.qr(np.column_stack(vectors))
    return DeflatedOperator(op, q)


def subtract_op(a: LinearOperator, b: LinearOperator) -> DifferenceOperator:
    return DifferenceOperator(a, b)


def to_dense(op: LinearOperator, limit: int = DENSE_LIMIT) -> np.ndarray:
    """Materialize an operator column by column (small operators only)."""
    if isinstance(op, DenseSymOperator):
        return np.array(op.entries)
    if op.dim > limit:
        raise ValueError(f"refusing to materialize operator of dimension {op.dim} > {limit}")
    eye = np.eye(op.dim)
    return np.column_stack([op.matvec(eye[:, j]) for j in range(op.dim)])


def save_matrix(path: str | Path, matrix: np.ndarray) -> None:
    """Write ``matrix`` as CSV (``.csv`` suffix) or the MTX1 binary format."""
    path = Path(path)
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError("only square matrices can be saved")
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in matrix:
                writer.writerow([repr(float(x)) for x in row])
        return
    with open(path, "wb") as fh:
        fh.write(_MTX_MAGIC)
        fh.write(struct.pack("<Q", matrix.shape[0]))
        fh.write(matrix.astype("<f8").tobytes(order="C"))


def load_matrix(path: str | Path) -> np.ndarray:
    """Read a square matrix from CSV rows or an MTX1 file (sniffed by magic)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == _MTX_MAGIC:
            (p,) = struct.unpack("<Q", fh.read(8))
            data = np.frombuffer(fh.read(), dtype="<f8")
            if data.size != p * p:
                raise ValueError(f"{path}: expected {p * p} entries, found {data.size}")
            return data.reshape(p, p).astype(np.float64)
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row:
                rows.append([float(x) for x in row])
    matrix = np.array(rows, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"{path}: CSV does not hold a square matrix")
    return matrix
