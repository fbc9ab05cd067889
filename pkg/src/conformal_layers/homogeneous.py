"""Homogeneous vectors, sparse operators and the bottom-slice tensor.

Index convention: 1-based index formulas are mapped to 0-based arrays
and the homogeneous coefficient is always stored *last*, so a point with
``d`` data coefficients is a length ``d + 1`` array ``(x'_1, ..., x'_d, x'_o)``.
Every module in the package uses this layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "EPS",
    "HomVector",
    "Batch",
    "SparseOperator",
    "BottomSliceTensor",
    "AllocationCounter",
    "encode",
    "decode",
    "spmv",
    "spmm",
    "quadratic_form",
]

#: Floor for the homogeneous coefficient of the all-zero input point.
EPS = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class HomVector:
    """A point in homogeneous encoding, stored as ``(data..., homo)``."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs)
        c = np.array(c, dtype=c.dtype if c.dtype in (np.float32, np.float64) else np.float64)
        if c.ndim != 1 or c.size < 2:
            raise ValueError("a homogeneous vector needs at least one data coefficient")
        object.__setattr__(self, "coeffs", _frozen(c))

    @classmethod
    def from_parts(cls, data: Sequence[float], homo: float) -> "HomVector":
        return cls(np.append(np.asarray(data, dtype=np.float64), homo))

    @property
    def data(self) -> np.ndarray:
        return self.coeffs[:-1]

    @property
    def homo(self) -> float:
        return float(self.coeffs[-1])

    @property
    def d(self) -> int:
        return self.coeffs.size - 1

    def __len__(self):
        return self.coeffs.size


def encode(x: Sequence[float], mode: str = "norm") -> HomVector:
    """Encode a Euclidean point.

    ``canonical`` sets the homogeneous coefficient to 1; ``norm`` sets it to
    the L2 norm of ``x`` (floored at :data:`EPS`), which places the decoded
    point on the unit sphere.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("cannot encode an empty point")
    if not np.all(np.isfinite(x)):
        raise ValueError("invalid input: non-finite coefficient")
    if mode == "canonical":
        homo = 1.0
    elif mode == "norm":
        homo = max(float(np.linalg.norm(x)), EPS)
    else:
        raise ValueError(f"unknown encoding mode {mode!r}")
    return HomVector(np.append(x, homo))


def decode(v: HomVector) -> np.ndarray:
    if abs(v.homo) < EPS:
        raise ZeroDivisionError("degenerate homogeneous coordinate")
    return v.data / v.homo


@dataclass(frozen=True)
class Batch:
    """Samples of identical dimension, held as one ``(n, d + 1)`` array."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs)
        c = np.array(c, dtype=c.dtype if c.dtype in (np.float32, np.float64) else np.float64)
        if c.ndim != 2 or c.shape[0] == 0 or c.shape[1] < 2:
            raise ValueError("a batch must be a non-empty (n, d + 1) array")
        object.__setattr__(self, "coeffs", _frozen(c))

    @classmethod
    def from_vectors(cls, samples: Iterable[HomVector]) -> "Batch":
        samples = list(samples)
        if not samples:
            raise ValueError("a batch must be non-empty")
        dims = {s.d for s in samples}
        if len(dims) != 1:
            raise ValueError(f"non-uniform batch dimensions {sorted(dims)}")
        return cls(np.stack([s.coeffs for s in samples]))

    @classmethod
    def encode(cls, xs: np.ndarray, mode: str = "norm") -> "Batch":
        """Row-wise :func:`encode` of an ``(n, d)`` array."""
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        if not np.all(np.isfinite(xs)):
            raise ValueError("invalid input: non-finite coefficient")
        if mode == "canonical":
            homo = np.ones(xs.shape[0])
        elif mode == "norm":
            homo = np.maximum(np.linalg.norm(xs, axis=1), EPS)
        else:
            raise ValueError(f"unknown encoding mode {mode!r}")
        return cls(np.column_stack([xs, homo]))

    @property
    def samples(self) -> list[HomVector]:
        return [HomVector(row) for row in self.coeffs]

    @property
    def d(self) -> int:
        return self.coeffs.shape[1] - 1

    def decode(self) -> np.ndarray:
        homo = self.coeffs[:, -1:]
        if np.any(np.abs(homo) < EPS):
            raise ZeroDivisionError("degenerate homogeneous coordinate")
        return self.coeffs[:, :-1] / homo

    def __len__(self):
        return self.coeffs.shape[0]

    def __getitem__(self, i: int) -> HomVector:
        return HomVector(self.coeffs[i])


class SparseOperator:
    """Immutable sparse matrix in compressed-row layout.

    Entries are kept canonical: row-major sorted column indices, duplicates
    summed, explicit zeros dropped.  Shapes include the homogeneous row and
    column.
    """

    __slots__ = ("_m",)

    def __init__(self, matrix):
        m = sp.csr_matrix(matrix, copy=True)
        if m.dtype not in (np.float32, np.float64):
            m = m.astype(np.float64)
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        if not np.all(np.isfinite(m.data)):
            raise ValueError("sparse operator entries must be finite")
        for a in (m.data, m.indices, m.indptr):
            a.flags.writeable = False
        self._m = m

    @classmethod
    def from_triples(cls, rows, cols, values, shape: tuple[int, int]) -> "SparseOperator":
        return cls(sp.coo_matrix((np.asarray(values, dtype=np.float64), (rows, cols)), shape=shape))

    @classmethod
    def from_dense(cls, a) -> "SparseOperator":
        return cls(np.asarray(a, dtype=np.float64))

    @classmethod
    def identity(cls, n: int) -> "SparseOperator":
        return cls(sp.identity(n, format="csr", dtype=np.float64))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "SparseOperator":
        return cls(sp.csr_matrix((rows, cols), dtype=np.float64))

    @classmethod
    def diagonal(cls, values) -> "SparseOperator":
        v = np.asarray(values, dtype=np.float64).ravel()
        idx = np.arange(v.size)
        return cls(sp.csr_matrix((v, idx, np.arange(v.size + 1)), shape=(v.size, v.size)))

    @property
    def csr(self) -> sp.csr_matrix:
        """The underlying scipy matrix (read-only buffers)."""
        return self._m

    @property
    def shape(self) -> tuple[int, int]:
        return self._m.shape

    @property
    def rows(self) -> int:
        return self._m.shape[0]

    @property
    def cols(self) -> int:
        return self._m.shape[1]

    @property
    def nnz(self) -> int:
        return self._m.nnz

    @property
    def dtype(self):
        return self._m.dtype

    @property
    def T(self) -> "SparseOperator":
        return SparseOperator(self._m.T)

    def triples(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        coo = self._m.tocoo()
        return coo.row, coo.col, coo.data

    def to_dense(self) -> np.ndarray:
        return self._m.toarray()

    def astype(self, dtype) -> "SparseOperator":
        return SparseOperator(self._m.astype(dtype))

    def scale(self, c: float) -> "SparseOperator":
        return SparseOperator(self._m * c)

    def __add__(self, other: "SparseOperator") -> "SparseOperator":
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch {self.shape} + {other.shape}")
        return SparseOperator(self._m + other._m)

    def __matmul__(self, other):
        if isinstance(other, SparseOperator):
            return spmm(self, other)
        if isinstance(other, HomVector):
            return spmv(self, other)
        return NotImplemented

    def equals(self, other: "SparseOperator") -> bool:
        """Exact structural and numerical equality."""
        return (
            self.shape == other.shape
            and np.array_equal(self._m.indptr, other._m.indptr)
            and np.array_equal(self._m.indices, other._m.indices)
            and np.array_equal(self._m.data, other._m.data)
        )

    def __repr__(self):
        return f"SparseOperator(shape={self.shape}, nnz={self.nnz})"


def spmv(A: SparseOperator, v: HomVector) -> HomVector:
    if A.cols != v.d + 1:
        raise ValueError(f"dimension mismatch: operator has {A.cols} columns, vector has {v.d + 1} coefficients")
    return HomVector(A.csr @ v.coeffs)


def spmm(A: SparseOperator, B: SparseOperator) -> SparseOperator:
    if A.cols != B.rows:
        raise ValueError(f"dimension mismatch: {A.shape} @ {B.shape}")
    return SparseOperator(A.csr @ B.csr)


def quadratic_form(Q: SparseOperator, v: HomVector) -> float:
    """``v^T Q v`` over the full homogeneous vector."""
    if Q.rows != Q.cols:
        raise ValueError("quadratic form needs a square operator")
    if Q.rows != v.d + 1:
        raise ValueError(f"dimension mismatch: operator is {Q.shape}, vector has {v.d + 1} coefficients")
    return float(v.coeffs @ (Q.csr @ v.coeffs))


@dataclass(frozen=True)
class BottomSliceTensor:
    """Rank-3 tensor of shape ``(out_dim, in_dim, in_dim)`` that is zero
    everywhere except its last slice along the first axis.

    Contracting with ``X`` on the third axis gives a matrix whose only
    nonzero row is the last one, ``(S X)^T``; applying that matrix to ``X``
    again contributes ``X^T S X`` to the homogeneous coefficient.
    """

    out_dim: int
    slice: SparseOperator

    def __post_init__(self):
        if self.slice.rows != self.slice.cols:
            raise ValueError("bottom slice must be square")
        if self.out_dim < 1:
            raise ValueError("out_dim must be positive")

    @property
    def in_dim(self) -> int:
        return self.slice.rows

    def contract(self, v: HomVector) -> SparseOperator:
        """``T X`` as an ``out_dim x in_dim`` matrix."""
        row = self.slice.csr @ v.coeffs
        cols = np.flatnonzero(row)
        indptr = np.zeros(self.out_dim + 1, dtype=np.int64)
        indptr[-1] = cols.size
        return SparseOperator(sp.csr_matrix((row[cols], cols, indptr), shape=(self.out_dim, self.in_dim)))

    def to_dense(self) -> np.ndarray:
        t = np.zeros((self.out_dim, self.in_dim, self.in_dim))
        t[-1] = self.slice.to_dense()
        return t


@dataclass
class AllocationCounter:
    """Counts intermediate feature-map buffers requested during a pass."""

    feature_map_elements: int = 0
    feature_map_buffers: int = 0
    sizes: list[int] = field(default_factory=list)

    def request(self, n_elements: int) -> None:
        if n_elements < 0:
            raise ValueError("buffer size must be non-negative")
        self.feature_map_buffers += 1
        self.feature_map_elements += int(n_elements)
        self.sizes.append(int(n_elements))

    def reset(self) -> None:
        self.feature_map_elements = 0
        self.feature_map_buffers = 0
        self.sizes.clear()
