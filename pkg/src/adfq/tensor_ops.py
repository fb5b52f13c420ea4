"""Dense tensor kernels and the sparse outlier container.

Tensors are plain float64 C-order numpy arrays.  All operations here are
pure functions, check their inputs for finiteness, and are deterministic:
two calls with identical inputs return bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import backend
from .errors import DomainError, ShapeError

Tensor = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)

DEFAULT_LAYERNORM_EPS = 1e-12


def as_tensor(data) -> Tensor:
    """Coerce to a float64 C-order array and reject non-finite values."""
    x = np.ascontiguousarray(data, dtype=np.float64)
    check_finite(x)
    return x


def check_finite(x: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{what} contains non-finite values")


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seed gives an identical stream."""
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass(frozen=True)
class SparseOutlierMatrix:
    """COO matrix holding full-precision outlier entries.

    Entries are stored row-major sorted; indices are in bounds, (row, col)
    pairs are unique and every stored value is nonzero.
    """

    n_rows: int
    n_cols: int
    rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    cols: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if not (len(rows) == len(cols) == len(values)):
            raise ShapeError("sparse entry arrays must have equal length")
        if len(rows):
            if rows.min() < 0 or rows.max() >= self.n_rows:
                raise ShapeError("sparse row index out of bounds")
            if cols.min() < 0 or cols.max() >= self.n_cols:
                raise ShapeError("sparse column index out of bounds")
            flat = rows * self.n_cols + cols
            if len(np.unique(flat)) != len(flat):
                raise DomainError("duplicate (row, col) entry in sparse matrix")
            if np.any(values == 0.0):
                raise DomainError("sparse matrix stores an explicit zero")
            check_finite(values, "sparse values")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "values", values)

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    def entries(self):
        for r, c, v in zip(self.rows, self.cols, self.values):
            yield int(r), int(c), float(v)

    def densify(self) -> Tensor:
        out = np.zeros((self.n_rows, self.n_cols))
        out[self.rows, self.cols] = self.values
        return out


def gemm(a: Tensor, b: Tensor) -> Tensor:
    """Dense matrix product (delegated to BLAS; bit-stable across runs)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"gemm needs 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"gemm inner dimensions differ: {a.shape} x {b.shape}")
    check_finite(a, "gemm lhs")
    check_finite(b, "gemm rhs")
    return a @ b


def spmm(s: SparseOutlierMatrix, b: Tensor) -> Tensor:
    """Sparse-times-dense; equals ``gemm(s.densify(), b)``."""
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2:
        raise ShapeError(f"spmm rhs must be 2-D, got {b.shape}")
    if s.n_cols != b.shape[0]:
        raise ShapeError(f"spmm inner dimensions differ: {s.shape} x {b.shape}")
    check_finite(b, "spmm rhs")
    return backend.spmm(s.rows, s.cols, s.values, s.n_rows, b)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor,
              eps: float = DEFAULT_LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm affine shapes {gamma.shape}/{beta.shape} "
                         f"do not match feature dim {d}")
    if eps <= 0:
        raise DomainError("layernorm eps must be positive")
    check_finite(x, "layernorm input")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gamma + beta


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF (erf form, no tanh approximation)."""
    x = np.asarray(x, dtype=np.float64)
    check_finite(x, "gelu input")
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to 1."""
    x = np.asarray(x, dtype=np.float64)
    check_finite(x, "softmax input")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def reduce_minmax(x: Tensor, granularity: str) -> tuple[Tensor, Tensor]:
    """Exact extrema per group: whole tensor, per row or per column."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DomainError("reduce_minmax on an empty tensor")
    check_finite(x, "reduce_minmax input")
    if granularity == "tensor":
        return np.asarray(x.min()), np.asarray(x.max())
    if x.ndim != 2:
        raise ShapeError("row/column reduction needs a 2-D tensor")
    if granularity == "row":
        return x.min(axis=1), x.max(axis=1)
    if granularity == "column":
        return x.min(axis=0), x.max(axis=0)
    raise DomainError(f"unknown granularity {granularity!r}")
