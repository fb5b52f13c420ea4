"""Quantizer math: uniform (three granularities), log2, shift-log2 and the
outlier split with GEMM+SpMM recombination.

Quantization is simulated ("fake quant"): quantize-then-dequantize in
float64.  Rounding is round-half-to-even everywhere (``np.rint``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import DomainError, ShapeError
from .tensor_ops import SparseOutlierMatrix, Tensor, check_finite, gemm, spmm

BITS_MIN = 2
BITS_MAX = 8

DEFAULT_SHIFT_EPSILON = 1e-8

GRANULARITIES = ("per-tensor", "per-channel", "per-patch")
# per-patch groups are rows (axis 0), per-channel groups are columns (axis 1)
_GRAN_AXIS = {"per-tensor": None, "per-patch": 0, "per-channel": 1}


def check_bits(bits: int) -> int:
    if not (BITS_MIN <= bits <= BITS_MAX):
        raise DomainError(f"bit width must be in [{BITS_MIN}, {BITS_MAX}], got {bits}")
    return int(bits)


def n_levels(bits: int) -> int:
    return (1 << bits) - 1


@dataclass(frozen=True)
class UniformParams:
    """Affine uniform quantizer state: one (scale, zero_point) per group."""

    scale: np.ndarray        # shape () per-tensor, (groups,) otherwise
    zero_point: np.ndarray   # int64, same shape as scale
    bits: int
    granularity: str

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise DomainError(f"unknown granularity {self.granularity!r}")
        check_bits(self.bits)
        s = np.asarray(self.scale, dtype=np.float64)
        z = np.asarray(self.zero_point, dtype=np.int64)
        if s.shape != z.shape:
            raise ShapeError("scale and zero_point shapes differ")
        if self.granularity == "per-tensor" and s.ndim != 0:
            raise ShapeError("per-tensor params must be scalar")
        if self.granularity != "per-tensor" and s.ndim != 1:
            raise ShapeError("grouped params must be 1-D")
        if not np.all(s > 0):
            raise DomainError("every scale must be positive")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "zero_point", z)

    @property
    def n_groups(self) -> int:
        return 1 if self.scale.ndim == 0 else len(self.scale)


@dataclass(frozen=True)
class Log2Params:
    """Log2 quantizer state; ``kind`` distinguishes the shifted variant."""

    scale: float
    bits: int
    shift: float = 0.0          # min(x) of the calibrated data for shift-log2
    epsilon: float = DEFAULT_SHIFT_EPSILON
    kind: str = "log2"          # "log2" | "shift-log2"

    def __post_init__(self):
        check_bits(self.bits)
        if self.scale <= 0:
            raise DomainError("log2 scale must be positive")
        if self.epsilon <= 0:
            raise DomainError("epsilon must be positive")
        if self.kind not in ("log2", "shift-log2"):
            raise DomainError(f"unknown log2 kind {self.kind!r}")


@dataclass(frozen=True)
class OutlierConfig:
    """Outlier threshold on activation magnitude.

    The default indicator is |x| >= alpha; ``one_sided`` restores the
    literal x >= alpha rule.
    """

    alpha: float
    one_sided: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise DomainError("alpha must be positive")


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray  # int64, every code in [0, 2^k - 1]
    params: UniformParams | Log2Params

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int64)
        hi = n_levels(self.params.bits)
        if codes.size and (codes.min() < 0 or codes.max() > hi):
            raise DomainError(f"codes outside [0, {hi}]")
        object.__setattr__(self, "codes", codes)


def _group_minmax(x: np.ndarray, granularity: str):
    axis = _GRAN_AXIS[granularity]
    if axis is None:
        return np.asarray(x.min()), np.asarray(x.max())
    if x.ndim != 2:
        raise ShapeError(f"{granularity} calibration needs a 2-D tensor")
    other = 1 - axis
    return x.min(axis=other), x.max(axis=other)


def uniform_params_from_minmax(mn, mx, bits: int, granularity: str) -> UniformParams:
    """s = (max - min) / (2^k - 1), z = round(-min / s) per group.

    Degenerate groups (max == min) fall back to s = 1, z = round(-min).
    """
    bits = check_bits(bits)
    mn = np.asarray(mn, dtype=np.float64)
    mx = np.asarray(mx, dtype=np.float64)
    if mn.shape != mx.shape:
        raise ShapeError("min/max shapes differ")
    if np.any(mx < mn):
        raise DomainError("max < min in calibration statistics")
    rng = mx - mn
    s = np.where(rng > 0, rng / n_levels(bits), 1.0)
    z = np.rint(-mn / s).astype(np.int64)
    return UniformParams(scale=s, zero_point=z, bits=bits, granularity=granularity)


def uq_calibrate(x: Tensor, bits: int, granularity: str = "per-tensor") -> UniformParams:
    """Min/max calibration of the uniform quantizer at the given granularity."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DomainError("cannot calibrate on an empty tensor")
    check_finite(x, "calibration input")
    if granularity not in GRANULARITIES:
        raise DomainError(f"unknown granularity {granularity!r}")
    mn, mx = _group_minmax(x, granularity)
    return uniform_params_from_minmax(mn, mx, bits, granularity)


def _check_uniform_shape(x: np.ndarray, p: UniformParams) -> None:
    axis = _GRAN_AXIS[p.granularity]
    if axis is None:
        return
    if x.ndim != 2:
        raise ShapeError(f"{p.granularity} quantization needs a 2-D tensor")
    if x.shape[axis] != p.n_groups:
        raise ShapeError(f"{p.granularity} group count {p.n_groups} does not "
                         f"match tensor extent {x.shape[axis]}")


def uq_fakequant(x: Tensor, p: UniformParams) -> tuple[Tensor, np.ndarray]:
    """Quantize-dequantize in one pass; returns (dequantized, codes)."""
    x = np.asarray(x, dtype=np.float64)
    check_finite(x, "quantizer input")
    _check_uniform_shape(x, p)
    return backend.uniform_fakequant(x, p.scale, p.zero_point,
                                     n_levels(p.bits), _GRAN_AXIS[p.granularity])


def uq_quantize(x: Tensor, p: UniformParams) -> QuantizedTensor:
    """codes = clamp(0, 2^k - 1, round(x / s) + z) per group."""
    _, codes = uq_fakequant(x, p)
    return QuantizedTensor(codes=codes, params=p)


def uq_dequantize(q: QuantizedTensor) -> Tensor:
    """x_hat = s * (codes - z) per group."""
    p = q.params
    if not isinstance(p, UniformParams):
        raise DomainError("uq_dequantize needs uniform params")
    codes = q.codes
    axis = _GRAN_AXIS[p.granularity]
    if axis is None:
        s, z = p.scale, p.zero_point
    else:
        _check_uniform_shape(codes, p)
        shape = (-1, 1) if axis == 0 else (1, -1)
        s = p.scale.reshape(shape)
        z = p.zero_point.reshape(shape)
    return s * (codes - z).astype(np.float64)


def _log2_codes(x_pos: np.ndarray, scale: float, bits: int) -> np.ndarray:
    """clamp(0, 2^k - 1, round(-log2(x / s))); zeros land in the deepest bin."""
    hi = n_levels(bits)
    with np.errstate(divide="ignore"):
        u = -np.log2(x_pos / scale)
    return np.clip(np.rint(u), 0.0, float(hi)).astype(np.int64)


def lq_quantize(x: Tensor, bits: int) -> tuple[QuantizedTensor, Log2Params]:
    """Log2 quantization of strictly positive data; s = max(x)."""
    x = np.asarray(x, dtype=np.float64)
    check_finite(x, "log2 input")
    if x.size == 0:
        raise DomainError("cannot quantize an empty tensor")
    if np.any(x <= 0):
        raise DomainError("log2 quantizer requires strictly positive values")
    p = Log2Params(scale=float(x.max()), bits=check_bits(bits), kind="log2")
    codes = _log2_codes(x, p.scale, p.bits)
    return QuantizedTensor(codes=codes, params=p), p


def lq_dequantize(q: QuantizedTensor, p: Log2Params | None = None) -> Tensor:
    """x_hat = s * 2^-codes, shifted back by (shift - epsilon) for shift-log2."""
    if p is None:
        p = q.params
    if not isinstance(p, Log2Params):
        raise DomainError("lq_dequantize needs log2 params")
    y = p.scale * np.ldexp(1.0, -q.codes)
    if p.kind == "shift-log2":
        y = y + (p.shift - p.epsilon)
    return y


def shift_log2_quantize(x: Tensor, bits: int,
                        epsilon: float = DEFAULT_SHIFT_EPSILON
                        ) -> tuple[QuantizedTensor, Log2Params]:
    """Shift all elements positive by -min(x) + eps, then log2-quantize.

    Works for all-negative, mixed and all-positive inputs; the recorded
    params hold s = max of the shifted data plus the shift itself.
    """
    x = np.asarray(x, dtype=np.float64)
    check_finite(x, "shift-log2 input")
    if x.size == 0:
        raise DomainError("cannot quantize an empty tensor")
    if epsilon <= 0:
        raise DomainError("epsilon must be positive")
    m = float(x.min())
    shifted = x - m + epsilon
    p = Log2Params(scale=float(shifted.max()), bits=check_bits(bits),
                   shift=m, epsilon=epsilon, kind="shift-log2")
    codes = _log2_codes(shifted, p.scale, p.bits)
    return QuantizedTensor(codes=codes, params=p), p


def log2_fakequant(x: Tensor, p: Log2Params) -> tuple[Tensor, np.ndarray]:
    """Apply calibrated log2 / shift-log2 params to fresh data.

    Values at or below the representable floor (possible when runtime data
    undershoots the calibrated min) clamp into the deepest bin.
    """
    x = np.asarray(x, dtype=np.float64)
    check_finite(x, "quantizer input")
    if p.kind == "shift-log2":
        pos = np.maximum(x - p.shift + p.epsilon, 0.0)
    else:
        pos = np.maximum(x, 0.0)
    codes = _log2_codes(pos, p.scale, p.bits)
    y = p.scale * np.ldexp(1.0, -codes)
    if p.kind == "shift-log2":
        y = y + (p.shift - p.epsilon)
    return y, codes


def outlier_split(x: Tensor, cfg: OutlierConfig) -> tuple[Tensor, SparseOutlierMatrix]:
    """Partition into a zeroed-outlier dense part and a sparse outlier part.

    Exact by construction: dense + densify(sparse) == x bit-for-bit.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("outlier split needs a 2-D (patches x channels) tensor")
    check_finite(x, "outlier split input")
    dense, rows, cols, vals = backend.outlier_split(x, cfg.alpha, cfg.one_sided)
    sparse = SparseOutlierMatrix(n_rows=x.shape[0], n_cols=x.shape[1],
                                 rows=rows, cols=cols, values=vals)
    return dense, sparse


def outlier_ratio(x: Tensor, cfg: OutlierConfig) -> float:
    """Fraction of entries flagged as outliers at the configured threshold."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return 0.0
    check_finite(x, "outlier ratio input")
    if cfg.one_sided:
        count = int(np.count_nonzero(x >= cfg.alpha))
    else:
        count = int(np.count_nonzero(np.abs(x) >= cfg.alpha))
    return count / x.size


def poq_linear_forward(x: Tensor, w_quantized: QuantizedTensor, bias: Tensor,
                       act_params: UniformParams, cfg: OutlierConfig) -> Tensor:
    """Per-Patch Outlier-aware linear layer.

    Y = gemm(fakequant(M_no), dequant(W)) + spmm(M_o, dequant(W)) + bias
    with the per-patch activation quantizer applied row-wise to the
    non-outlier part and outliers kept at full precision.
    """
    if act_params.granularity != "per-patch":
        raise DomainError("outlier-aware forward needs per-patch activation params")
    x = np.asarray(x, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    dense, sparse = outlier_split(x, cfg)
    y_no, _ = uq_fakequant(dense, act_params)
    w_hat = uq_dequantize(w_quantized)
    if x.shape[1] != w_hat.shape[0]:
        raise ShapeError(f"input width {x.shape[1]} does not match weight "
                         f"height {w_hat.shape[0]}")
    return gemm(y_no, w_hat) + spmm(sparse, w_hat) + bias


def roundtrip_error_bound(p: UniformParams) -> float:
    """Worst-case |x - x_hat| for unclamped inputs: half the largest step."""
    return float(np.max(p.scale)) / 2.0


INF_ALPHA = math.inf
