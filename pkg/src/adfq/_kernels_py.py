"""Numpy implementations of the hot quantization kernels.

This is the fallback backend; ``adfq._kernels_cy`` is the compiled twin.
Both must produce bit-identical results: every operation below is
elementwise (or accumulates in a fixed order), uses round-half-to-even
via ``np.rint`` (== C ``rint``), and never reassociates sums.
"""

from __future__ import annotations

import numpy as np


def uniform_fakequant(x, scale, zero, hi, axis):
    """Fused quantize->dequantize for the affine uniform quantizer.

    ``axis`` selects the grouping: None (per-tensor, scalar params),
    0 (per-row groups, params of length x.shape[0]) or 1 (per-column
    groups).  Returns ``(y, codes)`` with codes as int64 in [0, hi].
    """
    if axis is None:
        s = scale
        z = zero
    elif axis == 0:
        s = scale.reshape(-1, 1)
        z = zero.reshape(-1, 1)
    else:
        s = scale.reshape(1, -1)
        z = zero.reshape(1, -1)
    t = np.rint(x / s) + z
    codes = np.clip(t, 0.0, float(hi))
    y = s * (codes - z)
    return y, codes.astype(np.int64)


def outlier_split(x, alpha, one_sided):
    """Split a 2-D matrix into a dense non-outlier part and COO outliers.

    Outliers are entries with ``|v| >= alpha`` (or ``v >= alpha`` when
    ``one_sided``).  Entry order is row-major.
    """
    if one_sided:
        mask = x >= alpha
    else:
        mask = np.abs(x) >= alpha
    rows, cols = np.nonzero(mask)
    vals = x[rows, cols].copy()
    dense = np.where(mask, 0.0, x)
    return dense, rows.astype(np.int64), cols.astype(np.int64), vals


def spmm(rows, cols, vals, n_rows, b):
    """COO sparse (n_rows x k) times dense (k x p).

    Entries are accumulated in their stored order so results are
    bit-stable and identical across backends.
    """
    out = np.zeros((n_rows, b.shape[1]))
    for i in range(len(vals)):
        out[rows[i], :] += vals[i] * b[cols[i], :]
    return out
