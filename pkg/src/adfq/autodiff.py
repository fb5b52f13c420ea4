"""Small reverse-mode gradient engine over the tensor kernels.

Nodes hold float64 values; graphs are built per evaluation and torn down
after ``backward``.  Quantized ops use straight-through estimators:
``round`` behaves as the identity, ``clamp`` passes gradients only inside
its range, and quantizer scales follow the rule selected by ``STEPolicy``
("lsq" for optimization, "frozen-code" where finite differences of the
real forward are meaningful).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import backend as _backend
from .errors import GradCheckError, ShapeError
from .tensor_ops import SparseOutlierMatrix

RECT_ZETA = 1.1
RECT_GAMMA = -0.1

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class STEPolicy:
    """Gradient rules applied uniformly by all quantized ops.

    round passes gradients as the identity and clamp as a range mask;
    ``scale_rule`` picks the quantizer-scale derivative:
      "lsq":         dy/ds = (q - z) - x/s in range, (q - z) when clamped
      "frozen-code": dy/ds = (q - z) everywhere (codes held fixed)
    """

    scale_rule: str = "lsq"

    def __post_init__(self):
        if self.scale_rule not in ("lsq", "frozen-code"):
            raise ValueError(f"unknown scale rule {self.scale_rule!r}")


DEFAULT_POLICY = STEPolicy()


class Node:
    __slots__ = ("value", "parents", "grad", "requires_grad", "needs", "name",
                 "_backward")

    def __init__(self, value, parents=(), requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self.needs = requires_grad or any(p.needs for p in self.parents)
        self.grad = None
        self.name = name
        self._backward = None

    def __repr__(self):
        kind = "leaf" if self.requires_grad else "node"
        return f"<{kind} {self.name or ''} shape={self.value.shape}>"


def constant(x, name=None) -> Node:
    return Node(x, name=name)


def leaf(x, name=None) -> Node:
    return Node(np.array(x, dtype=np.float64), requires_grad=True, name=name)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _accum(node: Node, g) -> None:
    if not node.needs:
        return
    node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Node) -> None:
    """Populate ``grad`` on every node that can reach a trainable leaf."""
    if loss.value.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    topo: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.needs and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones(())
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# differentiable primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    out = Node(a.value + b.value, (a, b))
    if out.needs:
        def bw(g):
            _accum(a, _unbroadcast(g, a.value.shape))
            _accum(b, _unbroadcast(g, b.value.shape))
        out._backward = bw
    return out


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    out = Node(a.value - b.value, (a, b))
    if out.needs:
        def bw(g):
            _accum(a, _unbroadcast(g, a.value.shape))
            _accum(b, _unbroadcast(-g, b.value.shape))
        out._backward = bw
    return out


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    out = Node(a.value * b.value, (a, b))
    if out.needs:
        def bw(g):
            _accum(a, _unbroadcast(g * b.value, a.value.shape))
            _accum(b, _unbroadcast(g * a.value, b.value.shape))
        out._backward = bw
    return out


def div(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    out = Node(a.value / b.value, (a, b))
    if out.needs:
        def bw(g):
            _accum(a, _unbroadcast(g / b.value, a.value.shape))
            _accum(b, _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))
        out._backward = bw
    return out


def scale(a, c: float) -> Node:
    a = _as_node(a)
    out = Node(a.value * c, (a,))
    if out.needs:
        out._backward = lambda g: _accum(a, g * c)
    return out


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul shapes {a.value.shape} x {b.value.shape}")
    out = Node(a.value @ b.value, (a, b))
    if out.needs:
        def bw(g):
            _accum(a, g @ b.value.T)
            _accum(b, a.value.T @ g)
        out._backward = bw
    return out


def transpose(a) -> Node:
    a = _as_node(a)
    out = Node(a.value.T.copy(), (a,))
    if out.needs:
        out._backward = lambda g: _accum(a, g.T)
    return out


def slice_cols(a, lo: int, hi: int) -> Node:
    a = _as_node(a)
    out = Node(a.value[:, lo:hi].copy(), (a,))
    if out.needs:
        def bw(g):
            full = np.zeros_like(a.value)
            full[:, lo:hi] = g
            _accum(a, full)
        out._backward = bw
    return out


def concat_cols(nodes) -> Node:
    nodes = [_as_node(n) for n in nodes]
    out = Node(np.hstack([n.value for n in nodes]), tuple(nodes))
    if out.needs:
        widths = [n.value.shape[1] for n in nodes]
        def bw(g):
            off = 0
            for n, w in zip(nodes, widths):
                _accum(n, g[:, off:off + w])
                off += w
        out._backward = bw
    return out


def sum_all(a) -> Node:
    a = _as_node(a)
    out = Node(a.value.sum(), (a,))
    if out.needs:
        out._backward = lambda g: _accum(a, np.broadcast_to(g, a.value.shape).copy())
    return out


def sum_last_keepdims(a) -> Node:
    a = _as_node(a)
    out = Node(a.value.sum(axis=-1, keepdims=True), (a,))
    if out.needs:
        out._backward = lambda g: _accum(a, np.broadcast_to(g, a.value.shape).copy())
    return out


def mean_rows(a) -> Node:
    """[n, d] -> [1, d] mean over rows."""
    a = _as_node(a)
    n = a.value.shape[0]
    out = Node(a.value.mean(axis=0, keepdims=True), (a,))
    if out.needs:
        out._backward = lambda g: _accum(
            a, np.broadcast_to(g / n, a.value.shape).copy())
    return out


def exp(a) -> Node:
    a = _as_node(a)
    out = Node(np.exp(a.value), (a,))
    if out.needs:
        out._backward = lambda g: _accum(a, g * out.value)
    return out


def log(a) -> Node:
    a = _as_node(a)
    out = Node(np.log(a.value), (a,))
    if out.needs:
        out._backward = lambda g: _accum(a, g / a.value)
    return out


def clamp_min(a, floor: float) -> Node:
    a = _as_node(a)
    out = Node(np.maximum(a.value, floor), (a,))
    if out.needs:
        mask = a.value > floor
        out._backward = lambda g: _accum(a, g * mask)
    return out


def layernorm_node(x, gamma, beta, eps: float = 1e-12) -> Node:
    x, gamma, beta = _as_node(x), _as_node(gamma), _as_node(beta)
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Node(xhat * gamma.value + beta.value, (x, gamma, beta))
    if out.needs:
        def bw(g):
            gxhat = g * gamma.value
            gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
            _accum(x, gx)
            lead = tuple(range(g.ndim - 1))
            _accum(gamma, (g * xhat).sum(axis=lead))
            _accum(beta, g.sum(axis=lead))
        out._backward = bw
    return out


def gelu_node(x) -> Node:
    x = _as_node(x)
    cdf = 0.5 * (1.0 + erf(x.value * _INV_SQRT2))
    out = Node(x.value * cdf, (x,))
    if out.needs:
        pdf = np.exp(-0.5 * x.value * x.value) * _INV_SQRT2PI
        out._backward = lambda g: _accum(x, g * (cdf + x.value * pdf))
    return out


def softmax_last(x) -> Node:
    x = _as_node(x)
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Node(p, (x,))
    if out.needs:
        out._backward = lambda g: _accum(
            x, p * (g - (g * p).sum(axis=-1, keepdims=True)))
    return out


def spmm_node(sp: SparseOutlierMatrix, w) -> Node:
    w = _as_node(w)
    out = Node(_backend.spmm(sp.rows, sp.cols, sp.values, sp.n_rows, w.value), (w,))
    if out.needs:
        dense_t = sp.densify().T
        out._backward = lambda g: _accum(w, dense_t @ g)
    return out


# ---------------------------------------------------------------------------
# soft rounding gate
# ---------------------------------------------------------------------------

def rect_sigmoid(v: np.ndarray) -> np.ndarray:
    """h(v) = clamp(0, 1, sigmoid(v) * (zeta - gamma) + gamma)."""
    sig = 1.0 / (1.0 + np.exp(-np.asarray(v, dtype=np.float64)))
    return np.clip(sig * (RECT_ZETA - RECT_GAMMA) + RECT_GAMMA, 0.0, 1.0)


def rect_sigmoid_inverse(h: np.ndarray) -> np.ndarray:
    """v with rect_sigmoid(v) == h, for h strictly inside the unclamped band."""
    sig = (np.asarray(h, dtype=np.float64) - RECT_GAMMA) / (RECT_ZETA - RECT_GAMMA)
    return np.log(sig / (1.0 - sig))


def _rect_sigmoid_parts(v: np.ndarray):
    sig = 1.0 / (1.0 + np.exp(-v))
    pre = sig * (RECT_ZETA - RECT_GAMMA) + RECT_GAMMA
    h = np.clip(pre, 0.0, 1.0)
    dh = np.where((pre > 0.0) & (pre < 1.0),
                  (RECT_ZETA - RECT_GAMMA) * sig * (1.0 - sig), 0.0)
    return h, dh


# ---------------------------------------------------------------------------
# quantized nodes
# ---------------------------------------------------------------------------

def fakequant_uniform_node(x, s, z, bits: int, axis=None,
                           policy: STEPolicy = DEFAULT_POLICY) -> Node:
    """Uniform fake-quant with trainable scale and fixed zero point.

    ``axis`` is None for per-tensor (scalar s) or 0 for per-patch rows
    (s of length x.shape[0]).
    """
    x, s = _as_node(x), _as_node(s)
    hi = (1 << bits) - 1
    z = np.asarray(z, dtype=np.float64)
    if axis is None:
        sb, zb = s.value, z
    elif axis == 0:
        sb, zb = s.value.reshape(-1, 1), z.reshape(-1, 1)
    else:
        raise ShapeError("fakequant axis must be None or 0")
    y, codes = _backend.uniform_fakequant(
        x.value, s.value, z.astype(np.int64), hi, axis)
    out = Node(y, (x, s))
    if out.needs:
        t = np.rint(x.value / sb) + zb
        in_range = (t >= 0.0) & (t <= float(hi))
        q_minus_z = codes.astype(np.float64) - zb

        def bw(g):
            _accum(x, g * in_range)
            if s.needs:
                if policy.scale_rule == "lsq":
                    elem = g * (q_minus_z - in_range * (x.value / sb))
                else:
                    elem = g * q_minus_z
                if axis is None:
                    _accum(s, np.asarray(elem.sum()))
                else:
                    _accum(s, elem.sum(axis=1))
        out._backward = bw
    return out


def fakequant_log2_node(x, s, bits: int, shift: float = 0.0,
                        epsilon: float = 0.0, shifted: bool = False,
                        policy: STEPolicy = DEFAULT_POLICY) -> Node:
    """Log2 / shift-log2 fake-quant with trainable scalar scale."""
    x, s = _as_node(x), _as_node(s)
    hi = (1 << bits) - 1
    xp = x.value - shift + epsilon if shifted else x.value
    xpf = np.maximum(xp, 0.0)
    sv = float(s.value)
    with np.errstate(divide="ignore"):
        u = -np.log2(xpf / sv)
    t = np.rint(u)
    codes = np.clip(t, 0.0, float(hi))
    pow2 = np.ldexp(1.0, -codes.astype(np.int64))
    y = sv * pow2
    if shifted:
        y = y + (shift - epsilon)
    out = Node(y, (x, s))
    if out.needs:
        in_range = (t >= 0.0) & (t <= float(hi)) & (xpf > 0.0)

        def bw(g):
            _accum(x, g * in_range)
            if s.needs:
                if policy.scale_rule == "lsq":
                    gs = (g * pow2 * ~in_range).sum()
                else:
                    gs = (g * pow2).sum()
                _accum(s, np.asarray(gs))
        out._backward = bw
    return out


def soft_weight_node(w: np.ndarray, s: np.ndarray, z: np.ndarray, v,
                     bits: int, use_zero_point: bool = True) -> Node:
    """AdaRound-style soft weight: s * (clamp(floor(w/s) + z + h(v)) - z).

    Only the rounding matrix v is trainable; floor has zero gradient and
    the clamp masks gradients outside [0, 2^k - 1].
    """
    v = _as_node(v)
    if v.value.shape != w.shape:
        raise ShapeError(f"v shape {v.value.shape} does not match weights {w.shape}")
    hi = (1 << bits) - 1
    sb = np.asarray(s, dtype=np.float64).reshape(1, -1)
    zb = np.asarray(z, dtype=np.float64).reshape(1, -1)
    if not use_zero_point:
        zb = np.zeros_like(zb)
    wf = np.floor(w / sb)
    h, dh = _rect_sigmoid_parts(v.value)
    t = wf + zb + h
    c = np.clip(t, 0.0, float(hi))
    out = Node(sb * (c - zb), (v,))
    if out.needs:
        mask = (t >= 0.0) & (t <= float(hi))
        out._backward = lambda g: _accum(v, g * sb * mask * dh)
    return out


def round_penalty_node(v, beta: float) -> Node:
    """sum(1 - |2 h(v) - 1|^beta), the annealed rounding regularizer."""
    v = _as_node(v)
    h, dh = _rect_sigmoid_parts(v.value)
    a = 2.0 * h - 1.0
    out = Node(np.asarray((1.0 - np.abs(a) ** beta).sum()), (v,))
    if out.needs:
        dpen_dh = -beta * np.abs(a) ** (beta - 1.0) * np.sign(a) * 2.0
        out._backward = lambda g: _accum(v, g * dpen_dh * dh)
    return out
