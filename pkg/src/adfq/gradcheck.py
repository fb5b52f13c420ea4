"""Finite-difference gradient audit.

Differentiable ops (including full miniature FP attention and MLP module
graphs) are checked against plain central differences.  Straight-through
quantized nodes are checked at boundary-guarded points where a finite
difference is meaningful:

* STE input gradients via bin-strided central differences (step = one full
  code step, whose secant equals the straight-through slope exactly);
* clamped branches via plain differences (the real forward is flat there);
* scale gradients via plain differences under the "frozen-code" policy
  (central FD of the real forward at code-stable points measures the
  codes-frozen derivative);
* the "lsq" scale rule against an independent scalar formula oracle (its
  -x/s term exists only through the STE round, so no FD of the real
  forward can observe it).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import GradCheckError
from .tensor_ops import SparseOutlierMatrix, make_rng

TOL_DIFFERENTIABLE = 1e-6
TOL_STE = 1e-4


def _rel_err(analytic: np.ndarray, reference: np.ndarray) -> float:
    """Worst deviation relative to the gradient's scale (standard gradcheck
    normalization; a per-element denominator would amplify FD cancellation
    noise on near-zero components)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = max(float(np.abs(reference).max()), float(np.abs(analytic).max()), 1e-8)
    return float(np.abs(analytic - reference).max() / denom)


def _fd_graph(build, leaves: dict[str, np.ndarray]) -> float:
    """Max rel. err between engine gradients and central FD for ``build``.

    ``build`` maps a dict of Nodes to a scalar loss Node.
    """
    nodes = {k: ad.leaf(v.copy(), k) for k, v in leaves.items()}
    loss = build(nodes)
    ad.backward(loss)

    def value_at(overrides):
        consts = {k: ad.constant(overrides.get(k, v)) for k, v in leaves.items()}
        return float(build(consts).value)

    worst = 0.0
    for name, base in leaves.items():
        ana = nodes[name].grad
        if ana is None:
            ana = np.zeros_like(base)
        fd = np.zeros_like(base)
        flat = base.ravel()
        fd_flat = fd.ravel()
        for i in range(flat.size):
            # cbrt(eps)-scaled step balances truncation vs cancellation
            h = 6e-6 * max(1.0, abs(flat[i]))
            up = base.copy()
            up.ravel()[i] = flat[i] + h
            dn = base.copy()
            dn.ravel()[i] = flat[i] - h
            fd_flat[i] = (value_at({name: up}) - value_at({name: dn})) / (2 * h)
        worst = max(worst, _rel_err(ana, fd))
    return worst


# ---------------------------------------------------------------------------
# random differentiable graphs
# ---------------------------------------------------------------------------

def _random_chain(seed: int) -> float:
    r = make_rng(seed)
    m, k = int(r.integers(2, 5)), int(r.integers(3, 7))
    leaves = {"x": r.standard_normal((m, k))}
    ops = []
    width = k
    n_ops = int(r.integers(2, 5))
    for step in range(n_ops):
        choice = int(r.integers(0, 6))
        if choice == 0:
            leaves[f"g{step}"] = r.uniform(0.5, 1.5, width)
            leaves[f"b{step}"] = r.standard_normal(width) * 0.3
            ops.append(("layernorm", step, None))
        elif choice == 1:
            ops.append(("gelu", step, None))
        elif choice == 2:
            ops.append(("softmax", step, None))
        elif choice == 3:
            new_w = int(r.integers(3, 7))
            leaves[f"w{step}"] = r.standard_normal((width, new_w)) / np.sqrt(width)
            ops.append(("matmul", step, new_w))
            width = new_w
        elif choice == 4:
            leaves[f"bias{step}"] = r.standard_normal(width) * 0.3
            ops.append(("bias", step, None))
        else:
            leaves[f"m{step}"] = r.uniform(0.5, 1.5, (m, width))
            ops.append(("mul", step, None))

    def build(nodes):
        y = nodes["x"]
        for kind, step, _ in ops:
            if kind == "layernorm":
                y = ad.layernorm_node(y, nodes[f"g{step}"], nodes[f"b{step}"])
            elif kind == "gelu":
                y = ad.gelu_node(y)
            elif kind == "softmax":
                y = ad.softmax_last(y)
            elif kind == "matmul":
                y = ad.matmul(y, nodes[f"w{step}"])
            elif kind == "bias":
                y = ad.add(y, nodes[f"bias{step}"])
            else:
                y = ad.mul(y, nodes[f"m{step}"])
        return ad.sum_all(ad.mul(y, y))

    return _fd_graph(build, leaves)


def _mini_mha(seed: int) -> float:
    r = make_rng(seed)
    n, d, heads = 3, 4, 2
    dh = d // heads
    leaves = {
        "x": r.standard_normal((n, d)),
        "g1": r.uniform(0.5, 1.5, d), "b1": r.standard_normal(d) * 0.2,
        "w_qkv": r.standard_normal((d, 3 * d)) / np.sqrt(d),
        "b_qkv": r.standard_normal(3 * d) * 0.2,
        "w_o": r.standard_normal((d, d)) / np.sqrt(d),
        "b_o": r.standard_normal(d) * 0.2,
    }

    def build(nodes):
        ln = ad.layernorm_node(nodes["x"], nodes["g1"], nodes["b1"])
        qkv = ad.add(ad.matmul(ln, nodes["w_qkv"]), nodes["b_qkv"])
        q = ad.slice_cols(qkv, 0, d)
        k = ad.slice_cols(qkv, d, 2 * d)
        v = ad.slice_cols(qkv, 2 * d, 3 * d)
        outs = []
        for h in range(heads):
            qh = ad.slice_cols(q, h * dh, (h + 1) * dh)
            kh = ad.slice_cols(k, h * dh, (h + 1) * dh)
            vh = ad.slice_cols(v, h * dh, (h + 1) * dh)
            logits = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dh))
            outs.append(ad.matmul(ad.softmax_last(logits), vh))
        att = ad.add(ad.matmul(ad.concat_cols(outs), nodes["w_o"]), nodes["b_o"])
        y = ad.add(nodes["x"], att)
        return ad.sum_all(ad.mul(y, y))

    return _fd_graph(build, leaves)


def _mini_mlp(seed: int) -> float:
    r = make_rng(seed)
    n, d, hdim = 2, 4, 6
    leaves = {
        "x": r.standard_normal((n, d)),
        "g2": r.uniform(0.5, 1.5, d), "b2": r.standard_normal(d) * 0.2,
        "w1": r.standard_normal((d, hdim)) / np.sqrt(d),
        "bb1": r.standard_normal(hdim) * 0.2,
        "w2": r.standard_normal((hdim, d)) / np.sqrt(hdim),
        "bb2": r.standard_normal(d) * 0.2,
    }

    def build(nodes):
        ln = ad.layernorm_node(nodes["x"], nodes["g2"], nodes["b2"])
        h = ad.gelu_node(ad.add(ad.matmul(ln, nodes["w1"]), nodes["bb1"]))
        y = ad.add(nodes["x"], ad.add(ad.matmul(h, nodes["w2"]), nodes["bb2"]))
        return ad.sum_all(ad.mul(y, y))

    return _fd_graph(build, leaves)


def _spmm_graph(seed: int) -> float:
    r = make_rng(seed)
    m, k, p = 4, 5, 3
    mask = r.random((m, k)) < 0.3
    rows, cols = np.nonzero(mask)
    sp = SparseOutlierMatrix(n_rows=m, n_cols=k, rows=rows, cols=cols,
                             values=r.standard_normal(len(rows)) + 2.0)
    leaves = {"w": r.standard_normal((k, p))}
    a = r.standard_normal((m, p))

    def build(nodes):
        return ad.sum_all(ad.mul(ad.spmm_node(sp, nodes["w"]), ad.constant(a)))

    return _fd_graph(build, leaves)


# ---------------------------------------------------------------------------
# quantized nodes at boundary-guarded points
# ---------------------------------------------------------------------------

def _guarded_uniform_point(r, bits):
    """x placed on interior codes with fractional parts in [0.25, 0.75]."""
    hi = (1 << bits) - 1
    s = float(r.uniform(0.2, 1.5))
    z = int(r.integers(2, hi - 2))
    codes = r.integers(2, hi - 1, size=12)
    frac = r.uniform(0.25, 0.75, size=12)
    x = s * (codes - z + frac)
    return x, s, z, hi


def _fakequant_x_stride_fd(seed: int, bits: int = 4) -> float:
    """Central FD with step = one full code step; the secant is the STE slope."""
    r = make_rng(seed)
    x, s, z, hi = _guarded_uniform_point(r, bits)
    a = r.standard_normal(x.shape)

    def out_value(xv):
        y, _ = ad._backend.uniform_fakequant(xv, s, np.int64(z), hi, None)
        return a * y

    xn = ad.leaf(x)
    y = ad.fakequant_uniform_node(xn, ad.constant(s), z, bits, axis=None)
    ad.backward(ad.sum_all(ad.mul(ad.constant(a), y)))
    fd = (out_value(x + s) - out_value(x - s)) / (2 * s)
    return _rel_err(xn.grad, fd)


def _fakequant_x_clamped_fd(seed: int, bits: int = 4) -> float:
    r = make_rng(seed)
    s, z, hi = 0.5, 3, (1 << bits) - 1
    x = np.concatenate([s * (hi - z + 2 + r.uniform(0.5, 2, 4)),
                        s * (-z - 2 - r.uniform(0.5, 2, 4))])
    a = r.standard_normal(x.shape)

    def out_value(xv):
        y, _ = ad._backend.uniform_fakequant(xv, s, np.int64(z), hi, None)
        return float((a * y).sum())

    xn = ad.leaf(x)
    y = ad.fakequant_uniform_node(xn, ad.constant(s), z, bits, axis=None)
    ad.backward(ad.sum_all(ad.mul(ad.constant(a), y)))
    h = 1e-6
    fd = np.array([(out_value(x + h * e) - out_value(x - h * e)) / (2 * h)
                   for e in np.eye(len(x))])
    return _rel_err(xn.grad, fd)


def _fakequant_scale_frozen_fd(seed: int, bits: int = 4) -> float:
    """Plain FD at code-stable points under the frozen-code scale rule."""
    r = make_rng(seed)
    x, s, z, hi = _guarded_uniform_point(r, bits)
    a = r.standard_normal(x.shape)
    policy = ad.STEPolicy(scale_rule="frozen-code")

    def loss_value(sv):
        y, _ = ad._backend.uniform_fakequant(x, sv, np.int64(z), hi, None)
        return float((a * y).sum())

    sn = ad.leaf(np.asarray(s))
    y = ad.fakequant_uniform_node(ad.constant(x), sn, z, bits, axis=None,
                                  policy=policy)
    ad.backward(ad.sum_all(ad.mul(ad.constant(a), y)))
    h = 1e-7 * s
    fd = (loss_value(s + h) - loss_value(s - h)) / (2 * h)
    return _rel_err(sn.grad, np.asarray(fd))


def _fakequant_scale_clamped_fd(seed: int, bits: int = 4) -> float:
    """At clamped points the lsq and frozen-code rules coincide with plain FD."""
    r = make_rng(seed)
    s, z, hi = 0.5, 3, (1 << bits) - 1
    x = s * (hi - z + 2 + r.uniform(0.5, 2, 6))
    a = r.standard_normal(x.shape)

    def loss_value(sv):
        y, _ = ad._backend.uniform_fakequant(x, sv, np.int64(z), hi, None)
        return float((a * y).sum())

    sn = ad.leaf(np.asarray(s))
    y = ad.fakequant_uniform_node(ad.constant(x), sn, z, bits, axis=None)
    ad.backward(ad.sum_all(ad.mul(ad.constant(a), y)))
    h = 1e-7 * s
    fd = (loss_value(s + h) - loss_value(s - h)) / (2 * h)
    return _rel_err(sn.grad, np.asarray(fd))


def _fakequant_scale_lsq_oracle(seed: int, bits: int = 4) -> float:
    """Scalar recomputation of the lsq rule, element by element."""
    r = make_rng(seed)
    x, s, z, hi = _guarded_uniform_point(r, bits)
    x = np.concatenate([x, s * (hi - z + 3 + r.uniform(0, 1, 3)),
                        s * (-z - 3 - r.uniform(0, 1, 3))])
    a = r.standard_normal(x.shape)
    sn = ad.leaf(np.asarray(s))
    y = ad.fakequant_uniform_node(ad.constant(x), sn, z, bits, axis=None)
    ad.backward(ad.sum_all(ad.mul(ad.constant(a), y)))
    want = 0.0
    for xi, ai in zip(x, a):
        t = round(xi / s) + z
        q = min(max(t, 0), hi)
        if 0 <= t <= hi:
            want += ai * ((q - z) - xi / s)
        else:
            want += ai * (q - z)
    return _rel_err(sn.grad, np.asarray(want))


def _log2_checks(seed: int, bits: int = 4) -> float:
    """Clamped-x FD, frozen-code scale FD and formula oracles for log2 nodes."""
    r = make_rng(seed)
    hi = (1 << bits) - 1
    s = float(r.uniform(0.5, 2.0))
    # interior codes with log-domain fractional parts away from .5
    codes = r.integers(1, hi - 1, size=10)
    frac = r.uniform(-0.3, 0.3, size=10)
    x = s * 2.0 ** (-(codes + frac))
    a = r.standard_normal(x.shape)

    worst = 0.0
    # STE x-gradient against the in-range mask oracle
    xn = ad.leaf(x)
    y = ad.fakequant_log2_node(xn, ad.constant(s), bits)
    ad.backward(ad.sum_all(ad.mul(ad.constant(a), y)))
    worst = max(worst, _rel_err(xn.grad, a))

    # clamped x: the real forward is flat, FD must agree with the zero grad
    x_cl = np.array([s * 2.0, s * 2.0 ** (-(hi + 3.4))])
    a_cl = r.standard_normal(2)
    xn = ad.leaf(x_cl)
    y = ad.fakequant_log2_node(xn, ad.constant(s), bits)
    ad.backward(ad.sum_all(ad.mul(ad.constant(a_cl), y)))

    def lq_loss(xv):
        with np.errstate(divide="ignore"):
            c = np.clip(np.rint(-np.log2(np.maximum(xv, 0) / s)), 0, hi)
        return float((a_cl * (s * np.ldexp(1.0, -c.astype(np.int64)))).sum())

    h = 1e-8
    fd = np.array([(lq_loss(x_cl + h * e) - lq_loss(x_cl - h * e)) / (2 * h)
                   for e in np.eye(2)])
    worst = max(worst, _rel_err(xn.grad, fd))

    # frozen-code scale gradient vs plain FD at code-stable points
    sn = ad.leaf(np.asarray(s))
    y = ad.fakequant_log2_node(ad.constant(x), sn, bits,
                               policy=ad.STEPolicy(scale_rule="frozen-code"))
    ad.backward(ad.sum_all(ad.mul(ad.constant(a), y)))

    def lq_loss_s(sv):
        with np.errstate(divide="ignore"):
            c = np.clip(np.rint(-np.log2(x / sv)), 0, hi)
        return float((a * (sv * np.ldexp(1.0, -c.astype(np.int64)))).sum())

    hs = 1e-7 * s
    fd_s = (lq_loss_s(s + hs) - lq_loss_s(s - hs)) / (2 * hs)
    worst = max(worst, _rel_err(sn.grad, np.asarray(fd_s)))

    # lsq scale rule vs scalar oracle (contributions only from clamped codes)
    x_mix = np.concatenate([x, np.array([s * 3.0, s * 2.0 ** (-(hi + 2.2))])])
    a_mix = r.standard_normal(x_mix.shape)
    sn = ad.leaf(np.asarray(s))
    y = ad.fakequant_log2_node(ad.constant(x_mix), sn, bits)
    ad.backward(ad.sum_all(ad.mul(ad.constant(a_mix), y)))
    want = 0.0
    for xi, ai in zip(x_mix, a_mix):
        u = -np.log2(xi / s)
        t = np.rint(u)
        c = int(min(max(t, 0), hi))
        if not (0 <= t <= hi):
            want += ai * 2.0 ** (-c)
    worst = max(worst, _rel_err(sn.grad, np.asarray(want)))
    return worst


def _soft_weight_fd(seed: int, bits: int = 4) -> float:
    r = make_rng(seed)
    hi = (1 << bits) - 1
    dout, din = 3, 4
    s = r.uniform(0.2, 0.6, dout)
    z = r.integers(3, hi - 3, dout)
    # weights whose soft codes sit strictly inside the clamp range
    w = s.reshape(1, -1) * (r.integers(1, hi - 2, (din, dout)) - z.reshape(1, -1)
                            + r.uniform(0.3, 0.7, (din, dout)))
    a = r.standard_normal((din, dout))
    leaves = {"v": r.uniform(-1.5, 1.5, (din, dout))}

    def build(nodes):
        sw = ad.soft_weight_node(w, s, z, nodes["v"], bits)
        return ad.sum_all(ad.mul(ad.constant(a), sw))

    return _fd_graph(build, leaves)


def _round_penalty_fd(seed: int) -> float:
    r = make_rng(seed)
    beta = float(r.uniform(2.0, 10.0))
    v = r.uniform(-1.5, 1.5, (3, 4))
    h = ad.rect_sigmoid(v)
    v = v[np.abs(2 * h - 1) > 0.05].reshape(-1)  # keep |2h-1|^(beta-1) smooth

    def build(nodes):
        return ad.round_penalty_node(nodes["v"], beta)

    return _fd_graph(build, {"v": v})


def gradient_audit(seed: int = 0, n_chains: int = 36, n_modules: int = 8) -> dict:
    """Run the full audit; returns per-op-class worst relative errors."""
    classes: dict[str, dict] = {}

    def record(name, errs, tol):
        worst = max(errs) if errs else 0.0
        classes[name] = {"max_rel_err": worst, "threshold": tol,
                         "ok": bool(worst <= tol)}

    record("composite_chains",
           [_random_chain(seed * 1000 + i) for i in range(n_chains)],
           TOL_DIFFERENTIABLE)
    record("mha_module",
           [_mini_mha(seed * 2000 + i) for i in range(n_modules)],
           TOL_DIFFERENTIABLE)
    record("mlp_module",
           [_mini_mlp(seed * 3000 + i) for i in range(n_modules)],
           TOL_DIFFERENTIABLE)
    record("spmm", [_spmm_graph(seed * 4000 + i) for i in range(4)],
           TOL_DIFFERENTIABLE)
    record("soft_weight_v", [_soft_weight_fd(seed * 5000 + i) for i in range(8)],
           TOL_DIFFERENTIABLE)
    record("round_penalty", [_round_penalty_fd(seed * 6000 + i) for i in range(8)],
           TOL_DIFFERENTIABLE)
    record("fakequant_x_stride",
           [_fakequant_x_stride_fd(seed * 7000 + i) for i in range(8)], TOL_STE)
    record("fakequant_x_clamped",
           [_fakequant_x_clamped_fd(seed * 7100 + i) for i in range(8)], TOL_STE)
    record("fakequant_scale_frozen",
           [_fakequant_scale_frozen_fd(seed * 7200 + i) for i in range(8)], TOL_STE)
    record("fakequant_scale_clamped",
           [_fakequant_scale_clamped_fd(seed * 7300 + i) for i in range(8)], TOL_STE)
    record("fakequant_scale_lsq_formula",
           [_fakequant_scale_lsq_oracle(seed * 7400 + i) for i in range(8)], TOL_STE)
    record("log2_fakequant",
           [_log2_checks(seed * 7500 + i) for i in range(8)], TOL_STE)

    n_graphs = n_chains + 2 * n_modules + 4
    return {"classes": classes, "n_graphs": n_graphs,
            "passed": all(c["ok"] for c in classes.values())}


def require_pass(report: dict) -> None:
    if not report["passed"]:
        bad = {k: v["max_rel_err"] for k, v in report["classes"].items()
               if not v["ok"]}
        raise GradCheckError(f"gradient audit failed: {bad}")
