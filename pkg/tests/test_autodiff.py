import numpy as np
import pytest

import adfq.autodiff as ad
from adfq.errors import ShapeError
from adfq.gradcheck import (
    TOL_DIFFERENTIABLE,
    TOL_STE,
    _fd_graph,
    gradient_audit,
)
from adfq.tensor_ops import make_rng

from conftest import assert_bit_equal


class TestBasics:
    def test_sum_grad_is_ones(self, rng):
        x = ad.leaf(rng.standard_normal((3, 4)))
        ad.backward(ad.sum_all(x))
        assert_bit_equal(x.grad, np.ones((3, 4)))

    def test_matmul_adjoint(self, rng):
        a = ad.leaf(rng.standard_normal((3, 4)))
        b = rng.standard_normal((4, 5))
        ad.backward(ad.sum_all(ad.matmul(a, ad.constant(b))))
        assert np.abs(a.grad - np.ones((3, 5)) @ b.T).max() <= 1e-12

    def test_nonscalar_loss_rejected(self, rng):
        x = ad.leaf(rng.standard_normal((2, 2)))
        with pytest.raises(ShapeError):
            ad.backward(x)

    def test_composite_chain_vs_fd(self, rng):
        leaves = {
            "x": rng.standard_normal((3, 5)),
            "g": rng.uniform(0.5, 1.5, 5),
            "b": rng.standard_normal(5) * 0.1,
            "w": rng.standard_normal((5, 4)),
        }

        def build(nodes):
            y = ad.layernorm_node(nodes["x"], nodes["g"], nodes["b"])
            y = ad.gelu_node(y)
            y = ad.matmul(y, nodes["w"])
            return ad.sum_all(ad.mul(y, y))

        assert _fd_graph(build, leaves) <= 1e-6

    def test_shared_subgraph_accumulates(self, rng):
        x = ad.leaf(np.array([2.0]))
        y = ad.add(ad.mul(x, x), ad.mul(x, ad.constant(np.array([3.0]))))
        ad.backward(ad.sum_all(y))
        assert abs(x.grad[0] - (2 * 2.0 + 3.0)) <= 1e-12

    def test_grad_not_pushed_into_constants(self, rng):
        c = ad.constant(rng.standard_normal((2, 2)))
        x = ad.leaf(rng.standard_normal((2, 2)))
        ad.backward(ad.sum_all(ad.mul(x, c)))
        assert c.grad is None


class TestRectSigmoid:
    def test_zero_maps_to_half(self):
        # sigma(0) * (1.1 - (-0.1)) + (-0.1) = 0.5
        assert ad.rect_sigmoid(np.zeros(1))[0] == pytest.approx(0.5, abs=1e-15)

    def test_saturation(self):
        assert ad.rect_sigmoid(np.array([40.0]))[0] == 1.0
        assert ad.rect_sigmoid(np.array([-40.0]))[0] == 0.0

    def test_range_and_monotone(self, rng):
        v = np.sort(rng.standard_normal(200) * 5)
        h = ad.rect_sigmoid(v)
        assert h.min() >= 0.0 and h.max() <= 1.0
        assert np.all(np.diff(h) >= 0)

    def test_inverse(self, rng):
        h = rng.uniform(0.05, 0.95, 50)
        assert np.abs(ad.rect_sigmoid(ad.rect_sigmoid_inverse(h)) - h).max() <= 1e-12


class TestSoftWeight:
    def test_saturated_v_gives_ceil(self, rng):
        w = rng.standard_normal((3, 2))
        s = np.array([0.3, 0.4])
        z = np.array([7, 7])
        v = np.full((3, 2), 50.0)  # h(v) = 1
        out = ad.soft_weight_node(w, s, z, ad.constant(v), bits=4)
        want = s * (np.clip(np.floor(w / s) + z + 1.0, 0, 15) - z)
        assert_bit_equal(out.value, want)

    def test_v_zero_gives_half_step(self):
        w = np.array([[0.5]])
        s = np.array([1.0])
        z = np.array([7])
        out = ad.soft_weight_node(w, s, z, ad.constant(np.zeros((1, 1))), bits=4)
        # floor(0.5) + 7 + 0.5 - 7 = 0.5
        assert out.value[0, 0] == pytest.approx(0.5, abs=1e-15)

    def test_grad_matches_fd(self, rng):
        from adfq.gradcheck import _soft_weight_fd
        assert _soft_weight_fd(5) <= 1e-6


class TestFakequantNodes:
    def test_ste_inside_range(self, rng):
        s, z, bits = 0.5, 7, 4
        x = ad.leaf(s * (np.arange(2, 10) - z + 0.3))
        y = ad.fakequant_uniform_node(x, ad.constant(s), z, bits)
        ad.backward(ad.sum_all(y))
        assert_bit_equal(x.grad, np.ones(8))

    def test_clamp_ceiling_grads(self):
        s, z, bits = 1.0, 0, 2
        x = ad.leaf(np.array([10.0]))
        sn = ad.leaf(np.asarray(s))
        y = ad.fakequant_uniform_node(x, sn, z, bits)
        ad.backward(ad.sum_all(y))
        assert x.grad[0] == 0.0
        assert sn.grad == (2**bits - 1) - z

    def test_lsq_scale_rule_formula(self):
        from adfq.gradcheck import _fakequant_scale_lsq_oracle
        assert _fakequant_scale_lsq_oracle(11) <= 1e-10

    def test_per_patch_scale_grads_are_per_row(self, rng):
        x = rng.standard_normal((4, 6))
        from adfq.quantizers import uq_calibrate
        p = uq_calibrate(x, bits=4, granularity="per-patch")
        sn = ad.leaf(p.scale.copy())
        y = ad.fakequant_uniform_node(ad.constant(x), sn, p.zero_point, 4, axis=0)
        ad.backward(ad.sum_all(y))
        assert sn.grad.shape == (4,)

    def test_log2_node_forward_matches_quantizers(self, rng):
        from adfq.quantizers import log2_fakequant, shift_log2_quantize
        x = rng.standard_normal(32)
        _, p = shift_log2_quantize(x, bits=4)
        node = ad.fakequant_log2_node(ad.constant(x), ad.constant(p.scale), 4,
                                      shift=p.shift, epsilon=p.epsilon,
                                      shifted=True)
        want, _ = log2_fakequant(x, p)
        assert_bit_equal(node.value, want)


class TestRoundPenalty:
    def test_binary_h_gives_zero(self):
        v = np.array([50.0, -50.0])
        out = ad.round_penalty_node(ad.constant(v), beta=3.0)
        assert float(out.value) == 0.0

    def test_half_h_gives_count(self):
        v = np.zeros(7)  # h = 0.5 -> each term is 1
        out = ad.round_penalty_node(ad.constant(v), beta=2.0)
        assert float(out.value) == pytest.approx(7.0, abs=1e-12)

    def test_matches_scalar_oracle(self, rng):
        v = rng.standard_normal(20)
        beta = 3.7
        out = ad.round_penalty_node(ad.constant(v), beta=beta)
        want = sum(1 - abs(2 * float(h) - 1) ** beta for h in ad.rect_sigmoid(v))
        assert abs(float(out.value) - want) <= 1e-12


class TestGradientAudit:
    def test_full_audit_passes(self):
        report = gradient_audit(seed=3, n_chains=12, n_modules=3)
        assert report["passed"], report["classes"]
        for cls, entry in report["classes"].items():
            assert entry["max_rel_err"] <= entry["threshold"], (cls, entry)

    def test_tolerances_pinned(self):
        assert TOL_DIFFERENTIABLE == 1e-6
        assert TOL_STE == 1e-4


@pytest.mark.skipif(not pytest.importorskip("torch", reason="torch unavailable"),
                    reason="torch unavailable")
class TestTorchCrossCheck:
    """Engine gradients vs torch.autograd on the same STE surrogate.

    FD of the raw piecewise-constant forward is zero through any
    downstream activation quantizer, so an independent autodiff is the
    right oracle for chained STE gradients.
    """

    def _torch_fakequant(self, x, s, z, hi):
        import torch
        t = torch.round(x / s) + z
        c = torch.clamp(t, 0.0, float(hi))
        y_val = s * (c - z)
        in_range = ((t >= 0) & (t <= hi)).to(x.dtype)
        q_minus_z = (c - z).detach()
        # value = y_val; grads: STE to x, lsq rule to s
        return (y_val.detach() + (x - x.detach()) * in_range.detach()
                + (s - s.detach()) * (q_minus_z - (x / s).detach() * in_range.detach()))

    def test_chained_ste_gradients(self, rng):
        import torch
        bits = 4
        hi = (1 << bits) - 1
        n, d = 3, 4
        x = rng.standard_normal((n, d))
        w = rng.standard_normal((d, d)) / 2
        s0 = float(np.abs(x).max() * 2 / hi)
        z0 = hi // 2
        s1 = float(np.abs(x @ w).max() * 2 / hi) if np.abs(x @ w).max() > 0 else 1.0

        # engine: fq -> matmul -> fq -> sum of squares
        sn0 = ad.leaf(np.asarray(s0))
        sn1 = ad.leaf(np.asarray(s1))
        wn = ad.leaf(w.copy())
        y = ad.fakequant_uniform_node(ad.constant(x), sn0, z0, bits)
        y = ad.matmul(y, wn)
        y = ad.fakequant_uniform_node(y, sn1, z0, bits)
        loss = ad.sum_all(ad.mul(y, y))
        ad.backward(loss)

        xt = torch.tensor(x)
        wt = torch.tensor(w, requires_grad=True)
        st0 = torch.tensor(s0, dtype=torch.float64, requires_grad=True)
        st1 = torch.tensor(s1, dtype=torch.float64, requires_grad=True)
        yt = self._torch_fakequant(xt, st0, z0, hi)
        yt = yt @ wt
        yt = self._torch_fakequant(yt, st1, z0, hi)
        losst = (yt * yt).sum()
        losst.backward()

        assert abs(float(loss.value) - float(losst.detach())) <= 1e-10
        assert np.abs(wn.grad - wt.grad.numpy()).max() <= 1e-9
        assert abs(float(sn0.grad) - float(st0.grad)) <= 1e-9
        assert abs(float(sn1.grad) - float(st1.grad)) <= 1e-9
