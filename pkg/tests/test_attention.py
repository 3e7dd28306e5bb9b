import math

import numpy as np
import pytest

from pudit.attention import GateProjParams, MultiHeadAttentionParams, ZeroLinearParams, gate_project, mha, zero_linear
from pudit.errors import ShapeMismatch
from pudit.gradcheck import check_function
from pudit.tensor import Tensor, backward, finite_diff_grad, mul, rel_error, sum_all


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def naive_mha(q_in, kv_in, p):
    """Loop-per-head reference."""
    wq, wk, wv, wo = (np.asarray(t.data, dtype=np.float64) for t in (p.wq, p.wk, p.wv, p.wo))
    n, s, d = q_in.shape
    hd = d // p.heads
    out = np.zeros((n, s, d))
    for b in range(n):
        q, k, v = q_in[b] @ wq, kv_in[b] @ wk, kv_in[b] @ wv
        heads = []
        for h in range(p.heads):
            sl = slice(h * hd, (h + 1) * hd)
            logits = q[:, sl] @ k[:, sl].T / math.sqrt(hd)
            w = np.exp(logits - logits.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            heads.append(w @ v[:, sl])
        out[b] = np.concatenate(heads, axis=1) @ wo
    return out


class TestMHA:
    def test_matches_loop_reference(self, rng):
        p = MultiHeadAttentionParams(8, 2, rng).to(np.float64)
        q, kv = rng.standard_normal((2, 3, 8)), rng.standard_normal((2, 5, 8))
        np.testing.assert_allclose(mha(Tensor(q), Tensor(kv), p).data, naive_mha(q, kv, p), atol=1e-12)

    def test_single_token_weight_is_one(self, rng):
        p = MultiHeadAttentionParams(4, 2, rng).to(np.float64)
        q, kv = rng.standard_normal((1, 1, 4)), rng.standard_normal((1, 1, 4))
        expected = kv[0] @ p.wv.data @ p.wo.data
        np.testing.assert_allclose(mha(Tensor(q), Tensor(kv), p).data[0], expected, atol=1e-12)

    def test_zero_values_give_zero(self, rng):
        p = MultiHeadAttentionParams(4, 2, rng)
        p.wv.data[:] = 0
        out = mha(Tensor(rng.standard_normal((1, 3, 4))), Tensor(rng.standard_normal((1, 3, 4))), p).data
        assert not out.any()

    def test_gradient(self, rng):
        p = MultiHeadAttentionParams(4, 2, rng).to(np.float64)
        res = check_function("mha", lambda x, *_: mha(x, x, p), [Tensor(rng.standard_normal((1, 3, 4))),
                                                                p.wq, p.wk, p.wv, p.wo], rng)
        assert res.rel_error < 1e-4

    def test_key_value_permutation_symmetry(self, rng):
        p = MultiHeadAttentionParams(4, 2, rng).to(np.float64)
        q, kv = rng.standard_normal((1, 3, 4)), rng.standard_normal((1, 3, 4))
        perm = [2, 0, 1]
        a = mha(Tensor(q), Tensor(kv), p).data
        b = mha(Tensor(q), Tensor(kv[:, perm]), p).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_shape_errors(self, rng):
        p = MultiHeadAttentionParams(4, 2, rng)
        with pytest.raises(ShapeMismatch):
            mha(Tensor(np.zeros((1, 3, 6))), Tensor(np.zeros((1, 3, 6))), p)
        with pytest.raises(ShapeMismatch):
            MultiHeadAttentionParams(6, 4, rng)

    def test_clone_does_not_alias(self, rng):
        p = MultiHeadAttentionParams(4, 2, rng)
        c = p.clone()
        assert c.wq.data.tobytes() == p.wq.data.tobytes()
        c.wq.data[0, 0] += 1
        assert c.wq.data[0, 0] != p.wq.data[0, 0]


class TestZeroLinear:
    def test_zero_at_init(self, rng):
        p = ZeroLinearParams(5)
        assert not p.weight.data.any() and not p.bias.data.any()
        out = zero_linear(Tensor(rng.standard_normal((2, 3, 5)).astype(np.float32) * 1e6), p)
        assert out.data.tobytes() == np.zeros((2, 3, 5), dtype=np.float32).tobytes()

    def test_identity_weight(self, rng):
        p = ZeroLinearParams(3).to(np.float64)
        p.weight.data[:] = np.eye(3)
        x = rng.standard_normal((4, 3))
        np.testing.assert_array_equal(zero_linear(Tensor(x), p).data, x)

    def test_weight_grad_at_init_is_outer_product(self, rng):
        p = ZeroLinearParams(3).to(np.float64)
        p.requires_grad_(True)
        x = rng.standard_normal((4, 3))
        up = rng.standard_normal((4, 3))
        loss = lambda *_: sum_all(mul(zero_linear(Tensor(x), p), Tensor(up)))  # noqa: E731
        backward(loss())
        np.testing.assert_allclose(p.weight.grad, x.T @ up, atol=1e-12)
        assert rel_error(p.weight.grad, finite_diff_grad(loss, p.weight)) < 1e-6

    def test_trailing_extent(self):
        with pytest.raises(ShapeMismatch):
            zero_linear(Tensor(np.zeros((2, 4))), ZeroLinearParams(3))


class TestGateProj:
    def test_zero_params_give_half(self, rng):
        out = gate_project(Tensor(rng.standard_normal((2, 3, 4))), GateProjParams(4))
        assert np.all(out.data == 0.5)

    def test_saturation(self, rng):
        p = GateProjParams(4, rng=rng)
        p.b2.data[:] = 20.0
        assert np.all(gate_project(Tensor(rng.standard_normal((2, 4))), p).data > 0.9999)

    def test_open_interval(self, rng):
        p = GateProjParams(4, rng=rng)
        out = gate_project(Tensor(rng.standard_normal((50, 4)) * 10), p).data
        assert np.all(out > 0) and np.all(out < 1)

    def test_gradient(self, rng):
        p = GateProjParams(4, rng=rng).to(np.float64)
        res = check_function("gate", lambda x, *_: gate_project(x, p),
                             [Tensor(rng.standard_normal((2, 4))), p.w1, p.b1, p.w2, p.b2], rng)
        assert res.rel_error < 1e-4
