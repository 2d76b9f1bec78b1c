import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sxlnet import tensor as tc
from sxlnet.tensor import GraphStateError, ShapeError, Tensor

from helpers import numeric_grad, rel_err


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True, dtype=np.float64)


def test_matmul_identity():
    a = Tensor([[1, 0], [0, 1]])
    b = Tensor([[2, 3], [4, 5]])
    np.testing.assert_array_equal(tc.matmul(a, b).data, [[2, 3], [4, 5]])


def test_matmul_row_by_column():
    assert tc.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_matches_triple_loop(rng, f64):
    a = rng.normal(size=(5, 4))
    b = rng.normal(size=(4, 3))
    expected = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(tc.matmul(Tensor(a), Tensor(b)).data, expected, rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward(rng, f64):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    dc = rng.normal(size=(3, 2))
    tc.tsum(tc.mul(tc.matmul(a, b), Tensor(dc))).backward()
    np.testing.assert_allclose(a.grad, dc @ b.data.T, atol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ dc, atol=1e-12)


class TestMaskedSoftmax:
    def test_uniform(self):
        p = tc.masked_softmax(Tensor([0.0, 0.0, 0.0]), [1, 1, 1]).data
        np.testing.assert_allclose(p, [1 / 3] * 3, atol=1e-7)

    def test_masked_max_excluded(self):
        p = tc.masked_softmax(Tensor([10.0, 0.0, 0.0]), [0, 1, 1]).data
        assert p[0] == 0.0
        np.testing.assert_allclose(p[1:], [0.5, 0.5], atol=1e-7)

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_two_term(self, dtype):
        p = tc.masked_softmax(Tensor([1.0, 2.0, 3.0], dtype=dtype), [1, 0, 1]).data
        e2 = math.exp(2)
        np.testing.assert_allclose(p, [1 / (1 + e2), 0.0, e2 / (1 + e2)], rtol=1e-6)
        assert p[1] == 0.0

    def test_fully_masked_row_is_zero(self, f64):
        s = leaf([[1.0, 2.0], [3.0, 4.0]])
        p = tc.masked_softmax(s, [[0, 0], [1, 1]])
        assert p.data[0].tolist() == [0.0, 0.0]
        assert np.all(np.isfinite(p.data))
        tc.tsum(tc.mul(p, Tensor([[1.0, 5.0], [2.0, 7.0]]))).backward()
        assert s.grad[0].tolist() == [0.0, 0.0]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_rows_sum_to_one(self, t, seed):
        r = np.random.default_rng(seed)
        s = r.normal(scale=5, size=(4, t))
        mask = r.random((4, t)) < 0.6
        mask[:, 0] = True
        p = tc.masked_softmax(Tensor(s, dtype=np.float32), mask).data
        assert np.all(p[~mask] == 0)
        assert np.all(p[mask] > 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_gradient(self, rng, f64):
        s = leaf(rng.normal(size=(3, 5)))
        mask = np.array([[1, 1, 0, 1, 0], [1, 1, 1, 1, 1], [0, 0, 1, 0, 0]], bool)
        w = rng.normal(size=(3, 5))

        def f():
            return tc.tsum(tc.mul(tc.masked_softmax(Tensor(s.data), mask), Tensor(w))).item()

        tc.tsum(tc.mul(tc.masked_softmax(s, mask), Tensor(w))).backward()
        assert rel_err(s.grad, numeric_grad(f, s.data)) < 1e-6


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        out = tc.layer_norm(Tensor([1.0, 1.0, 1.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-7)

    def test_already_normalized(self, f64):
        out = tc.layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-10)

    def test_affine_closed_form(self, f64):
        eps = 1e-5
        x = np.array([1.0, 2.0, 3.0])
        out = tc.layer_norm(Tensor(x), Tensor(np.full(3, 2.0)), Tensor(np.ones(3)), eps=eps)
        std = math.sqrt(2 / 3 + eps)
        np.testing.assert_allclose(out.data, 2 * (x - 2) / std + 1, atol=1e-12)

    def test_gradient(self, rng, f64):
        x, g, b = leaf(rng.normal(size=(4, 6))), leaf(rng.normal(size=6)), leaf(rng.normal(size=6))
        w = rng.normal(size=(4, 6))

        def f():
            return float((tc.layer_norm(Tensor(x.data), Tensor(g.data), Tensor(b.data)).data * w).sum())

        tc.tsum(tc.mul(tc.layer_norm(x, g, b), Tensor(w))).backward()
        for t in (x, g, b):
            assert rel_err(t.grad, numeric_grad(f, t.data)) < 1e-6


def test_backward_sum_gives_ones(f64):
    x = leaf(np.arange(6.0).reshape(2, 3))
    tc.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_quadratic(f64):
    x = leaf([1.0, 2.0])
    tc.tsum(tc.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_fan_out_accumulates(rng, f64):
    x = leaf(rng.normal(size=3))
    y = tc.mul(x, 3.0)
    loss = tc.tsum(tc.add(tc.mul(y, y), tc.exp(y)))
    loss.backward()
    oracle = numeric_grad(lambda: float(((3 * x.data) ** 2 + np.exp(3 * x.data)).sum()), x.data)
    assert rel_err(x.grad, oracle) < 1e-8


def test_backward_twice_is_a_state_error(f64):
    x = leaf([1.0, 2.0])
    loss = tc.tsum(tc.mul(x, x))
    loss.backward()
    with pytest.raises(GraphStateError):
        loss.backward()


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        tc.backward(tc.mul(leaf([1.0, 2.0]), 2.0))


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "relu", "transpose", "reshape", "concat", "gather",
                                "mean", "log_softmax", "huber", "cross_entropy", "broadcast_matmul"])
def test_op_gradients(op, rng, f64):
    a = leaf(rng.normal(size=(2, 3, 4)))
    b = leaf(rng.normal(size=(3, 4)) + 3.0)
    w = rng.normal(size=(2, 3, 4))
    labels = np.array([0, 3, 1, 2, 2, 0])

    def build(a_, b_):
        if op == "add":
            return tc.tsum(tc.mul(tc.add(a_, b_), Tensor(w)))
        if op == "sub":
            return tc.tsum(tc.mul(tc.sub(a_, b_), Tensor(w)))
        if op == "mul":
            return tc.tsum(tc.mul(tc.mul(a_, b_), Tensor(w)))
        if op == "div":
            return tc.tsum(tc.mul(tc.div(a_, b_), Tensor(w)))
        if op == "relu":
            return tc.tsum(tc.mul(tc.relu(a_), Tensor(w)))
        if op == "transpose":
            return tc.tsum(tc.mul(tc.transpose(a_, (2, 0, 1)), Tensor(w.transpose(2, 0, 1))))
        if op == "reshape":
            return tc.tsum(tc.mul(tc.reshape(a_, (6, 4)), Tensor(w.reshape(6, 4))))
        if op == "concat":
            c = tc.concat([a_, tc.reshape(b_, (1, 3, 4))], axis=0)
            return tc.tsum(tc.mul(c, Tensor(np.concatenate([w, w[:1]]))))
        if op == "gather":
            g = tc.gather_rows(a_, (np.array([0, 1, 1]), np.array([2, 0, 2])))
            return tc.tsum(tc.mul(g, Tensor(w[0])))
        if op == "mean":
            return tc.tsum(tc.mul(tc.mean(a_, axis=1), Tensor(w[:, 0])))
        if op == "log_softmax":
            return tc.tsum(tc.mul(tc.log_softmax(a_), Tensor(w)))
        if op == "huber":
            return tc.huber_loss(tc.mul(a_, b_), w, 1.0)
        if op == "cross_entropy":
            return tc.cross_entropy(tc.reshape(a_, (6, 4)), labels)
        if op == "broadcast_matmul":
            return tc.tsum(tc.mul(tc.matmul(a_, tc.transpose(b_, (1, 0))), Tensor(w[:, :, :3])))
        raise AssertionError(op)

    build(a, b).backward()

    def f():
        return build(Tensor(a.data), Tensor(b.data)).item()

    assert rel_err(a.grad, numeric_grad(f, a.data)) < 1e-6
    if b.grad is not None:
        assert rel_err(b.grad, numeric_grad(f, b.data)) < 1e-6


def test_dropout_is_inverted_and_off_at_eval(rng):
    x = Tensor(np.ones((200, 50)))
    assert tc.dropout(x, 0.5, rng, train=False) is x
    y = tc.dropout(x, 0.5, rng, train=True).data
    assert set(np.unique(y).tolist()) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05


def test_determinism_bitwise(f64):
    def run():
        r = np.random.default_rng(7)
        a = leaf(r.normal(size=(4, 5)))
        b = leaf(r.normal(size=(5, 3)))
        s = tc.masked_softmax(tc.matmul(a, b), r.random((4, 3)) < 0.7)
        loss = tc.tsum(tc.mul(s, s))
        loss.backward()
        return loss.data.tobytes(), a.grad.tobytes(), b.grad.tobytes()

    assert run() == run()


def test_default_dtype_switch():
    assert Tensor([1.0]).dtype == np.float32
    with tc.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
