import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bagnet import nn
from bagnet.nn import ops
from bagnet.nn.tensor import DimensionError, NumericalError, Parameter, Tensor


def fd_grad(f, x, h=1e-6):
    """Central differences of scalar f over every entry of array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


def weighted_loss(out_fn, inputs, weights):
    """Backprop sum(w * out) through out_fn; returns analytic grads."""
    ts = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = out_fn(*ts)
    out.backward(weights)
    return [t.grad for t in ts]


def check_op(out_fn, inputs, seed=0, tol=1e-5):
    rng = np.random.default_rng(seed)
    probe = out_fn(*[Tensor(x) for x in inputs]).data
    w = rng.normal(size=probe.shape)
    analytic = weighted_loss(out_fn, inputs, w)
    for k, x in enumerate(inputs):
        def f(xk, k=k):
            args = [Tensor(v) for v in inputs]
            args[k] = Tensor(xk)
            return float((out_fn(*args).data * w).sum())
        numeric = fd_grad(f, x.copy())
        assert rel_err(analytic[k], numeric) < tol


class TestTensor:
    def test_nan_rejected(self):
        with pytest.raises(NumericalError):
            Tensor([1.0, np.nan])

    def test_inf_rejected(self):
        with pytest.raises(NumericalError):
            Tensor([np.inf])

    def test_zero_dim_rejected(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((0, 3)))


class TestMatmul:
    def test_identity(self):
        a = np.arange(4.0).reshape(2, 2)
        assert np.array_equal((Tensor(np.eye(2)) @ Tensor(a)).data, a)

    def test_hand(self):
        out = ops.matmul(Tensor([[1.0, 2], [3, 4]]), Tensor([[1.0], [1]]))
        assert np.array_equal(out.data, [[3.0], [7.0]])

    def test_gradient(self):
        rng = np.random.default_rng(1)
        check_op(ops.matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConv:
    def test_constant(self):
        out = ops.conv1d_narrow(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 2))))
        assert np.array_equal(out.data, [4.0, 4.0, 4.0])

    def test_zero_filter(self):
        rng = np.random.default_rng(0)
        out = ops.conv1d_narrow(Tensor(rng.normal(size=(3, 5))), Tensor(np.zeros((3, 2))))
        assert np.array_equal(out.data, np.zeros(4))

    def test_matches_loop(self):
        rng = np.random.default_rng(2)
        E, H = rng.normal(size=(3, 6)), rng.normal(size=(3, 3))
        out = ops.conv1d_narrow(Tensor(E), Tensor(H)).data
        expect = [np.sum(E[:, i:i + 3] * H) for i in range(4)]
        assert np.allclose(out, expect, rtol=0, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        check_op(ops.conv1d_narrow, [rng.normal(size=(3, 6)), rng.normal(size=(3, 3))])

    def test_batched_gradient(self):
        rng = np.random.default_rng(4)
        check_op(ops.conv1d, [rng.normal(size=(2, 5, 3)), rng.normal(size=(4, 2, 3))])

    def test_too_wide(self):
        with pytest.raises(DimensionError):
            ops.conv1d_narrow(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 3))))


def brute_topk(m, k):
    ranked = sorted(range(len(m)), key=lambda i: (-m[i], i))[:k]
    return sorted(ranked)


class TestKmax:
    def test_k1(self):
        assert ops.kmax_pool(Tensor([3.0, 1, 4, 1, 5]), 1).data.tolist() == [5.0]

    def test_k3(self):
        m = [3.0, 1, 4, 1, 5]
        idx = brute_topk(m, 3)
        assert ops.kmax_pool(Tensor(m), 3).data.tolist() == [m[i] for i in idx] == [3.0, 4.0, 5.0]

    def test_ties_leftmost(self):
        x = Tensor([2.0, 2.0, 1.0], requires_grad=True)
        out = ops.kmax_pool(x, 2)
        assert out.data.tolist() == [2.0, 2.0]
        out.backward(np.array([1.0, 10.0]))
        assert x.grad.tolist() == [1.0, 10.0, 0.0]
        assert brute_topk([2, 2, 1], 2) == [0, 1]

    def test_ties_three_way(self):
        x = Tensor([1.0, 7.0, 7.0, 7.0], requires_grad=True)
        ops.kmax_pool(x, 2).backward(np.ones(2))
        assert x.grad.tolist() == [0.0, 1.0, 1.0, 0.0]

    def test_short_input_padded(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        out = ops.kmax_pool(x, 3)
        assert out.data.tolist() == [1.0, 2.0, ops.KMAX_SENTINEL]
        out.backward(np.ones(3))
        assert x.grad.tolist() == [1.0, 1.0]

    def test_bad_k(self):
        with pytest.raises(ValueError):
            ops.kmax_pool(Tensor([1.0]), 0)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(1, 12), elements=st.integers(-3, 3).map(float)),
           st.integers(1, 5))
    def test_sparse_backward(self, m, k):
        x = Tensor(m, requires_grad=True)
        ops.kmax_pool(x, k).backward(np.ones(k))
        idx = brute_topk(list(m), k)
        expect = np.zeros(len(m))
        expect[idx] = 1.0
        assert np.array_equal(x.grad, expect)
        assert int((x.grad != 0).sum()) == min(k, len(m))

    def test_batched_gradient(self):
        rng = np.random.default_rng(5)
        check_op(lambda x: ops.kmax(x, 3, axis=1), [rng.normal(size=(2, 6, 3))])


class TestActivations:
    def test_sigmoid_zero(self):
        assert ops.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_extreme(self):
        out = ops.sigmoid(Tensor([-800.0, 800.0])).data
        assert out[0] >= 0 and out[1] == 1.0

    def test_relu(self):
        x = Tensor([-1.0], requires_grad=True)
        out = ops.relu(x)
        out.backward(np.ones(1))
        assert out.data[0] == 0 and x.grad[0] == 0

    @pytest.mark.parametrize("op", [ops.tanh, ops.sigmoid])
    def test_gradient(self, op):
        rng = np.random.default_rng(6)
        check_op(op, [rng.normal(size=7)], tol=1e-6)


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(ops.softmax(Tensor([0.0, 0, 0])).data, 1 / 3, atol=1e-15)

    def test_stable(self):
        out = ops.softmax(Tensor([1000.0, 0.0])).data
        assert out[0] == pytest.approx(1.0) and out[1] < 1e-300 + 1e-400

    def test_jacobian(self):
        rng = np.random.default_rng(7)
        check_op(ops.softmax, [rng.normal(size=5)])

    def test_log_softmax(self):
        rng = np.random.default_rng(8)
        check_op(ops.log_softmax, [rng.normal(size=(3, 5))])

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e3, 1e3)))
    def test_sums_to_one(self, x):
        assert abs(ops.softmax(Tensor(x)).data.sum() - 1.0) <= 1e-12


class TestBCE:
    def test_near_one(self):
        assert ops.bce(1, Tensor(1 - ops.BCE_EPS)).item() < 1e-6

    def test_half(self):
        assert ops.bce(0, Tensor(0.5)).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_bad_label(self):
        with pytest.raises(ValueError):
            ops.bce(0.3, Tensor(0.5))

    def test_gradient_random_pairs(self):
        rng = np.random.default_rng(9)
        y = rng.integers(0, 2, size=100).astype(float)
        p = rng.uniform(0.01, 0.99, size=100)
        t = Tensor(p.copy(), requires_grad=True)
        ops.bce(y, t).backward()
        num = fd_grad(lambda v: ops.bce(y, Tensor(v)).item(), p.copy(), h=1e-7)
        assert rel_err(t.grad, num) < 1e-5


class TestSegments:
    def test_max_mean(self):
        seg = ops.Segments([2, 1])
        x = Tensor([[0.2, 0.1], [0.9, 0.3], [0.4, 0.4]])
        assert ops.segment_max(x, seg).data.tolist() == [[0.9, 0.3], [0.4, 0.4]]
        assert np.allclose(ops.segment_mean(x, seg).data, [[0.55, 0.2], [0.4, 0.4]])

    def test_max_gradient_to_argmax_only(self):
        seg = ops.Segments([3])
        x = Tensor([[1.0], [5.0], [5.0]], requires_grad=True)
        ops.segment_max(x, seg).backward(np.ones((1, 1)))
        assert x.grad.ravel().tolist() == [0.0, 1.0, 0.0]

    def test_softmax_gradient(self):
        rng = np.random.default_rng(10)
        seg = ops.Segments([2, 3, 1])
        check_op(lambda x: ops.segment_softmax(x, seg), [rng.normal(size=(6, 3))])

    def test_mean_sum_gradient(self):
        rng = np.random.default_rng(11)
        seg = ops.Segments([2, 3])
        check_op(lambda x: ops.segment_mean(x, seg), [rng.normal(size=(5, 2))])
        check_op(lambda x: ops.segment_sum(x, seg), [rng.normal(size=(5, 2))])


class TestOptimizer:
    def test_zero_gradient(self):
        p = Parameter([1.0, 2.0], "w")
        opt = nn.AdaGrad([p])
        opt.step()
        assert p.data.tolist() == [1.0, 2.0]

    def test_single_step(self):
        p = Parameter([0.0], "w")
        opt = nn.AdaGrad([p], lr=0.1)
        p.grad[:] = 1.0
        nn.sgd_step([p], opt)
        assert p.data[0] == pytest.approx(-0.1 / math.sqrt(1 + opt.eps), abs=1e-15)
        assert p.grad[0] == 0.0 and opt.step_count == 1

    def test_quadratic_descent(self):
        p = Parameter([3.0, -2.0], "w")
        opt = nn.AdaGrad([p], lr=0.1)
        A = np.array([1.0, 4.0])
        losses = []
        for _ in range(100):
            loss = ops.sum(ops.mul(ops.mul(p, p), A))
            losses.append(loss.item())
            loss.backward()
            opt.step()
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_nan_names_parameter(self):
        p = Parameter([0.0], "encoder.W_h")
        opt = nn.AdaGrad([p])
        p.grad[:] = np.nan
        with pytest.raises(NumericalError, match="encoder.W_h"):
            opt.step()

    def test_duplicate_names(self):
        with pytest.raises(ValueError):
            nn.AdaGrad([Parameter([0.0], "a"), Parameter([1.0], "a")])


class TestGradCheck:
    def test_linear_layer(self):
        rng = np.random.default_rng(12)
        W = Parameter(rng.normal(size=(3, 4)), "W")
        b = Parameter(rng.normal(size=3), "b")
        x = Tensor(rng.normal(size=(5, 4)))
        target = rng.normal(size=(5, 3))

        def forward():
            out = ops.add(ops.matmul(x, ops.transpose(W)), b)
            diff = ops.add(out, Tensor(-target))
            return ops.sum(ops.mul(diff, diff))

        assert nn.grad_check(forward, [W, b]) < 1e-7

    def test_detects_wrong_gradient(self):
        p = Parameter([1.0, 2.0], "p")

        def bad_square(a):
            def backward(g):
                a._accumulate(g * a.data)  # missing factor 2
            return ops.make(a.data ** 2, (a,), backward)

        assert nn.grad_check(lambda: ops.sum(bad_square(p)), [p]) > 0.1


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(13)
        arrs = {"W_h": rng.normal(size=(3, 4)), "b": rng.normal(size=5), "s": np.array(2.5)}
        path = tmp_path / "m.bin"
        nn.save_params(path, arrs)
        back = nn.load_params(path)
        assert list(back) == list(arrs)
        for k in arrs:
            assert np.array_equal(back[k], arrs[k])
        raw = path.read_bytes()
        assert raw[:8] == b"BAGNET01"
        assert int.from_bytes(raw[8:16], "little") == 3

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"NOTMAGIC" + bytes(8))
        with pytest.raises(ValueError):
            nn.load_params(path)
