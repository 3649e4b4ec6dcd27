import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tfctx import tensor as T
from tfctx.errors import NumericalError, ShapeError


def conv2d_loops(x, w, b, stride, padding):
    """Nested-loop direct convolution oracle."""
    n, cin, f, t = x.shape
    cout, _, kf, kt = w.shape
    sf, st_ = stride
    pf, pt = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pf, pf), (pt, pt)))
    fo = (f + 2 * pf - kf) // sf + 1
    to = (t + 2 * pt - kt) // st_ + 1
    out = np.zeros((n, cout, fo, to))
    for ni in range(n):
        for ko in range(cout):
            for fi in range(fo):
                for ti in range(to):
                    acc = 0.0
                    for ci in range(cin):
                        for a in range(kf):
                            for bb in range(kt):
                                acc += xp[ni, ci, fi * sf + a, ti * st_ + bb] * w[ko, ci, a, bb]
                    out[ni, ko, fi, ti] = acc + b[ko]
    return out


class TestConv2d:
    def test_scalar_kernel_scales(self):
        x = T.Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        w = T.Tensor([[[[2.0]]]])
        b = T.Tensor([0.0])
        y = T.conv2d(x, w, b)
        np.testing.assert_allclose(y.data, [[[[2, 4], [6, 8]]]])

    def test_identity_impulse(self):
        rng = np.random.default_rng(0)
        x = T.Tensor(rng.normal(size=(1, 1, 4, 5)))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        y = T.conv2d(x, T.Tensor(w), T.Tensor([0.0]), padding=(1, 1))
        np.testing.assert_allclose(y.data, x.data)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, 5, 7))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=(1, 1), padding=(0, 0))
        want = conv2d_loops(x, w, b, (1, 1), (0, 0))
        np.testing.assert_allclose(got.data, want, atol=1e-12)

    @pytest.mark.parametrize("stride,padding", [((1, 1), (1, 1)), ((2, 1), (0, 1)), ((2, 2), (1, 0))])
    def test_strided_padded_matches_oracle(self, stride, padding):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 2, 6, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=stride, padding=padding)
        np.testing.assert_allclose(got.data, conv2d_loops(x, w, b, stride, padding), atol=1e-12)

    def test_output_extent_formula(self):
        x = T.Tensor(np.zeros((1, 1, 10, 9)))
        w = T.Tensor(np.zeros((2, 1, 3, 3)))
        y = T.conv2d(x, w, None, stride=(2, 2), padding=(1, 1))
        assert y.shape == (1, 2, (10 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError, match="channel"):
            T.conv2d(T.Tensor(np.zeros((1, 2, 4, 4))), T.Tensor(np.zeros((1, 3, 3, 3))), None)

    def test_kernel_too_large_raises(self):
        with pytest.raises(ShapeError, match="kernel"):
            T.conv2d(T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor(np.zeros((1, 1, 5, 5))), None)

    def test_gradients(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 2, 4, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)

        def loss_wrt(which):
            def fn(t):
                args = {"x": T.Tensor(x), "w": T.Tensor(w), "b": T.Tensor(b)}
                args[which] = t
                y = T.conv2d(args["x"], args["w"], args["b"], stride=(1, 2), padding=(1, 1))
                return T.reduce(T.mul(y, y), None, "sum")
            return fn

        for which, init in (("x", x), ("w", w), ("b", b)):
            assert T.finite_diff_check(loss_wrt(which), T.Tensor(init)) < 1e-6


class TestBatchNorm:
    def test_constant_input_reduces_to_beta(self):
        x = T.Tensor(np.full((2, 3, 4, 5), 7.0))
        y = T.batch_norm2d(x, T.Tensor(np.ones(3)), T.Tensor(np.full(3, 0.5)), eps=1e-5)
        np.testing.assert_allclose(y.data, 0.5, atol=1e-12)

    def test_normalizes_per_channel(self):
        rng = np.random.default_rng(5)
        x = T.Tensor(rng.normal(loc=3.0, scale=2.0, size=(4, 3, 6, 7)))
        y = T.batch_norm2d(x, T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)), eps=1e-12)
        np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
        np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), 1.0, atol=1e-6)

    def test_running_stats_and_inference(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(8, 2, 3, 4))
        running = T.RunningStats(2, momentum=1.0)
        T.batch_norm2d(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), running=running)
        np.testing.assert_allclose(running.mean, x.mean(axis=(0, 2, 3)))
        y = T.batch_norm2d(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)),
                           training=False, running=running)
        want = (x - running.mean[None, :, None, None]) / np.sqrt(running.var[None, :, None, None] + 1e-5)
        np.testing.assert_allclose(y.data, want)

    def test_gamma_mismatch_raises(self):
        with pytest.raises(ShapeError):
            T.batch_norm2d(T.Tensor(np.zeros((1, 3, 2, 2))), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)))

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 2, 4, 3))
        gamma = rng.normal(size=2)
        beta = rng.normal(size=2)
        target = rng.normal(size=(3, 2, 4, 3))

        def fn_x(t):
            y = T.batch_norm2d(t, T.Tensor(gamma), T.Tensor(beta))
            d = T.add(y, T.mul(T.Tensor(target), -1.0))
            return T.reduce(T.mul(d, d), None, "sum")

        def fn_gamma(t):
            y = T.batch_norm2d(T.Tensor(x), t, T.Tensor(beta))
            return T.reduce(T.mul(y, T.Tensor(target)), None, "sum")

        assert T.finite_diff_check(fn_x, T.Tensor(x)) < 1e-4
        assert T.finite_diff_check(fn_gamma, T.Tensor(gamma)) < 1e-6


class TestActivations:
    def test_fixed_points(self):
        assert T.activation(T.Tensor([0.0]), "sigmoid").item() == pytest.approx(0.5)
        assert T.activation(T.Tensor([0.0]), "tanh").item() == 0.0
        assert T.activation(T.Tensor([-3.0]), "relu").item() == 0.0

    def test_sigmoid_value(self):
        assert T.sigmoid(T.Tensor([1.0])).item() == pytest.approx(0.7310585786300049, abs=1e-10)

    def test_sigmoid_extreme_inputs_stable(self):
        y = T.sigmoid(T.Tensor([-1000.0, 1000.0]))
        np.testing.assert_allclose(y.data, [0.0, 1.0], atol=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.activation(T.Tensor([0.0]), "swish")


class TestSoftmax:
    def test_uniform(self):
        y = T.softmax_over(T.Tensor([0.0, 0.0]), (0,))
        np.testing.assert_allclose(y.data, [0.5, 0.5])

    def test_huge_logits_no_overflow(self):
        y = T.softmax_over(T.Tensor([1000.0, 1000.0]), (0,))
        np.testing.assert_allclose(y.data, [0.5, 0.5])

    def test_reference_values(self):
        y = T.softmax_over(T.Tensor([1.0, 2.0, 3.0]), (0,))
        np.testing.assert_allclose(y.data, [0.09003057, 0.24472847, 0.66524096], atol=1e-6)

    def test_multi_axis_sums_to_one(self):
        rng = np.random.default_rng(4)
        y = T.softmax_over(T.Tensor(rng.normal(size=(2, 3, 4))), (1, 2))
        np.testing.assert_allclose(y.data.sum(axis=(1, 2)), 1.0, atol=1e-12)

    def test_empty_axes_rejected(self):
        with pytest.raises(ShapeError):
            T.softmax_over(T.Tensor([1.0, 2.0]), ())

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_sums_to_one_property(self, logits):
        y = T.softmax_over(T.Tensor(logits), (0,))
        assert abs(float(y.data.sum()) - 1.0) < 1e-12
        assert (y.data > 0).all()


class TestReduce:
    def test_mean(self):
        assert T.reduce(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), (0, 1), "mean").item() == 2.5

    def test_max_tie_routes_to_lowest_flat_index(self):
        x = T.Tensor([3.0, 3.0, 1.0], requires_grad=True)
        T.reduce(x, (0,), "max").backward()
        np.testing.assert_allclose(x.grad, [1.0, 0.0, 0.0])

    def test_max_tie_rule_multi_axis(self):
        data = np.zeros((2, 2, 3))
        data[1] = 5.0  # ties across the slice being reduced
        x = T.Tensor(data, requires_grad=True)
        T.reduce(x, (1, 2), "max").sum().backward()
        want = np.zeros((2, 2, 3))
        want[0, 0, 0] = 1.0
        want[1, 0, 0] = 1.0
        np.testing.assert_allclose(x.grad, want)

    def test_sum_gradient_is_ones(self):
        x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        T.reduce(x, (0, 1), "sum").backward()
        np.testing.assert_allclose(x.grad, np.ones((2, 3)))

    def test_empty_axes_rejected(self):
        with pytest.raises(ShapeError):
            T.reduce(T.Tensor([1.0]), (), "sum")

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_mean_equals_sum_over_count(self, values):
        x = T.Tensor(values)
        m = T.reduce(x, (0,), "mean").item()
        s = T.reduce(x, (0,), "sum").item()
        assert abs(m - s / len(values)) < 1e-12 * max(1.0, abs(s))


class TestBackward:
    def test_quadratic(self):
        x = T.Tensor([1.0, -2.0, 3.0], requires_grad=True)
        T.reduce(T.mul(x, x), (0,), "sum").backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_sigmoid_chain(self):
        x = T.Tensor([0.3, -1.2], requires_grad=True)
        T.reduce(T.sigmoid(x), (0,), "sum").backward()
        s = 1 / (1 + np.exp(-x.data))
        np.testing.assert_allclose(x.grad, s * (1 - s))

    def test_non_scalar_rejected(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            T.mul(x, x).backward()

    def test_backward_twice_rejected(self):
        x = T.Tensor([1.0], requires_grad=True)
        loss = T.reduce(T.mul(x, x), (0,), "sum")
        loss.backward()
        with pytest.raises(RuntimeError, match="already called"):
            loss.backward()

    def test_grad_accumulates_across_reuse(self):
        x = T.Tensor([2.0], requires_grad=True)
        loss = T.add(T.mul(x, x), T.mul(x, 3.0)).sum()  # x^2 + 3x
        loss.backward()
        np.testing.assert_allclose(x.grad, [2 * 2.0 + 3.0])


class TestFiniteDiff:
    def test_linear_nearly_exact(self):
        w = np.array([1.0, -2.0, 0.5])
        fn = lambda t: T.reduce(T.mul(t, T.Tensor(w)), (0,), "sum")
        assert T.finite_diff_check(fn, T.Tensor([0.1, 0.2, 0.3])) < 1e-10

    def test_quadratic_nearly_exact(self):
        fn = lambda t: T.reduce(T.mul(t, t), (0,), "sum")
        assert T.finite_diff_check(fn, T.Tensor([0.5, -1.5])) < 1e-8

    def test_rejects_non_scalar_fn(self):
        with pytest.raises(ShapeError):
            T.finite_diff_check(lambda t: T.mul(t, t), T.Tensor([1.0, 2.0]))

    def test_detects_wrong_gradient(self):
        def broken_square_sum(t):
            y = T.mul(t, t)

            def bad_vjp(g):
                t._accumulate(g.sum(axis=0, keepdims=True).repeat(t.shape[0], 0) * 17.0)

            fake = T.Tensor._from_op(y.data, (t,), bad_vjp)
            return T.reduce(fake, (0,), "sum")

        assert T.finite_diff_check(broken_square_sum, T.Tensor([1.0, 2.0])) > 1e-4


class TestEveryDifferentiableOp:
    """Spec invariant: each primitive passes the finite-difference oracle on
    small random inputs."""

    @pytest.mark.parametrize("name,fn,shape", [
        ("add", lambda t, c: T.add(t, c).sum(), (3, 4)),
        ("mul", lambda t, c: T.mul(t, c).sum(), (3, 4)),
        ("div", lambda t, c: T.div(t, T.add(T.mul(c, c), 1.0)).sum(), (3, 4)),
        ("exp", lambda t, c: T.exp(t).sum(), (3, 4)),
        ("log", lambda t, c: T.log(T.add(T.mul(t, t), 1.5)).sum(), (3, 4)),
        ("sqrt", lambda t, c: T.sqrt(T.add(T.mul(t, t), 1.0)).sum(), (3, 4)),
        ("relu", lambda t, c: T.relu(t).sum(), (3, 4)),
        ("tanh", lambda t, c: T.tanh(t).sum(), (3, 4)),
        ("sigmoid", lambda t, c: T.sigmoid(t).sum(), (3, 4)),
        ("clamp_min", lambda t, c: T.clamp_min(t, 0.25).sum(), (3, 4)),
        ("softmax", lambda t, c: T.mul(T.softmax_over(t, (0, 1)), c).sum(), (3, 4)),
        ("sum", lambda t, c: T.mul(T.reduce(t, (1,), "sum"), T.reduce(c, (1,), "mean")).sum(), (3, 4)),
        ("mean", lambda t, c: T.mul(T.reduce(t, (0,), "mean"), T.reduce(c, (0,), "max")).sum(), (3, 4)),
        ("max", lambda t, c: T.reduce(t, (1,), "max").sum(), (3, 4)),
        ("reshape", lambda t, c: T.mul(T.reshape(t, (4, 3)), T.reshape(c, (4, 3))).sum(), (3, 4)),
        ("moveaxis", lambda t, c: T.mul(T.moveaxis(t, 0, 1), T.moveaxis(c, 0, 1)).sum(), (3, 4)),
        ("narrow", lambda t, c: T.mul(T.narrow(t, 1, 1, 2), T.narrow(c, 1, 0, 2)).sum(), (3, 4)),
        ("concat", lambda t, c: T.mul(T.concat([t, c], 1), T.concat([c, t], 1)).sum(), (3, 4)),
        ("matmul", lambda t, c: T.matmul(t, T.moveaxis(c, 0, 1)).sum(), (3, 4)),
        ("einsum2", lambda t, c: T.einsum2("ab,cb->ac", t, c).sum(), (3, 4)),
        ("conv1d_same", lambda t, c: T.mul(T.conv1d_same(t, T.Tensor([0.25, -1.0, 0.5])), c).sum(), (3, 4)),
    ])
    def test_primitive(self, name, fn, shape):
        rng = np.random.default_rng(hash(name) % 2**32)
        x = rng.normal(size=shape) + 0.1  # nudge away from relu/clamp kinks
        const = T.Tensor(rng.normal(size=shape))
        assert T.finite_diff_check(lambda t: fn(t, const), T.Tensor(x)) < 1e-4

    def test_adaptive_avg_pool(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=(1, 2, 5, 7))
        c = T.Tensor(rng.normal(size=(1, 2, 2, 3)))
        fn = lambda t: T.mul(T.adaptive_avg_pool2d(t, (2, 3)), c).sum()
        assert T.finite_diff_check(fn, T.Tensor(x)) < 1e-6


class TestAdaptivePool:
    def test_identity_when_size_matches(self):
        x = T.Tensor(np.random.default_rng(1).normal(size=(1, 1, 3, 4)))
        assert T.adaptive_avg_pool2d(x, (3, 4)) is x

    def test_global_pool_is_mean(self):
        x = np.random.default_rng(2).normal(size=(2, 3, 4, 5))
        y = T.adaptive_avg_pool2d(T.Tensor(x), (1, 1))
        np.testing.assert_allclose(y.data[:, :, 0, 0], x.mean(axis=(2, 3)))

    def test_cell_means(self):
        x = np.arange(8.0).reshape(1, 1, 2, 4)
        y = T.adaptive_avg_pool2d(T.Tensor(x), (1, 2))
        np.testing.assert_allclose(y.data, [[[[(0 + 1 + 4 + 5) / 4, (2 + 3 + 6 + 7) / 4]]]])


class TestFinitePolicy:
    def test_nan_input_rejected(self):
        with pytest.raises(NumericalError):
            T.Tensor([1.0, float("nan")])

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_overflow_in_op_rejected(self):
        with pytest.raises(NumericalError):
            T.exp(T.Tensor([1000.0]))


class TestDumpFormat:
    def test_round_trip(self):
        rng = np.random.default_rng(9)
        arr = rng.normal(size=(3, 4, 5))
        buf = io.BytesIO()
        T.save_tensor(buf, arr)
        buf.seek(0)
        back = T.load_tensor(buf)
        assert back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()

    def test_header_layout(self):
        buf = io.BytesIO()
        T.save_tensor(buf, np.array([1.0, 2.0]))
        raw = buf.getvalue()
        assert raw[:8] == (1).to_bytes(8, "little")
        assert raw[8:16] == (2).to_bytes(8, "little")
        assert len(raw) == 16 + 2 * 8

    def test_truncated_rejected(self):
        with pytest.raises(ValueError):
            T.load_tensor(io.BytesIO(b"\x01"))
