import numpy as np
import numpy.testing as npt
import pytest

from aal.tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    channel_pool,
    conv2d,
    global_avg_pool,
    grad_check,
    linear,
    max_pool2d,
    mul,
    relu,
    sigmoid,
    softmax_cross_entropy,
    sum_all,
)


def naive_conv2d(x, w, b, stride, padding):
    """Quadruple-loop cross-correlation oracle."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, f, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[ni, ci, i * stride + u, j * stride + v] * w[fi, ci, u, v]
                    out[ni, fi, i, j] = acc + b[fi]
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 1, 4, 4)))
        w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        out = conv2d(x, w, b, stride=1, padding=0)
        npt.assert_array_equal(out.data, x.data)

    def test_zero_kernel(self):
        x = Tensor(np.random.default_rng(1).normal(size=(1, 3, 5, 5)))
        w = Tensor(np.zeros((2, 3, 3, 3), dtype=np.float32))
        b = Tensor(np.zeros(2, dtype=np.float32))
        out = conv2d(x, w, b, stride=1, padding=1)
        assert np.all(out.data == 0)

    @pytest.mark.parametrize(
        "shape,fshape,stride,padding",
        [
            ((1, 2, 5, 5), (3, 2, 3, 3), 1, 0),
            ((2, 3, 6, 6), (4, 3, 3, 3), 1, 1),
            ((1, 2, 7, 7), (2, 2, 3, 3), 2, 1),
            ((1, 2, 6, 6), (1, 2, 7, 7), 1, 3),  # direct accumulation path
        ],
    )
    def test_matches_naive_loop(self, shape, fshape, stride, padding):
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=shape), dtype=np.float64)
        w = Tensor(rng.normal(size=fshape), dtype=np.float64)
        b = Tensor(rng.normal(size=fshape[0]), dtype=np.float64)
        out = conv2d(x, w, b, stride=stride, padding=padding)
        expected = naive_conv2d(x.data, w.data, b.data, stride, padding)
        assert np.abs(out.data - expected).max() <= 1e-12

    def test_channel_mismatch_names_dimension(self):
        x = Tensor(np.zeros((1, 3, 5, 5)))
        w = Tensor(np.zeros((2, 4, 3, 3)))
        b = Tensor(np.zeros(2))
        with pytest.raises(ShapeError, match="channels 4"):
            conv2d(x, w, b)

    def test_even_kernel_rejected(self):
        x = Tensor(np.zeros((1, 1, 4, 4)))
        with pytest.raises(ShapeError, match="odd"):
            conv2d(x, Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros(1)))

    def test_nonintegral_output_rejected(self):
        x = Tensor(np.zeros((1, 1, 5, 5)))
        w = Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ShapeError, match="height"):
            conv2d(x, w, Tensor(np.zeros(1)), stride=2, padding=0)

    def test_bias_shape_rejected(self):
        x = Tensor(np.zeros((1, 1, 5, 5)))
        w = Tensor(np.zeros((2, 1, 3, 3)))
        with pytest.raises(ShapeError, match="bias"):
            conv2d(x, w, Tensor(np.zeros(3)))


class TestChannelPool:
    def test_single_channel_copies(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 1, 3, 3)))
        out = channel_pool(x)
        npt.assert_array_equal(out.data[:, 0], x.data[:, 0])
        npt.assert_array_equal(out.data[:, 1], x.data[:, 0])

    def test_mean_and_max(self):
        x = Tensor(np.stack([np.zeros((2, 2)), np.full((2, 2), 2.0)])[None])
        out = channel_pool(x)
        assert out.data[0, 0, 0, 0] == 1.0  # mean of {0, 2}
        assert out.data[0, 1, 0, 0] == 2.0  # max

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 4, 3, 3))
        out = channel_pool(Tensor(x, dtype=np.float64))
        for n in range(2):
            for i in range(3):
                for j in range(3):
                    assert abs(out.data[n, 0, i, j] - x[n, :, i, j].mean()) < 1e-12
                    assert abs(out.data[n, 1, i, j] - x[n, :, i, j].max()) < 1e-12

    def test_max_tie_routes_to_lowest_channel(self):
        x = Tensor(np.ones((1, 3, 1, 1)), requires_grad=True)
        with Tape() as tape:
            out = channel_pool(x)
            loss = sum_all(mul(out, Tensor(np.array([[[[0.0]], [[1.0]]]], dtype=np.float32))))
        tape.backward(loss)
        npt.assert_array_equal(x.grad[0, :, 0, 0], [1.0, 0.0, 0.0])


class TestElementwise:
    def test_uniform_logits_loss_is_ln10(self):
        loss = softmax_cross_entropy(Tensor(np.zeros((4, 10))), np.array([0, 3, 5, 9]))
        assert abs(loss.item() - np.log(10)) < 1e-6

    def test_sigmoid_at_zero(self):
        assert sigmoid(Tensor(np.zeros(3))).data[0] == 0.5

    def test_sigmoid_codomain_strict(self):
        x = Tensor(np.linspace(-30, 30, 101), dtype=np.float64)
        s = sigmoid(x).data
        assert np.all(s > 0.0) and np.all(s < 1.0)

    def test_cross_entropy_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            logits = Tensor(rng.normal(size=(5, 7)) * 3)
            labels = rng.integers(0, 7, size=5)
            assert softmax_cross_entropy(logits, labels).item() >= 0.0

    def test_cross_entropy_gradient_matches_fd(self):
        rng = np.random.default_rng(11)
        labels = rng.integers(0, 6, size=4)
        x = Tensor(rng.normal(size=(4, 6)), dtype=np.float64)
        err = grad_check(lambda t: softmax_cross_entropy(t, labels), x)
        assert err <= 1e-4

    def test_label_out_of_range(self):
        with pytest.raises(ShapeError, match="out of range"):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_mixed_dtype_rejected(self):
        a = Tensor(np.zeros(3), dtype=np.float32)
        b = Tensor(np.zeros(3), dtype=np.float64)
        with pytest.raises(ShapeError, match="mixed dtypes"):
            mul(a, b)


class TestMaxPool:
    def test_values(self):
        x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
        out = max_pool2d(x)
        npt.assert_array_equal(out.data[0, 0], [[5, 7], [13, 15]])

    def test_tie_routes_to_first_window_element(self):
        x = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(max_pool2d(x))
        tape.backward(loss)
        npt.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    def test_odd_size_rejected(self):
        with pytest.raises(ShapeError, match="even"):
            max_pool2d(Tensor(np.zeros((1, 1, 3, 4))))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(x)
        tape.backward(loss)
        npt.assert_array_equal(x.grad, np.ones((3, 4), dtype=np.float32))

    def test_quadratic_gradient(self):
        x = Tensor(np.random.default_rng(1).normal(size=(5,)), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(mul(x, x))
        tape.backward(loss)
        npt.assert_allclose(x.grad, 2 * x.data, rtol=1e-6)

    def test_double_backward_fails(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(x)
        tape.backward(loss)
        with pytest.raises(TapeError, match="consumed"):
            tape.backward(loss)

    def test_loss_not_on_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            pass
        with Tape() as tape2:
            loss = sum_all(x)
        with Tape() as tape3:
            pass
        with pytest.raises(TapeError, match="not an output"):
            tape3.backward(loss)
        tape2.backward(loss)  # the owning tape still works

    def test_nonscalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = mul(x, 2.0)
        with pytest.raises(TapeError, match="scalar"):
            tape.backward(y)

    def test_nested_tapes_rejected(self):
        with Tape():
            with pytest.raises(TapeError, match="nested"):
                with Tape():
                    pass

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(mul(x, x) + x)  # dL/dx = 2x + 1 = 3
        tape.backward(loss)
        npt.assert_allclose(x.grad, np.full(3, 3.0), rtol=1e-6)

    def test_no_tape_means_no_records(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = mul(x, x)
        assert y._tape is None and y.grad is None


class TestGradCheck:
    def test_identity_sum_error_zero(self):
        x = Tensor(np.random.default_rng(0).normal(size=(4,)), dtype=np.float64)
        assert grad_check(lambda t: sum_all(t), x) <= 1e-12

    def test_quadratic_error_tiny(self):
        x = Tensor(np.random.default_rng(1).normal(size=(4,)), dtype=np.float64)
        assert grad_check(lambda t: sum_all(mul(t, t)), x) <= 1e-8

    def test_two_layer_conv_net(self):
        rng = np.random.default_rng(5)
        w1 = Tensor(rng.normal(size=(3, 1, 3, 3)) * 0.7, dtype=np.float64, requires_grad=True)
        b1 = Tensor(rng.normal(size=3) * 0.1, dtype=np.float64, requires_grad=True)
        w2 = Tensor(rng.normal(size=(2, 3, 3, 3)) * 0.7, dtype=np.float64, requires_grad=True)
        b2 = Tensor(rng.normal(size=2) * 0.1, dtype=np.float64, requires_grad=True)
        labels = np.array([1, 0])
        x = Tensor(rng.normal(size=(2, 1, 6, 6)), dtype=np.float64)

        def f(t):
            h = relu(conv2d(t, w1, b1, stride=1, padding=1))
            h = relu(conv2d(h, w2, b2, stride=1, padding=1))
            return softmax_cross_entropy(
                linear(global_avg_pool(h), Tensor(np.eye(2, 2, dtype=np.float64)), Tensor(np.zeros(2, dtype=np.float64))),
                labels,
            )

        assert grad_check(f, x) <= 1e-4

    def test_nonfinite_rejected(self):
        x = Tensor(np.array([1.0, 2.0]), dtype=np.float64)

        def f(t):
            bad = mul(t, float(np.inf))
            return sum_all(bad)

        with pytest.raises(NonFiniteError):
            grad_check(f, x)


class TestProperties:
    def test_gradient_linearity(self):
        rng = np.random.default_rng(9)
        x0 = rng.normal(size=(3, 3))
        a, b = 1.7, -0.45

        def grad_of(fn):
            x = Tensor(x0, dtype=np.float64, requires_grad=True)
            with Tape() as tape:
                loss = fn(x)
            tape.backward(loss)
            return x.grad

        gf = grad_of(lambda x: sum_all(mul(x, x)))
        gg = grad_of(lambda x: sum_all(sigmoid(x)))
        gmix = grad_of(lambda x: sum_all(mul(x, x)) * a + sum_all(sigmoid(x)) * b)
        npt.assert_allclose(gmix, a * gf + b * gg, atol=1e-10)

    def test_bit_identical_repeat_runs(self):
        def pipeline():
            rng = np.random.default_rng(123)
            x = Tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32), requires_grad=True)
            b = Tensor(np.zeros(4, dtype=np.float32), requires_grad=True)
            with Tape() as tape:
                h = relu(conv2d(x, w, b, stride=1, padding=1))
                h = max_pool2d(h)
                loss = softmax_cross_entropy(
                    linear(global_avg_pool(h), Tensor(rng.normal(size=(3, 4)).astype(np.float32)), Tensor(np.zeros(3, dtype=np.float32))),
                    np.array([0, 2]),
                )
            tape.backward(loss)
            return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

        assert pipeline() == pipeline()

    def test_per_op_fd_suite_20_seeds(self):
        # the broader per-op sweep lives in the diagnostics module
        from aal.diagnostics import TOLERANCE, gradient_suite

        results = gradient_suite(seeds=3, include_model=False)
        for name, err in results:
            assert err <= TOLERANCE, f"{name}: {err}"
