import numpy as np
import pytest

from classsr.exceptions import GradientError, NonFiniteError, ShapeError
from classsr.tensor import (
    Tensor,
    backward,
    conv2d,
    conv2d_transpose,
    float64_mode,
    fully_connected,
    get_default_dtype,
    global_avg_pool,
    gradient_check,
    no_grad,
    prelu,
    relu,
    softmax,
    stack,
)

TOLERANCE = 1e-5
SEEDS = range(20)


@pytest.fixture
def make_array():
    """Make a random array kept away from the kinks of abs and ReLU."""

    def _make_array(*shape, seed=0):
        r = np.random.default_rng(seed).standard_normal(shape)
        return np.sign(r) * (np.abs(r) + 0.1)

    return _make_array


class TestTensor(object):
    def test_default_dtype(self):
        assert Tensor([1, 2]).dtype == np.float32
        with float64_mode():
            assert get_default_dtype() == np.float64
            assert Tensor([1, 2]).dtype == np.float64
        assert get_default_dtype() == np.float32

    def test_arithmetic(self):
        a = Tensor([1.0, 2.0])
        b = Tensor([3.0, 5.0])

        np.testing.assert_allclose((a + b).data, [4, 7])
        np.testing.assert_allclose((a - b).data, [-2, -3])
        np.testing.assert_allclose((a * b).data, [3, 10])
        np.testing.assert_allclose((-a).data, [-1, -2])
        np.testing.assert_allclose((1 - a).data, [0, -1])
        np.testing.assert_allclose((2 * a).data, [2, 4])

    def test_no_grad(self):
        a = Tensor([1.0], requires_grad=True)
        with no_grad():
            out = a * 2

        assert out.requires_grad is False
        assert (a * 2).requires_grad is True

    def test_detach(self):
        a = Tensor([1.0], requires_grad=True)
        detached = (a * 2).detach()

        assert detached.requires_grad is False
        assert detached._ctx is None


class TestBackward(object):
    def test_shared_input_accumulates(self):
        a = Tensor([3.0], requires_grad=True)
        backward((a * a + a).sum())

        np.testing.assert_allclose(a.grad, [7.0])

    def test_gradients_are_overwritten(self):
        a = Tensor([3.0], requires_grad=True)
        backward((a * 2).sum())
        backward((a * 2).sum())

        np.testing.assert_allclose(a.grad, [2.0])

    def test_broadcast(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((1, 3)), requires_grad=True)
        backward((a * b).sum())

        np.testing.assert_allclose(b.grad, [[2, 2, 2]])

    def test_abs_kink(self):
        a = Tensor([0.0, -2.0, 2.0], requires_grad=True)
        backward(a.abs().sum())

        np.testing.assert_allclose(a.grad, [0, -1, 1])

    def test_non_scalar(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GradientError) as excinfo:
            backward(a * 2)

        assert "scalar" in str(excinfo.value)

    def test_no_requires_grad(self):
        with pytest.raises(GradientError):
            backward(Tensor([1.0]).sum())

    def test_frozen_parameter_has_no_grad(self):
        frozen = Tensor([2.0])
        free = Tensor([3.0], requires_grad=True)
        backward((frozen * free).sum())

        assert frozen.grad is None
        np.testing.assert_allclose(free.grad, [2.0])


class TestShapes(object):
    def test_conv2d_output_size(self):
        x = Tensor(np.zeros((2, 3, 32, 32)))
        w = Tensor(np.zeros((8, 3, 3, 3)))

        assert conv2d(x, w, padding=1).shape == (2, 8, 32, 32)
        assert conv2d(x, w, stride=2, padding=1).shape == (2, 8, 16, 16)
        assert conv2d(x, w).shape == (2, 8, 30, 30)

    def test_conv2d_transpose_output_size(self):
        x = Tensor(np.zeros((1, 12, 32, 32)))
        w = Tensor(np.zeros((12, 3, 9, 9)))
        out = conv2d_transpose(x, w, stride=4, padding=4, output_padding=3)

        assert out.shape == (1, 3, 128, 128)

    def test_conv2d_channel_mismatch(self):
        x = Tensor(np.zeros((1, 3, 8, 8)))
        w = Tensor(np.zeros((4, 2, 3, 3)))
        with pytest.raises(ShapeError) as excinfo:
            conv2d(x, w)

        assert str(excinfo.value) == "Input has 3 channels but weight expects 2."

    def test_conv2d_kernel_too_large(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_stack_mismatch(self):
        with pytest.raises(ShapeError):
            stack([Tensor(np.zeros(2)), Tensor(np.zeros(3))])

    def test_prelu_slope_mismatch(self):
        with pytest.raises(ShapeError):
            prelu(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros(2)))


class TestValues(object):
    def test_conv2d_matches_direct_sum(self, make_array):
        x = make_array(1, 2, 5, 5)
        w = make_array(3, 2, 3, 3, seed=1)
        out = conv2d(Tensor(x), Tensor(w)).data

        expected = np.zeros((1, 3, 3, 3))
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    expected[0, o, i, j] = np.sum(x[0, :, i : i + 3, j : j + 3] * w[o])
        np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-5)

    def test_conv2d_transpose_is_adjoint(self, make_array):
        with float64_mode():
            x = make_array(1, 2, 4, 4)
            y = make_array(1, 3, 8, 8, seed=1)
            w = make_array(2, 3, 3, 3, seed=2)
            forward = conv2d(Tensor(y), Tensor(w), stride=2, padding=1).data
            adjoint = conv2d_transpose(
                Tensor(x), Tensor(w), stride=2, padding=1, output_padding=1
            ).data

        np.testing.assert_allclose(np.sum(forward * x), np.sum(y * adjoint))

    def test_softmax_sums_to_one(self):
        out = softmax(Tensor([[1.0, 2.0, 3.0], [1000.0, 0.0, -1000.0]])).data

        np.testing.assert_allclose(out.sum(axis=1), [1, 1], rtol=1e-6)
        assert np.all(out >= 0)

    def test_softmax_rejects_nan(self):
        with pytest.raises(NonFiniteError):
            softmax(Tensor([[np.nan, 1.0]]))

    def test_global_avg_pool(self):
        x = Tensor(np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2))

        np.testing.assert_allclose(global_avg_pool(x).data, [[1.5, 5.5]])


@pytest.mark.parametrize("seed", SEEDS)
class TestGradientCheck(object):
    def test_add_broadcast(self, make_array, seed):
        c = make_array(2, 3, seed=10 * seed + 2)

        def fn(a, b):
            return ((a + b) * Tensor(c)).sum()

        arrays = [make_array(2, 3, seed=10 * seed), make_array(3, seed=10 * seed + 1)]

        assert gradient_check(fn, arrays) < TOLERANCE

    def test_sub(self, make_array, seed):
        def fn(a, b):
            diff = a - b
            return (diff * diff).sum()

        arrays = [
            make_array(4, 2, seed=10 * seed),
            make_array(4, 2, seed=10 * seed + 1),
        ]

        assert gradient_check(fn, arrays) < TOLERANCE

    def test_mean(self, make_array, seed):
        def fn(a):
            return (a * a).mean()

        assert gradient_check(fn, [make_array(3, 4, seed=10 * seed)]) < TOLERANCE

    def test_abs(self, make_array, seed):
        c = make_array(3, 4, seed=10 * seed + 1)

        def fn(a):
            return (a.abs() * Tensor(c)).sum()

        assert gradient_check(fn, [make_array(3, 4, seed=10 * seed)]) < TOLERANCE

    def test_conv2d(self, make_array, seed):
        def fn(x, w, b):
            out = conv2d(x, w, b, stride=2, padding=1)
            return (out * out).sum()

        arrays = [
            make_array(2, 2, 5, 5, seed=10 * seed),
            make_array(3, 2, 3, 3, seed=10 * seed + 1),
            make_array(3, seed=10 * seed + 2),
        ]

        assert gradient_check(fn, arrays) < TOLERANCE

    @pytest.mark.parametrize(
        "kernel, stride, padding, output_padding", [(3, 2, 1, 1), (9, 4, 4, 3)]
    )
    def test_conv2d_transpose(
        self, make_array, seed, kernel, stride, padding, output_padding
    ):
        def fn(x, w, b):
            out = conv2d_transpose(
                x, w, b, stride=stride, padding=padding, output_padding=output_padding
            )
            return (out * out).sum()

        arrays = [
            make_array(1, 2, 3, 3, seed=10 * seed),
            make_array(2, 3, kernel, kernel, seed=10 * seed + 1),
            make_array(3, seed=10 * seed + 2),
        ]

        assert gradient_check(fn, arrays) < TOLERANCE

    def test_prelu(self, make_array, seed):
        def fn(x, slope):
            return (prelu(x, slope) * prelu(x, slope)).sum()

        arrays = [
            make_array(2, 3, 2, 2, seed=10 * seed),
            make_array(3, seed=10 * seed + 1),
        ]

        assert gradient_check(fn, arrays) < TOLERANCE

    def test_classifier_head(self, make_array, seed):
        weights = np.array([1.0, -2.0, 0.5])

        def fn(x, w, b):
            pooled = global_avg_pool(relu(x))
            probs = softmax(fully_connected(pooled, w, b))
            return (probs * Tensor(weights)).sum()

        arrays = [
            make_array(2, 4, 3, 3, seed=10 * seed),
            make_array(3, 4, seed=10 * seed + 1),
            make_array(3, seed=10 * seed + 2),
        ]

        assert gradient_check(fn, arrays) < TOLERANCE

    def test_stack_and_reshape(self, make_array, seed):
        def fn(a, b):
            stacked = stack([a, b], axis=1).reshape(2, -1)
            return (stacked * stacked).sum(axis=1).mean()

        arrays = [
            make_array(2, 3, seed=10 * seed),
            make_array(2, 3, seed=10 * seed + 1),
        ]

        assert gradient_check(fn, arrays) < TOLERANCE
