"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every differentiable operation is a :class:`Function` with a ``forward`` that
maps numpy arrays to a numpy array and a ``backward`` that maps the output
gradient to one gradient per tensor input. Calling ``Function.apply`` records
the operation on the output tensor so that :func:`backward` can walk the graph.
"""

from contextlib import contextmanager
from logging import getLogger
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import GradientError, NonFiniteError, ShapeError

logger = getLogger(__name__)

_default_dtype = np.dtype(np.float32)
_grad_enabled = True

ArrayLike = Union[np.ndarray, float, int, Sequence]


def get_default_dtype() -> np.dtype:
    """Return the dtype used for new tensors."""
    return _default_dtype


@contextmanager
def float64_mode() -> Iterator[None]:
    """Create tensors in 64-bit precision inside the block (gradient checks)."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _default_dtype = previous


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def check_finite(array: np.ndarray, where: str) -> None:
    """Raise NonFiniteError if the array holds NaN or Inf."""
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"Non-finite values produced by {where}.")


class Tensor(object):
    """N-dimensional array with an optional gradient.

    Attributes:
        data (np.ndarray): The values.
        grad (np.ndarray or None): Gradient populated by :func:`backward`.
        requires_grad (bool): Whether gradients flow to this tensor.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Optional[Union[np.dtype, type]] = None,
    ):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._ctx: Optional["Function"] = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Return the underlying array."""
        return self.data

    def detach(self) -> "Tensor":
        """Return a tensor sharing data but cut from the graph."""
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None) -> "Tensor":
        return tensor_sum(self, axis=axis)

    def mean(self) -> "Tensor":
        return mean(self)

    def abs(self) -> "Tensor":
        return tensor_abs(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.dtype)


class Function(object):
    """A recorded operation of the computation graph."""

    def __init__(self, *parents: Tensor):
        self.parents = parents
        self.saved: Tuple = ()

    def save_for_backward(self, *values) -> None:
        self.saved = values

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        ctx = cls(*inputs)
        out_data = ctx.forward(*[t.data for t in inputs], **kwargs)
        check_finite(out_data, cls.__name__)
        requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires_grad=requires_grad, dtype=out_data.dtype)
        if requires_grad:
            out._ctx = ctx
        return out

    def forward(self, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_output: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    def forward(self, a, b):
        self.save_for_backward(a.shape, b.shape)
        return a + b

    def backward(self, grad_output):
        a_shape, b_shape = self.saved
        return _unbroadcast(grad_output, a_shape), _unbroadcast(grad_output, b_shape)


class Sub(Function):
    def forward(self, a, b):
        self.save_for_backward(a.shape, b.shape)
        return a - b

    def backward(self, grad_output):
        a_shape, b_shape = self.saved
        return _unbroadcast(grad_output, a_shape), -_unbroadcast(grad_output, b_shape)


class Mul(Function):
    def forward(self, a, b):
        self.save_for_backward(a, b)
        return a * b

    def backward(self, grad_output):
        a, b = self.saved
        return (
            _unbroadcast(grad_output * b, a.shape),
            _unbroadcast(grad_output * a, b.shape),
        )


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad_output):
        return (-grad_output,)


class Sum(Function):
    def forward(self, a, axis=None):
        self.save_for_backward(a.shape, axis)
        return np.asarray(a.sum(axis=axis))

    def backward(self, grad_output):
        shape, axis = self.saved
        if axis is None:
            return (np.broadcast_to(grad_output, shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        grad = np.expand_dims(grad_output, axes)
        return (np.broadcast_to(grad, shape).copy(),)


class Mean(Function):
    def forward(self, a):
        self.save_for_backward(a.shape)
        return np.asarray(a.mean())

    def backward(self, grad_output):
        (shape,) = self.saved
        count = int(np.prod(shape))
        return (np.full(shape, grad_output / count, dtype=grad_output.dtype),)


class Abs(Function):
    def forward(self, a):
        self.save_for_backward(a)
        return np.abs(a)

    def backward(self, grad_output):
        (a,) = self.saved
        # np.sign(0) == 0 gives the zero subgradient at the kink
        return (grad_output * np.sign(a),)


class Reshape(Function):
    def forward(self, a, shape=()):
        self.save_for_backward(a.shape)
        return a.reshape(shape)

    def backward(self, grad_output):
        (shape,) = self.saved
        return (grad_output.reshape(shape),)


class Stack(Function):
    def forward(self, *arrays, axis=0):
        self.save_for_backward(axis, len(arrays))
        return np.stack(arrays, axis=axis)

    def backward(self, grad_output):
        axis, count = self.saved
        return tuple(np.take(grad_output, i, axis=axis) for i in range(count))


class ReLU(Function):
    def forward(self, a):
        self.save_for_backward(a)
        return np.maximum(a, 0)

    def backward(self, grad_output):
        (a,) = self.saved
        return (grad_output * (a > 0),)


class PReLU(Function):
    def forward(self, a, slope):
        shape = (1, -1) + (1,) * (a.ndim - 2)
        weight = slope.reshape(shape)
        self.save_for_backward(a, weight, slope.shape)
        return np.maximum(a, 0) + weight * np.minimum(a, 0)

    def backward(self, grad_output):
        a, weight, slope_shape = self.saved
        positive = a > 0
        grad_a = grad_output * np.where(positive, 1, weight).astype(a.dtype)
        axes = (0,) + tuple(range(2, a.ndim))
        grad_slope = (grad_output * np.minimum(a, 0)).sum(axis=axes)
        return grad_a, grad_slope.reshape(slope_shape)


class GlobalAvgPool(Function):
    def forward(self, a):
        self.save_for_backward(a.shape)
        return a.mean(axis=(2, 3))

    def backward(self, grad_output):
        (shape,) = self.saved
        count = shape[2] * shape[3]
        grad = grad_output[:, :, None, None] / count
        return (np.broadcast_to(grad, shape).astype(grad_output.dtype),)


class FullyConnected(Function):
    def forward(self, x, weight, bias=None):
        self.save_for_backward(x, weight, bias is not None)
        out = x @ weight.T
        if bias is not None:
            out = out + bias
        return out

    def backward(self, grad_output):
        x, weight, has_bias = self.saved
        grads = [grad_output @ weight, grad_output.T @ x]
        if has_bias:
            grads.append(grad_output.sum(axis=0))
        return tuple(grads)


class Softmax(Function):
    def forward(self, a, axis=-1):
        shifted = a - a.max(axis=axis, keepdims=True)
        exp = np.exp(shifted)
        out = exp / exp.sum(axis=axis, keepdims=True)
        self.save_for_backward(out, axis)
        return out

    def backward(self, grad_output):
        out, axis = self.saved
        inner = (grad_output * out).sum(axis=axis, keepdims=True)
        return (out * (grad_output - inner),)


def _im2col(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Return (N, C, Ho, Wo, K, K) windows of an already padded NCHW array."""
    windows = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def _col2im(
    cols: np.ndarray, out_shape: Tuple[int, ...], stride: int
) -> np.ndarray:
    """Scatter-add (N, C, H, W, K, K) patches into an NCHW array."""
    out = np.zeros(out_shape, dtype=cols.dtype)
    _, _, height, width, kernel, _ = cols.shape
    for i in range(kernel):
        for j in range(kernel):
            out[
                :, :, i : i + stride * height : stride, j : j + stride * width : stride
            ] += cols[:, :, :, :, i, j]
    return out


class Conv2d(Function):
    """2-D cross-correlation over NCHW input with OIKK weight."""

    def forward(self, x, weight, bias=None, stride=1, padding=0):
        n, c, h, w = x.shape
        out_c, in_c, k, _ = weight.shape
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        windows = _im2col(xp, k, stride)
        out_h, out_w = windows.shape[2], windows.shape[3]
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, -1)
        out = cols @ weight.reshape(out_c, -1).T
        if bias is not None:
            out = out + bias
        out = out.reshape(n, out_h, out_w, out_c).transpose(0, 3, 1, 2)
        self.save_for_backward(
            cols, weight, xp.shape, (out_h, out_w), stride, padding, bias is not None
        )
        return np.ascontiguousarray(out)

    def backward(self, grad_output):
        cols, weight, xp_shape, out_hw, stride, padding, has_bias = self.saved
        out_c, in_c, k, _ = weight.shape
        n = xp_shape[0]
        out_h, out_w = out_hw
        grad_rows = grad_output.transpose(0, 2, 3, 1).reshape(-1, out_c)
        grad_weight = (grad_rows.T @ cols).reshape(weight.shape)
        grad_cols = grad_rows @ weight.reshape(out_c, -1)
        grad_cols = grad_cols.reshape(n, out_h, out_w, in_c, k, k).transpose(
            0, 3, 1, 2, 4, 5
        )
        grad_xp = _col2im(grad_cols, xp_shape, stride)
        h_end = xp_shape[2] - padding
        w_end = xp_shape[3] - padding
        grad_x = grad_xp[:, :, padding:h_end, padding:w_end]
        grads = [np.ascontiguousarray(grad_x), grad_weight]
        if has_bias:
            grads.append(grad_rows.sum(axis=0))
        return tuple(grads)


class ConvTranspose2d(Function):
    """Transposed convolution, the adjoint of :class:`Conv2d`.

    The weight is laid out (Cin, Cout, K, K).
    """

    def forward(self, x, weight, bias=None, stride=1, padding=0, output_padding=0):
        n, in_c, h, w = x.shape
        _, out_c, k, _ = weight.shape
        full_h = (h - 1) * stride + k + output_padding
        full_w = (w - 1) * stride + k + output_padding
        out_h = full_h - 2 * padding
        out_w = full_w - 2 * padding
        rows = x.transpose(0, 2, 3, 1).reshape(-1, in_c)
        cols = (rows @ weight.reshape(in_c, -1)).reshape(n, h, w, out_c, k, k)
        cols = cols.transpose(0, 3, 1, 2, 4, 5)
        full = _col2im(cols, (n, out_c, full_h, full_w), stride)
        out = full[:, :, padding : padding + out_h, padding : padding + out_w]
        if bias is not None:
            out = out + bias.reshape(1, -1, 1, 1)
        self.save_for_backward(
            rows, weight, (n, h, w), (full_h, full_w), stride, padding, bias is not None
        )
        return np.ascontiguousarray(out)

    def backward(self, grad_output):
        rows, weight, (n, h, w), (full_h, full_w), stride, padding, has_bias = (
            self.saved
        )
        in_c, out_c, k, _ = weight.shape
        out_h, out_w = grad_output.shape[2], grad_output.shape[3]
        full = np.zeros((n, out_c, full_h, full_w), dtype=grad_output.dtype)
        full[:, :, padding : padding + out_h, padding : padding + out_w] = grad_output
        windows = _im2col(full, k, stride)[:, :, :h, :w]
        grad_cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, -1)
        grad_rows = grad_cols @ weight.reshape(in_c, -1).T
        grad_x = grad_rows.reshape(n, h, w, in_c).transpose(0, 3, 1, 2)
        grad_weight = (rows.T @ grad_cols).reshape(weight.shape)
        grads = [np.ascontiguousarray(grad_x), grad_weight]
        if has_bias:
            grads.append(grad_output.sum(axis=(0, 2, 3)))
        return tuple(grads)


def add(a: Tensor, b) -> Tensor:
    return Add.apply(a, _as_tensor(b, like=a))


def sub(a: Tensor, b) -> Tensor:
    return Sub.apply(a, _as_tensor(b, like=a))


def mul(a: Tensor, b) -> Tensor:
    return Mul.apply(a, _as_tensor(b, like=a))


def neg(a: Tensor) -> Tensor:
    return Neg.apply(a)


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    return Sum.apply(a, axis=axis)


def mean(a: Tensor) -> Tensor:
    return Mean.apply(a)


def tensor_abs(a: Tensor) -> Tensor:
    return Abs.apply(a)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack same-shape tensors along a new axis."""
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"Cannot stack tensors of shapes {sorted(shapes)}.")
    return Stack.apply(*tensors, axis=axis)


def relu(a: Tensor) -> Tensor:
    return ReLU.apply(a)


def prelu(a: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU ``max(0, x) + a * min(0, x)`` with one slope per channel."""
    if slope.ndim != 1 or a.ndim < 2 or slope.shape[0] != a.shape[1]:
        raise ShapeError(
            f"PReLU slope {slope.shape} does not match channels of {a.shape}."
        )
    return PReLU.apply(a, slope)


def global_avg_pool(a: Tensor) -> Tensor:
    """Average NCHW input over its spatial dimensions to NC."""
    if a.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got {a.shape}.")
    return GlobalAvgPool.apply(a)


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map of NC input with a (K, C) weight to NK."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"Cannot apply weight {weight.shape} to input {x.shape}.")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"Bias {bias.shape} does not match weight {weight.shape}.")
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return FullyConnected.apply(*inputs)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; raises NonFiniteError on non-finite input."""
    check_finite(a.data, "softmax input")
    return Softmax.apply(a, axis=axis)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D convolution of NCHW input.

    Output spatial size is ``floor((H + 2 * padding - K) / stride) + 1``.

    Raises:
        ShapeError: Channel mismatch, invalid stride/padding or empty output.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIKK weight: {x.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"Input has {x.shape[1]} channels but weight expects {weight.shape[1]}."
        )
    if stride < 1 or padding < 0:
        raise ShapeError(f"Invalid stride {stride} or padding {padding}.")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"Bias {bias.shape} does not match weight {weight.shape}.")
    k = weight.shape[2]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeError(f"Kernel {k} is larger than padded input {x.shape}.")
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Conv2d.apply(*inputs, stride=stride, padding=padding)


def conv2d_transpose(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed 2-D convolution of NCHW input with (Cin, Cout, K, K) weight.

    Output spatial size is ``(H - 1) * stride - 2 * padding + K + output_padding``.

    Raises:
        ShapeError: Channel mismatch or invalid stride/padding.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d_transpose expects NCHW input: {x.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"Input has {x.shape[1]} channels but weight expects {weight.shape[0]}."
        )
    if stride < 1 or padding < 0 or not 0 <= output_padding < stride:
        raise ShapeError(
            f"Invalid stride {stride}, padding {padding} or "
            f"output_padding {output_padding}."
        )
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"Bias {bias.shape} does not match weight {weight.shape}.")
    out_h = (x.shape[2] - 1) * stride - 2 * padding + weight.shape[2] + output_padding
    if out_h < 1:
        raise ShapeError(f"Transposed convolution of {x.shape} has empty output.")
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return ConvTranspose2d.apply(
        *inputs, stride=stride, padding=padding, output_padding=output_padding
    )


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    state: Dict[int, int] = {}
    stack_: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        if state.get(key) == 2:
            continue
        if state.get(key) == 1:
            raise GradientError("The computation graph contains a cycle.")
        state[key] = 1
        stack_.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if not parent.requires_grad:
                    continue
                parent_state = state.get(id(parent))
                if parent_state == 1:
                    raise GradientError("The computation graph contains a cycle.")
                if parent_state is None:
                    stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every tensor that ``loss`` depends on.

    Gradients are overwritten, not accumulated, on each call.

    Raises:
        GradientError: The loss is not a scalar or the graph has a cycle.
        NonFiniteError: A gradient holds NaN or Inf.
    """
    if loss.size != 1:
        raise GradientError(f"backward requires a scalar loss, got shape {loss.shape}.")
    if not loss.requires_grad:
        raise GradientError("The loss does not depend on any tensor requiring grad.")

    order = _topological_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        check_finite(grad, f"backward of {type(node._ctx).__name__}")
        node.grad = grad
        if node._ctx is None:
            continue
        parent_grads = node._ctx.backward(grad)
        for parent, parent_grad in zip(node._ctx.parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = parent_grad


def numerical_gradient(
    fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5
) -> List[np.ndarray]:
    """Central finite-difference gradient of a scalar function (64-bit)."""
    values = [np.array(a, dtype=np.float64) for a in arrays]
    results = []
    with float64_mode(), no_grad():
        for index, value in enumerate(values):
            grad = np.zeros_like(value)
            flat = value.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                plus = fn(*[Tensor(v) for v in values]).item()
                flat[i] = original - h
                minus = fn(*[Tensor(v) for v in values]).item()
                flat[i] = original
                grad.reshape(-1)[i] = (plus - minus) / (2 * h)
            results.append(grad)
    return results


def gradient_check(
    fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5
) -> float:
    """Return the worst relative error between analytic and numerical gradients."""
    with float64_mode():
        inputs = [
            Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays
        ]
        backward(fn(*inputs))
        analytic = [t.grad for t in inputs]
    numeric = numerical_gradient(fn, arrays, h=h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.zeros_like(n) if a is None else a
        scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
        worst = max(worst, float(np.linalg.norm(a - n) / scale))
    logger.debug(f"gradient check relative error: {worst:.3e}")
    return worst
