"""Layers with parameters, shape inference and FLOPs counting.

FLOPs convention, per sample:

* convolution: ``2 * K * K * Cin * Cout * Hout * Wout`` plus ``Cout * Hout * Wout``
  for the bias;
* transposed convolution: counted as the convolution producing the same output
  grid, i.e. the same formula on ``Hout * Wout``;
* fully-connected: ``2 * Cin * Cout + Cout``;
* activations, pooling and softmax: one per input element.
"""

from collections import OrderedDict
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .exceptions import ShapeError
from .tensor import Tensor

Shape = Tuple[int, ...]


def kaiming(rng: np.random.Generator, shape: Shape, fan_in: int) -> np.ndarray:
    """Draw fan-in scaled normal weights."""
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(T.get_default_dtype())


class Module(object):
    """Base class for layers and networks.

    Subclasses register parameters in ``self._params`` and child modules in
    ``self._children``; names are joined with dots.
    """

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def flops(self, shape: Shape) -> Tuple[int, Shape]:
        """Return the per-sample FLOPs and the output shape for a CHW input."""
        raise NotImplementedError

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = OrderedDict(self._params)
        for child_name, child in self._children.items():
            for name, param in child.named_parameters().items():
                params[f"{child_name}.{name}"] = param
        return params

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """Copy arrays into the parameters with matching names.

        Raises:
            ShapeError: A parameter is missing or has a different shape.
        """
        for name, param in self.named_parameters().items():
            if name not in arrays:
                raise ShapeError(f"Missing parameter {name}.")
            if arrays[name].shape != param.shape:
                raise ShapeError(
                    f"Parameter {name} has shape {param.shape}, "
                    f"got {arrays[name].shape}."
                )
            param.data = arrays[name].astype(param.dtype).copy()

    def set_requires_grad(self, flag: bool) -> None:
        for param in self.parameters():
            param.requires_grad = flag


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Tensor(kaiming(rng, shape, fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        self._params["weight"] = self.weight
        self._params["bias"] = self.bias

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_shape(self, shape: Shape) -> Shape:
        channels, height, width = shape
        if channels != self.in_channels:
            raise ShapeError(f"Expected {self.in_channels} channels, got {channels}.")
        k, s, p = self.kernel_size, self.stride, self.padding
        return (
            self.out_channels,
            (height + 2 * p - k) // s + 1,
            (width + 2 * p - k) // s + 1,
        )

    def flops(self, shape: Shape) -> Tuple[int, Shape]:
        out = self.output_shape(shape)
        positions = out[1] * out[2]
        k = self.kernel_size
        macs = k * k * self.in_channels * self.out_channels * positions
        return 2 * macs + self.out_channels * positions, out


class ConvTranspose2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        output_padding: int = 0,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        shape = (in_channels, out_channels, kernel_size, kernel_size)
        fan_in = in_channels * kernel_size * kernel_size // (stride * stride)
        self.weight = Tensor(kaiming(rng, shape, max(fan_in, 1)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        self._params["weight"] = self.weight
        self._params["bias"] = self.bias

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d_transpose(
            x, self.weight, self.bias, self.stride, self.padding, self.output_padding
        )

    def output_shape(self, shape: Shape) -> Shape:
        channels, height, width = shape
        if channels != self.in_channels:
            raise ShapeError(f"Expected {self.in_channels} channels, got {channels}.")
        k, s, p, op = self.kernel_size, self.stride, self.padding, self.output_padding
        return (
            self.out_channels,
            (height - 1) * s - 2 * p + k + op,
            (width - 1) * s - 2 * p + k + op,
        )

    def flops(self, shape: Shape) -> Tuple[int, Shape]:
        out = self.output_shape(shape)
        positions = out[1] * out[2]
        k = self.kernel_size
        macs = k * k * self.in_channels * self.out_channels * positions
        return 2 * macs + self.out_channels * positions, out


class PReLU(Module):
    def __init__(self, channels: int, init: float = 0.25):
        super().__init__()
        self.slope = Tensor(np.full(channels, init), requires_grad=True)
        self._params["slope"] = self.slope

    def forward(self, x: Tensor) -> Tensor:
        return T.prelu(x, self.slope)

    def flops(self, shape: Shape) -> Tuple[int, Shape]:
        return int(np.prod(shape)), shape


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x)

    def flops(self, shape: Shape) -> Tuple[int, Shape]:
        return int(np.prod(shape)), shape


class GlobalAvgPool(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.global_avg_pool(x)

    def flops(self, shape: Shape) -> Tuple[int, Shape]:
        return int(np.prod(shape)), (shape[0],)


class Linear(Module):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: Optional[np.random.Generator] = None,
        gain: float = 1.0,
    ):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        shape = (out_features, in_features)
        weight = gain * kaiming(rng, shape, in_features)
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)
        self._params["weight"] = self.weight
        self._params["bias"] = self.bias

    def forward(self, x: Tensor) -> Tensor:
        return T.fully_connected(x, self.weight, self.bias)

    def flops(self, shape: Shape) -> Tuple[int, Shape]:
        if shape != (self.in_features,):
            raise ShapeError(f"Expected ({self.in_features},) input, got {shape}.")
        return 2 * self.in_features * self.out_features + self.out_features, (
            self.out_features,
        )


class Softmax(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.softmax(x, axis=1)

    def flops(self, shape: Shape) -> Tuple[int, Shape]:
        return int(np.prod(shape)), shape


class Sequential(Module):
    """Modules applied in registration order."""

    def __init__(self, *named: Tuple[str, Module]):
        super().__init__()
        for name, module in named:
            self.add_module(name, module)

    def forward(self, x: Tensor) -> Tensor:
        for module in self._children.values():
            x = module(x)
        return x

    def flops(self, shape: Shape) -> Tuple[int, Shape]:
        total = 0
        for module in self._children.values():
            count, shape = module.flops(shape)
            total += count
        return total, shape
