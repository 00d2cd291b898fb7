"""
Parameter containers and the layer building blocks.

A ``Module`` owns named parameters and named child modules, both kept in
registration order. That order is the checkpoint order, so it must not
depend on anything but the architecture configuration.
"""

import math
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from ..core import functional as F
from ..core.rng import RngState
from ..core.tensor import Tensor, parameter
from ..errors import ConfigError, ShapeError

Kernel = Union[int, Sequence[int]]


class Module:
    """Base class for everything that holds parameters."""

    def __init__(self):
        self._parameters: dict[str, Tensor] = {}
        self._modules: dict[str, Optional["Module"]] = {}

    def add_parameter(self, name: str, data: np.ndarray) -> Tensor:
        tensor = parameter(np.asarray(data, dtype=np.float32), name=name)
        self._parameters[name] = tensor
        return tensor

    def add_module(self, name: str, module: Optional["Module"]) -> Optional["Module"]:
        self._modules[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, tensor in self._parameters.items():
            yield prefix + name, tensor
        for name, module in self._modules.items():
            if module is not None:
                yield from module.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        """Ordered copy of every parameter array."""
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """
        Copy arrays into the parameters of matching name.

        Args:
            state: name -> array.
            strict: Require the key sets to match exactly. When False, entries
                the model does not have are skipped; missing entries still fail.

        Returns:
            Names of skipped entries.

        Raises:
            ConfigError: On missing entries, or unexpected ones when strict.
            ShapeError: On a shape mismatch.
        """
        own = dict(self.named_parameters())
        missing = [name for name in own if name not in state]
        unexpected = [name for name in state if name not in own]
        if missing:
            raise ConfigError(f"State is missing {len(missing)} parameters, e.g. {missing[:3]}")
        if unexpected and strict:
            raise ConfigError(f"State has {len(unexpected)} unexpected parameters, e.g. {unexpected[:3]}")
        for name, tensor in own.items():
            array = np.asarray(state[name])
            if array.shape != tensor.shape:
                raise ShapeError(f"Parameter {name}: checkpoint shape {array.shape} != model shape {tensor.shape}")
            tensor.data = array.astype(tensor.dtype).copy()
            tensor.zero_grad()
        return unexpected


def _kaiming(rng: RngState, shape: tuple[int, ...], fan_in: float) -> np.ndarray:
    return rng.normal(shape) * math.sqrt(2.0 / max(fan_in, 1.0))


def _kernel(kernel: Kernel, n: int) -> tuple[int, ...]:
    if isinstance(kernel, int):
        return (kernel,) * n
    kernel = tuple(kernel)
    if len(kernel) != n:
        raise ShapeError(f"Kernel needs {n} extents, got {kernel}")
    return kernel


class ConvNd(Module):
    """Convolution with Kaiming-normal weights and zero bias."""

    spatial_dims = 3

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: RngState,
        kernel: Kernel = 3,
        stride: Kernel = 1,
        padding: Union[Kernel, str] = "same",
    ):
        super().__init__()
        k = _kernel(kernel, self.spatial_dims)
        self.stride = stride
        self.padding = padding
        self.weight = self.add_parameter(
            "weight", _kaiming(rng.derive("weight"), (out_channels, in_channels) + k, in_channels * math.prod(k))
        )
        self.bias = self.add_parameter("bias", np.zeros(out_channels))

    def __call__(self, x: Tensor) -> Tensor:
        op = F.conv3d if self.spatial_dims == 3 else F.conv2d
        return op(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Conv3d(ConvNd):
    spatial_dims = 3


class Conv2d(ConvNd):
    spatial_dims = 2


class ConvTransposeNd(Module):
    """Transposed convolution; weight layout ``[Cin, Cout, *kernel]``."""

    spatial_dims = 3

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: RngState,
        kernel: Kernel = 2,
        stride: Kernel = 2,
        padding: Kernel = 0,
        output_padding: Kernel = 0,
    ):
        super().__init__()
        k = _kernel(kernel, self.spatial_dims)
        s = _kernel(stride, self.spatial_dims)
        self.stride = s
        self.padding = padding
        self.output_padding = output_padding
        fan_in = in_channels * math.prod(k) / math.prod(s)
        self.weight = self.add_parameter(
            "weight", _kaiming(rng.derive("weight"), (in_channels, out_channels) + k, fan_in)
        )
        self.bias = self.add_parameter("bias", np.zeros(out_channels))

    def __call__(self, x: Tensor) -> Tensor:
        op = F.conv_transpose3d if self.spatial_dims == 3 else F.conv_transpose2d
        return op(
            x,
            self.weight,
            self.bias,
            stride=self.stride,
            padding=self.padding,
            output_padding=self.output_padding,
        )


class ConvTranspose3d(ConvTransposeNd):
    spatial_dims = 3


class ConvTranspose2d(ConvTransposeNd):
    spatial_dims = 2


class ConvBlock(Module):
    """Two 3x3(x3) convolutions, each followed by ReLU."""

    def __init__(self, in_channels: int, out_channels: int, rng: RngState, spatial_dims: int = 3):
        super().__init__()
        conv = Conv3d if spatial_dims == 3 else Conv2d
        self.first = self.add_module("conv1", conv(in_channels, out_channels, rng.derive("conv1")))
        self.second = self.add_module("conv2", conv(out_channels, out_channels, rng.derive("conv2")))

    def __call__(self, x: Tensor) -> Tensor:
        return F.relu(self.second(F.relu(self.first(x))))
