"""Parameter containers and the generic layers the network is built from."""

from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

IntPair = Union[int, Tuple[int, int]]


def _pair(value: IntPair) -> Tuple[int, int]:
    return (value, value) if isinstance(value, int) else tuple(value)


class Module:
    """Tree of named parameters and buffers with a train/eval switch."""

    training: bool = True
    buffer_names: Tuple[str, ...] = ()

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            else:
                yield from value.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self.buffer_names:
            yield prefix + name, getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        for _, module in self.named_modules():
            yield module

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copy arrays into existing parameters and buffers (shapes must match)."""
        from .errors import CheckpointError

        targets = {name: p.data for name, p in self.named_parameters()}
        targets.update(self.named_buffers())
        missing = sorted(set(targets) - set(state))
        if missing:
            raise CheckpointError(f"checkpoint lacks tensors: {', '.join(missing[:5])}")
        unexpected = sorted(set(state) - set(targets))
        if unexpected:
            raise CheckpointError(f"checkpoint holds tensors this model does not have: {', '.join(unexpected[:5])}")
        for name, array in targets.items():
            value = np.asarray(state[name])
            if value.shape != array.shape:
                raise CheckpointError(f"tensor '{name}' has shape {value.shape}, expected {array.shape}")
            array[...] = value

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Conv2d(Module):
    """2-d convolution with He-normal initialization."""

    def __init__(self, in_channels: int, out_channels: int, kernel: IntPair = 3,
                 stride: IntPair = 1, dilation: IntPair = 1, padding: IntPair = 0,
                 bias: bool = True, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        kh, kw = _pair(kernel)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel = (kh, kw)
        self.stride = _pair(stride)
        self.dilation = _pair(dilation)
        self.padding = _pair(padding)
        fan_in = in_channels * kh * kw
        self.weight = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_channels, in_channels, kh, kw)).astype(dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None
        self.spiking = False
        self.last_output_shape: Optional[tuple] = None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding)
        self.last_output_shape = out.shape
        return out

    @property
    def synapses(self) -> int:
        """Fan-in per output neuron, k_h * k_w * C_in."""
        return self.kernel[0] * self.kernel[1] * self.in_channels


class BatchNorm2d(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )
