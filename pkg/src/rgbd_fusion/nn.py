"""Module containers and basic layers built on :mod:`rgbd_fusion.ops`."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Param, Tensor, get_default_dtype


class Module:
    """Parameter container with dotted names (``stages.1.blocks.0.conv1.weight``)."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Param):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, ModuleList):
                for i, m in enumerate(value):
                    yield from m.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, ModuleList):
                for i, m in enumerate(value):
                    yield from m.named_buffers(f"{full}.{i}.")
        for name, arr in self._buffers():
            yield f"{prefix}{name}", arr

    def _buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, ModuleList):
                for m in value:
                    yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, arr in self.named_buffers():
            state[name] = arr.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays by name; returns the names that were loaded."""
        params = dict(self.named_parameters())
        buffers = {name for name, _ in self.named_buffers()}
        mismatches = []
        loaded = []
        for name, arr in state.items():
            if name in params:
                p = params[name]
                if p.data.shape != arr.shape:
                    mismatches.append(f"{name}: expected {p.data.shape}, got {arr.shape}")
                    continue
                p.data = np.array(arr, dtype=p.data.dtype)
                loaded.append(name)
            elif name in buffers:
                self._assign_buffer(name, arr)
                loaded.append(name)
            elif strict:
                mismatches.append(f"{name}: unexpected key")
        if strict:
            missing = (set(params) | buffers) - set(state)
            mismatches.extend(f"{name}: missing" for name in sorted(missing))
        if mismatches:
            raise ValueError("state mismatch:\n  " + "\n  ".join(mismatches))
        return loaded

    def _assign_buffer(self, dotted: str, arr: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if not rest:
            self._set_buffer(head, arr)
            return
        child = getattr(self, head)
        if isinstance(child, ModuleList):
            idx, _, rest = rest.partition(".")
            child = child[int(idx)]
        child._assign_buffer(rest, arr)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class ModuleList(list):
    """A list of modules whose parameters are indexed ``name.i.``."""


def uniform_init(rng: np.random.Generator, shape, fan_in: int, gain: float = 6.0) -> np.ndarray:
    """Fan-in scaled uniform: U(-b, b) with b = sqrt(gain / fan_in)."""
    bound = np.sqrt(gain / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, groups: int = 1, bias: bool = True):
        self.cin, self.cout, self.k = cin, cout, k
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        fan_in = (cin // groups) * k * k
        self.weight = Param(uniform_init(rng, (cout, cin // groups, k, k), fan_in))
        self.bias = Param(np.zeros((1, cout, 1, 1)), weight_decay_exempt=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return (ops.conv_output_size(h, self.k, self.stride, self.padding),
                ops.conv_output_size(w, self.k, self.stride, self.padding))

    def describe(self, h: int, w: int) -> list["ConvDesc"]:
        return [ConvDesc(self.cin, self.cout, self.k, self.stride, self.padding, self.groups, h, w)]


class DepthwiseSeparableConv2d(Module):
    def __init__(self, channels: int, cout: int, k: int, rng: np.random.Generator):
        self.channels, self.cout, self.k = channels, cout, k
        self.depthwise = Param(uniform_init(rng, (channels, 1, k, k), k * k))
        self.pointwise = Param(uniform_init(rng, (cout, channels, 1, 1), channels))

    def forward(self, x: Tensor) -> Tensor:
        return ops.depthwise_separable_conv2d(x, self.depthwise, self.pointwise)

    def describe(self, h: int, w: int) -> list["ConvDesc"]:
        return [ConvDesc(self.channels, self.channels, self.k, 1, self.k // 2, self.channels, h, w),
                ConvDesc(self.channels, self.cout, 1, 1, 0, 1, h, w)]


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        dtype = get_default_dtype()
        self.channels = channels
        self.scale = Param(np.ones((1, channels, 1, 1), dtype=dtype), weight_decay_exempt=True)
        self.shift = Param(np.zeros((1, channels, 1, 1), dtype=dtype), weight_decay_exempt=True)
        self._stats = ops.RunningStats(np.zeros((1, channels, 1, 1), dtype=dtype),
                                       np.ones((1, channels, 1, 1), dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.scale, self.shift, self.training, self._stats)

    def _buffers(self):
        yield "running_mean", self._stats.mean
        yield "running_var", self._stats.var

    def _set_buffer(self, name, value):
        if name == "running_mean":
            self._stats.mean = np.array(value, dtype=self._stats.mean.dtype)
        elif name == "running_var":
            self._stats.var = np.array(value, dtype=self._stats.var.dtype)
        else:
            raise KeyError(name)


class ConvBNReLU(Module):
    """conv -> batch norm -> relu, used for stems and stage transitions."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1):
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))

    def output_hw(self, h, w):
        return self.conv.output_hw(h, w)

    def describe(self, h, w):
        return self.conv.describe(h, w)


@dataclass(frozen=True)
class ConvDesc:
    """Shape-only description of one convolution, enough to count MACs."""

    cin: int
    cout: int
    k: int
    stride: int
    padding: int
    groups: int
    in_h: int
    in_w: int

    @property
    def out_hw(self) -> tuple[int, int]:
        return (ops.conv_output_size(self.in_h, self.k, self.stride, self.padding),
                ops.conv_output_size(self.in_w, self.k, self.stride, self.padding))

    def macs(self) -> int:
        for v in (self.cin, self.cout, self.k, self.stride, self.in_h, self.in_w):
            if v is None or v <= 0:
                raise ValueError(f"unspecified or invalid shape in {self}")
        ho, wo = self.out_hw
        return self.cout * ho * wo * (self.cin // self.groups) * self.k * self.k
