"""Parameters, a small module system, and the three parameterized layers."""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import DEFAULT_DTYPE, Tensor


def xavier_init(shape, seed, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Uniform in ``±sqrt(6 / (fan_in + fan_out))``.

    Conv weights (O, C, kh, kw) use ``fan_in = C*kh*kw`` and
    ``fan_out = O*kh*kw``; matrices (out, in) use their two dims.
    """
    shape = tuple(shape)
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Parameter(Tensor):
    """A trainable leaf tensor with a name and its initialization rule."""

    def __init__(self, data, init: str = "xavier", name: str = ""):
        super().__init__(data, requires_grad=True)
        self.init = init
        self.name = name


def make_param(shape, init: str, seed, dtype=DEFAULT_DTYPE) -> Parameter:
    if init == "xavier":
        data = xavier_init(shape, seed, dtype)
    elif init == "zeros":
        data = np.zeros(shape, dtype)
    elif init == "ones":
        data = np.ones(shape, dtype)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Parameter(data, init)


def derive_seed(seed: int, name: str) -> list[int]:
    """Per-parameter seed: stable across runs and independent of build order."""
    return [int(seed), zlib.crc32(name.encode())]


class Module:
    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + name, val
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ""):
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def init_parameters(self, seed: int, dtype=DEFAULT_DTYPE) -> "Module":
        """Name every parameter by its path and (re)initialize it from ``seed``."""
        for name, p in self.named_parameters():
            p.name = name
            p.data = make_param(p.shape, p.init, derive_seed(seed, name), dtype).data
            p.grad = None
        return self.astype(dtype)

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for name in getattr(m, "_buffers", ()):
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze_stats(self, frozen: bool = True) -> "Module":
        """Keep batch-norm running statistics fixed while still normalizing by batch stats."""
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.update_stats = not frozen
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.astype(p.dtype)
        for m_prefix, m in self._modules_with_prefix():
            for bname in getattr(m, "_buffers", ()):
                arr = np.asarray(state[m_prefix + bname])
                setattr(m, bname, arr.astype(getattr(m, bname).dtype))

    def _modules_with_prefix(self, prefix: str = ""):
        yield prefix, self
        for name, child in self.children():
            yield from child._modules_with_prefix(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    """4x4/stride-2 (exact halving) or 3x3/stride-1 (size preserving) convolution."""

    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1):
        if (kernel, stride) not in ((4, 2), (3, 1)):
            raise ValueError("supported convolutions are 4x4 stride 2 and 3x3 stride 1")
        self.kernel, self.stride = kernel, stride
        self.weight = Parameter(np.zeros((cout, cin, kernel, kernel), DEFAULT_DTYPE), "xavier")
        self.bias = Parameter(np.zeros(cout, DEFAULT_DTYPE), "zeros")

    def padding(self, H: int, W: int):
        if self.stride == 2:
            # ceil(H/2) outputs
            return (1, 1 + H % 2), (1, 1 + W % 2)
        return 1

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding(x.shape[2], x.shape[3]))


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")
    update_stats = True

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, DEFAULT_DTYPE), "ones")
        self.beta = Parameter(np.zeros(channels, DEFAULT_DTYPE), "zeros")
        self.running_mean = np.zeros(channels, DEFAULT_DTYPE)
        self.running_var = np.ones(channels, DEFAULT_DTYPE)

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps,
            self.update_stats,
        )


class Linear(Module):
    def __init__(self, fin: int, fout: int):
        self.weight = Parameter(np.zeros((fout, fin), DEFAULT_DTYPE), "xavier")
        self.bias = Parameter(np.zeros(fout, DEFAULT_DTYPE), "zeros")

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)
