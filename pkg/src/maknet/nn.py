"""Minimal layer system: parameter registry, train/eval mode, basic layers.

Parameters and submodules register themselves through attribute assignment;
``named_parameters`` walks them in definition order, which fixes the layout
of checkpoints and per-layer parameter reports.
"""

from __future__ import annotations

import numpy as np

from . import tensor as F
from .tensor import Tensor

__all__ = [
    "Parameter",
    "Module",
    "ModuleList",
    "Conv2d",
    "BatchNorm2d",
    "Linear",
    "Dropout",
    "Mish",
]


class Parameter(Tensor):
    """Trainable tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        """Track non-trainable state (saved in checkpoints)."""
        self._buffers[name] = None  # placeholder so order is fixed
        object.__setattr__(self, name, np.asarray(value))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    # registry walks -----------------------------------------------------
    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in self._buffers:
            yield (prefix + name, getattr(self, name))
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        path, _, leaf = name.rpartition(".")
        target = self
        if path:
            for part in path.split("."):
                target = target._modules[part]
        if leaf not in target._buffers:
            raise KeyError(f"unknown buffer {name!r}")
        object.__setattr__(target, leaf, np.asarray(value))

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items = []
        for m in mods:
            self.append(m)

    def append(self, mod: Module):
        self._modules[str(len(self._items))] = mod
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size,
        stride=(1, 1),
        padding=(0, 0),
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ):
        super().__init__()
        kh, kw = F._pair(kernel_size)
        self.stride = F._pair(stride)
        self.padding = F._pair(padding)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kh * kw
        self.weight = Parameter(
            he_normal(rng, (out_channels, in_channels, kh, kw), fan_in, dtype)
        )
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float64))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float64))

    def forward(self, x: Tensor) -> Tensor:
        out, mu, var = F.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            self.training,
            self.eps,
        )
        if self.training:
            m = self.momentum
            self.set_buffer_values(
                (1.0 - m) * self.running_mean + m * mu.astype(np.float64),
                (1.0 - m) * self.running_var + m * var.astype(np.float64),
            )
        return out

    def set_buffer_values(self, mean: np.ndarray, var: np.ndarray) -> None:
        object.__setattr__(self, "running_mean", mean)
        object.__setattr__(self, "running_var", var)


class Linear(Module):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        bias: bool = True,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(
            he_normal(rng, (out_features, in_features), in_features, dtype)
        )
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Dropout(Module):
    """Inverted dropout; active only in training mode with an attached rng."""

    def __init__(self, p: float):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng: np.random.Generator | None = None

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        if self.rng is None:
            raise RuntimeError("Dropout needs an rng; set .rng before training")
        return F.dropout(x, self.p, self.rng, training=True)


class Mish(Module):
    def forward(self, x: Tensor) -> Tensor:
        return F.mish(x)
