"""Parameters and a minimal module container."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .functional import conv2d, group_norm, layer_norm, linear, mlp_forward
from .tensor import Tensor


class Param(Tensor):
    """A learnable leaf tensor. ``value``/``gradient`` alias ``data``/``grad``."""

    __slots__ = ()

    def __init__(self, value, name: str | None = None):
        super().__init__(np.array(value), requires_grad=True, name=name)

    @property
    def value(self) -> np.ndarray:
        return self.data

    @property
    def gradient(self) -> np.ndarray:
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        self.grad = None


class Module:
    """Walks attributes to find parameters, in attribute-definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Param):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Param):
                        yield f"{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Param]:
        seen: set[int] = set()
        out = []
        for _, p in self.named_parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters in state: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype,
                   gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, dtype=np.float32, init: str = "xavier"):
        if init == "zeros":
            w = np.zeros((d_in, d_out), dtype)
        elif init == "kaiming":
            w = kaiming_uniform(rng, d_in, (d_in, d_out), dtype)
        else:
            w = xavier_uniform(rng, d_in, d_out, (d_in, d_out), dtype)
        self.weight = Param(w)
        self.bias = Param(np.zeros(d_out, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class MLP(Module):
    """``len(dims) - 1`` linear layers with ReLU in between."""

    def __init__(self, rng, dims: list[int], dtype=np.float32):
        self.layers = [Linear(rng, a, b, dtype, init="kaiming" if i < len(dims) - 2 else "xavier")
                       for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(x, [(l.weight, l.bias) for l in self.layers])


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32):
        self.gamma = Param(np.ones(d, dtype))
        self.beta = Param(np.zeros(d, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1, padding: int | None = None,
                 dtype=np.float32, bias: bool = True):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Param(kaiming_uniform(rng, cin * k * k, (cout, cin, k, k), dtype))
        self.bias = Param(np.zeros(cout, dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, dtype=np.float32):
        self.groups = groups
        self.gamma = Param(np.ones(channels, dtype))
        self.beta = Param(np.zeros(channels, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return group_norm(x, self.groups, self.gamma, self.beta)
