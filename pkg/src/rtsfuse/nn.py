"""Parameter containers and the small set of layers the models are built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Base class: parameters and sub-modules are discovered from attributes.

    Attribute insertion order fixes parameter naming and ordering, which in
    turn fixes checkpoint layout and optimizer iteration order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            yield from _walk(value, full)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(
                f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}"
            )
        for n, p in own.items():
            arr = np.asarray(state[n])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {n}: {arr.shape} vs {p.shape}")
            p.data[...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name: str):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")


def _param(arr: np.ndarray) -> Parameter:
    return Parameter(arr.astype(T.get_default_dtype()))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False, std: float | None = None) -> None:
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            scale = std if std is not None else math.sqrt(2.0 / (d_in + d_out))
            w = rng.normal(0.0, scale, (d_in, d_out))
        self.weight = _param(w)
        self.bias = _param(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = True,
                 init: str = "he") -> None:
        if init == "zero":
            w = np.zeros((c_out, c_in, k, k))
        elif init == "identity":
            if c_in != c_out:
                raise ValueError("identity init needs c_in == c_out")
            w = np.zeros((c_out, c_in, k, k))
            w[np.arange(c_out), np.arange(c_in), k // 2, k // 2] = 1.0
        else:
            w = rng.normal(0.0, math.sqrt(2.0 / (c_in * k * k)), (c_out, c_in, k, k))
        self.weight = _param(w)
        self.bias = _param(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, d: int) -> None:
        self.gain = _param(np.ones(d))
        self.bias = _param(np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """Two-layer feedforward with GELU."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator, d_out: int | None = None) -> None:
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d if d_out is None else d_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Sequential(Module):
    def __init__(self, *layers) -> None:
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
