"""Parameter containers: a tiny Module base and a dense layer."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, bias_add, matmul, reshape


class Module:
    """Collects Tensor parameters and sub-modules from instance attributes,
    in definition order, under dotted names."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)


def param(data) -> Parameter:
    return Parameter(data)


class Linear(Module):
    """y = x W + b with W of shape [fan_in, fan_out]; inputs of any rank are
    flattened over leading axes."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = param(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        self.bias = param(rng.uniform(-bound, bound, size=fan_out)) if bias else None
        self.fan_in = fan_in
        self.fan_out = fan_out

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = x if x.ndim == 2 else reshape(x, (int(np.prod(lead)), x.shape[-1]))
        y = matmul(flat, self.weight)
        if self.bias is not None:
            y = bias_add(y, self.bias)
        return y if x.ndim == 2 else reshape(y, lead + (self.fan_out,))
