"""Parameter containers: a tiny Module tree with Linear and LayerNorm leaves."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .numerics import Rng, Tensor, default_dtype, layernorm, linear


class Module:
    """Walks attributes in assignment order to enumerate parameters.

    Parameters are Tensors created through :meth:`param`; sub-modules and
    lists of sub-modules are recursed into.
    """

    def param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name, dtype=default_dtype())
        setattr(self, name, t)
        return t

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.name is not None:
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, sub in enumerate(val):
                    yield from sub.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def glorot_uniform(rng: Rng, fan_out: int, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (2.0 * rng.uniform((fan_out, fan_in)) - 1.0) * bound


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: Rng):
        self.param("weight", glorot_uniform(rng, fan_out, fan_in))
        self.param("bias", np.zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.param("gamma", np.ones(dim))
        self.param("beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gamma, self.beta, self.eps)
