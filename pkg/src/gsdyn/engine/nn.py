"""Small dense layers built from engine operations."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, parameter


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str, zero: bool = False):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            bound = np.sqrt(6.0 / n_in) / np.sqrt(2.0)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.weight = parameter(w, name=f"{name}.weight")
        self.bias = parameter(np.zeros(n_out), name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)

    def parameters(self) -> dict[str, Tensor]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}


class MLP:
    """ReLU hidden layers followed by a linear output layer."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, name: str, zero_last: bool = False):
        self.layers = [
            Linear(a, b, rng, f"{name}.{i}", zero=zero_last and i == len(sizes) - 2)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = T.relu(layer(x))
        return self.layers[-1](x)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for layer in self.layers:
            out.update(layer.parameters())
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters().values())
