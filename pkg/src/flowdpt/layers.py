"""Parameter containers built on ndgrad tensors."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor


class Module:
    """Anything holding named parameters; walks attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_arrays(self, arrays) -> None:
        for k, p in self.named_parameters():
            if k not in arrays:
                raise KeyError(f"missing parameter {k!r}")
            src = np.asarray(arrays[k])
            if src.shape != p.shape:
                raise nd.ShapeError(f"load {k}", p.shape, src.shape)
            p.data = src.astype(p.dtype, copy=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64, scale: float = 1.0):
        self.weight = nd.parameter(rng.normal(0.0, scale / np.sqrt(n_in), (n_in, n_out)).astype(dtype))
        self.bias = nd.parameter(np.zeros(n_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class MLP(Module):
    """Dense stack with an activation between layers (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, dtype=np.float64,
                 activation: str = "gelu", last_scale: float = 1.0):
        self.layers = [Linear(a, b, rng, dtype, scale=last_scale if i == len(sizes) - 2 else 1.0)
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        act = nd.ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64):
        self.weight = nd.parameter(np.ones(dim, dtype=dtype))
        self.bias = nd.parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return nd.layer_norm(x, self.weight, self.bias)
