"""Small learnable building blocks shared by the encoder and decoder."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .numcore import Rng, Tensor, matmul, tanh


@dataclass
class LinearParams:
    weight: Tensor          # (out, in)
    bias: Optional[Tensor]  # (out,) or None

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


def init_linear(rng: Rng, in_dim: int, out_dim: int, *, bias: bool = True,
                scale: float | None = None) -> LinearParams:
    """Glorot-style normal init unless an explicit weight scale is given."""
    std = scale if scale is not None else math.sqrt(2.0 / (in_dim + out_dim))
    w = Tensor(rng.normals((out_dim, in_dim), std=std), requires_grad=True)
    b = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None
    return LinearParams(w, b)


def linear(x, p: LinearParams):
    out = matmul(x, p.weight.T)
    if p.bias is not None:
        out = out + p.bias
    return out


@dataclass
class MlpParams:
    layers: list  # of LinearParams; tanh between layers, linear output


def init_mlp(rng: Rng, dims: list[int], *, out_scale: float | None = None) -> MlpParams:
    layers = []
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        layers.append(init_linear(rng, dims[i], dims[i + 1],
                                  scale=out_scale if last else None))
    return MlpParams(layers)


def mlp(x, p: MlpParams):
    out = x
    for i, layer in enumerate(p.layers):
        out = linear(out, layer)
        if i < len(p.layers) - 1:
            out = tanh(out)
    return out


def iter_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses/lists/dicts, yielding every Tensor with a dotted name.

    Field order of dataclasses fixes the traversal, so the emitted order is
    deterministic and stable across runs.
    """
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for field in dataclasses.fields(obj):
            value = getattr(obj, field.name)
            name = f"{prefix}.{field.name}" if prefix else field.name
            yield from iter_tensors(value, name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from iter_tensors(item, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for key in obj:
            yield from iter_tensors(obj[key], f"{prefix}.{key}" if prefix else str(key))
