"""Parameter containers and the small feed-forward blocks shared by all stages."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor


class Module:
    """Walks attributes to find parameters, with dotted names."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            yield from _walk(value, f"{prefix}{attr}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        seen = set()
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def freeze(self) -> None:
        for p in self.parameters():
            p.frozen = True


def _walk(value, path: str):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, dict):
        for k in sorted(value):
            yield from _walk(value[k], f"{path}.{k}")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{path}.{i}")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    """``x @ weight + bias`` with weight stored as (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None, zero: bool = False):
        w = np.zeros((n_in, n_out)) if zero or rng is None else glorot(rng, n_in, n_out)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out))
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise dc.DimensionError(f"linear expects width {self.n_in}, got shape {x.shape}")
        if x.ndim != 2:
            lead = x.shape[:-1]
            y = dc.reshape(x, (-1, self.n_in)) @ self.weight + self.bias
            return dc.reshape(y, lead + (self.n_out,))
        return x @ self.weight + self.bias


class FFN(Module):
    """One tanh hidden layer followed by a linear output layer."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator | None = None,
                 zero: bool = False):
        self.hidden = Linear(n_in, n_hidden, rng, zero)
        self.out = Linear(n_hidden, n_out, rng, zero)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(dc.tanh(self.hidden(x)))
