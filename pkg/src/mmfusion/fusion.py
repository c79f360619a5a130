"""Gated fusion of per-modality vectors and the classification objective."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .layers import Linear, Module


class LabelError(ValueError):
    pass


class MGFUnit(Module):
    """Per modality m: ``x_m = tanh(f_m(h_m))``, gate
    ``sig(f^sig_m([h_m || others]))``, output ``sum_m x_m * gate_m``.

    ``others`` are the remaining modalities in lexicographic name order.
    """

    def __init__(self, names, d: int, rng: np.random.Generator | None = None, zero: bool = False):
        self.names = sorted(names)
        if not self.names:
            raise ValueError("need at least one modality")
        self.d = d
        M = len(self.names)
        self.value = {m: Linear(d, d, rng, zero) for m in self.names}
        self.gate = {m: Linear(M * d, d, rng, zero) for m in self.names}

    def gate_input(self, m: str, vectors: Mapping[str, Tensor]) -> Tensor:
        order = [m] + [o for o in self.names if o != m]
        return dc.concat([vectors[o] for o in order], axis=-1)

    def parts(self, vectors: Mapping[str, Tensor | None], only=None) -> dict[str, tuple[Tensor, Tensor]]:
        """(x_m, sigma_m) for every present modality (or just ``only``)."""
        present = {m: v for m, v in vectors.items() if v is not None}
        if not present:
            raise ValueError("no modality present")
        unknown = set(present) - set(self.names)
        if unknown:
            raise KeyError(f"unknown modalities {sorted(unknown)}")
        ref = next(iter(present.values())).shape
        for m, v in present.items():
            if v.shape[-1] != self.d or v.shape != ref:
                raise dc.DimensionError(f"modality {m}: expected width {self.d}, got shape {v.shape}")
        # an absent modality reads as zeros in the other gates and contributes nothing
        full = {m: present.get(m, Tensor(np.zeros(ref))) for m in self.names}
        out = {}
        for m in self.names:
            if m not in present or (only is not None and m not in only):
                continue
            x = dc.tanh(self.value[m](full[m]))
            s = dc.sigmoid(self.gate[m](self.gate_input(m, full)))
            out[m] = (x, s)
        return out

    def terms(self, vectors: Mapping[str, Tensor | None], only=None) -> dict[str, Tensor]:
        """Gated contributions ``z_m``."""
        return {m: x * s for m, (x, s) in self.parts(vectors, only).items()}

    def __call__(self, vectors: Mapping[str, Tensor | None]) -> Tensor:
        total = None
        for z in self.terms(vectors).values():
            total = z if total is None else total + z
        return total


def mgf(vectors: Mapping[str, Tensor | None], unit: MGFUnit) -> Tensor:
    return unit(vectors)


class ClassifierHead(Module):
    def __init__(self, d: int, num_classes: int, rng: np.random.Generator | None = None, zero: bool = False):
        self.num_classes = num_classes
        self.linear = Linear(d, num_classes, rng, zero)

    def __call__(self, h: Tensor) -> Tensor:
        return self.linear(h)


def cross_entropy(logits: Tensor, y) -> Tensor:
    """Mean of ``-log softmax(logits)[y]`` over the batch."""
    y = np.atleast_1d(np.asarray(y))
    squeeze = logits.ndim == 1
    if squeeze:
        logits = dc.reshape(logits, (1, -1))
    C = logits.shape[-1]
    if y.shape[0] != logits.shape[0]:
        raise LabelError(f"{y.shape[0]} labels for {logits.shape[0]} rows")
    if not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= C:
        raise LabelError(f"labels must be integers in [0, {C}), got {y.tolist()}")
    picked = dc.log_softmax(logits, axis=-1)[np.arange(len(y)), y]
    return -dc.mean(picked)


def classify_loss(h: Tensor, y, head: ClassifierHead) -> Tensor:
    return cross_entropy(head(h), y)
