"""Per-modality feature extraction and projection to the common width ``d``.

Unstructured inputs go through a frozen transformer stack with learnable
prompts prepended; only the prompt states and the class-token state of the
last layer are kept.  Tabular rows get one small FFN per column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .data import Column, FormatError, parse_ntf
from .diffcore import Parameter, Tensor
from .layers import FFN, Linear, Module


class SchemaError(ValueError):
    pass


# ---------------------------------------------------------------------------
# structured modality


@dataclass
class TabularSchema:
    """Column layout plus normalisation fitted on the training split.

    Categorical columns one-hot over their vocabulary with one extra slot
    (the last) reserved for unknown or missing values.  Missing numeric
    values are imputed with the training mean, i.e. z-score 0.
    """

    columns: list[Column]
    means: dict[str, float] = field(default_factory=dict)
    stds: dict[str, float] = field(default_factory=dict)

    @property
    def widths(self) -> list[int]:
        return [1 if c.kind == "numeric" else len(c.categories) + 1 for c in self.columns]

    def fit(self, rows) -> "TabularSchema":
        for i, col in enumerate(self.columns):
            if col.kind != "numeric":
                continue
            vals = np.array([_parse_float(r[i]) for r in rows])
            vals = vals[~np.isnan(vals)]
            mu = float(vals.mean()) if vals.size else 0.0
            sd = float(vals.std()) if vals.size else 1.0
            self.means[col.name] = mu
            self.stds[col.name] = sd if sd > 0 else 1.0
        return self

    def encode(self, rows) -> list[np.ndarray]:
        """Rows of raw strings -> one ``(B, width_i)`` array per column."""
        n_cols = len(self.columns)
        for r in rows:
            if len(r) != n_cols:
                raise SchemaError(f"row has {len(r)} values, schema has {n_cols} columns")
        out = []
        for i, col in enumerate(self.columns):
            if col.kind == "numeric":
                if col.name not in self.means:
                    raise SchemaError(f"column {col.name!r} has no fitted normalisation")
                vals = np.array([_parse_float(r[i]) for r in rows])
                if np.any(np.isinf(vals)):
                    raise SchemaError(f"non-finite value in column {col.name!r}")
                vals = np.where(np.isnan(vals), self.means[col.name], vals)
                out.append(((vals - self.means[col.name]) / self.stds[col.name])[:, None])
            else:
                lookup = {v: k for k, v in enumerate(col.categories)}
                unknown = len(col.categories)
                onehot = np.zeros((len(rows), unknown + 1))
                for b, r in enumerate(rows):
                    onehot[b, lookup.get(r[i], unknown)] = 1.0
                out.append(onehot)
        return out

    def to_json(self) -> dict:
        return {"columns": [{"name": c.name, "kind": c.kind, "categories": list(c.categories)}
                            for c in self.columns],
                "means": self.means, "stds": self.stds}

    @classmethod
    def from_json(cls, d: dict) -> "TabularSchema":
        return cls([Column(**c) for c in d["columns"]], dict(d["means"]), dict(d["stds"]))


def _parse_float(s) -> float:
    if isinstance(s, (int, float)):
        return float(s)
    s = s.strip()
    if s == "" or s.lower() in ("nan", "na", "null"):
        return math.nan
    return float(s)


class ColumnProjector(Module):
    """One FFN per column mapping its encoded value into ``R^{d_s}``."""

    def __init__(self, schema: TabularSchema, d_s: int, rng: np.random.Generator):
        self.d_s = d_s
        self.ffns = [FFN(w, d_s, d_s, rng) for w in schema.widths]

    def column_states(self, encoded: list[np.ndarray]) -> list[Tensor]:
        if len(encoded) != len(self.ffns):
            raise SchemaError(f"got {len(encoded)} columns, projector has {len(self.ffns)}")
        return [ffn(Tensor(x)) for ffn, x in zip(self.ffns, encoded)]

    def __call__(self, encoded: list[np.ndarray]) -> Tensor:
        return dc.stack(self.column_states(encoded), axis=1)  # (B, N, d_s)


def project_structured(rows, schema: TabularSchema, projector: ColumnProjector) -> Tensor:
    """Rows -> hidden states ``(B, N, d_s)`` in schema column order."""
    return projector(schema.encode(rows))


# ---------------------------------------------------------------------------
# unstructured modality


class SelfAttention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(width, width, rng)
        self.k = Linear(width, width, rng)
        self.v = Linear(width, width, rng)
        self.o = Linear(width, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        B, T, D = x.shape
        h, dh = self.heads, D // self.heads

        def split(t):
            return dc.transpose(dc.reshape(t, (B, T, h, dh)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = dc.scale(q @ dc.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
        ctx = dc.softmax(scores, axis=-1) @ v
        ctx = dc.reshape(dc.transpose(ctx, (0, 2, 1, 3)), (B, T, D))
        return self.o(ctx)


class EncoderLayer(Module):
    """Pre-norm transformer block: self-attention then a GELU FFN, both residual."""

    def __init__(self, width: int, heads: int, ffn_width: int, rng: np.random.Generator):
        self.ln1_gamma, self.ln1_beta = Parameter(np.ones(width)), Parameter(np.zeros(width))
        self.attn = SelfAttention(width, heads, rng)
        self.ln2_gamma, self.ln2_beta = Parameter(np.ones(width)), Parameter(np.zeros(width))
        self.fc1 = Linear(width, ffn_width, rng)
        self.fc2 = Linear(ffn_width, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(dc.layer_norm(x, self.ln1_gamma, self.ln1_beta))
        y = dc.layer_norm(x, self.ln2_gamma, self.ln2_beta)
        return x + self.fc2(dc.gelu(self.fc1(y)))


class PromptedEncoder(Module):
    """Frozen transformer stack fed with ``[prompts, x_cls, x_1..x_J]``.

    Returns the ``L`` prompt states and the class-token state of the last
    layer, shape ``(B, L+1, width)``.  Only ``prompts`` is trainable.
    """

    def __init__(self, width: int, num_prompts: int = 4, num_layers: int = 2, heads: int = 2,
                 ffn_width: int | None = None, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        ffn_width = ffn_width or 2 * width
        self.width = width
        self.num_prompts = num_prompts
        self.layers = [EncoderLayer(width, heads, ffn_width, rng) for _ in range(num_layers)]
        self.cls_embedding = Parameter(rng.normal(0.0, 1.0, width))
        for p in self.parameters():
            p.frozen = True
        self.prompts = Parameter(rng.uniform(-0.1, 0.1, (num_prompts, width)))

    def __call__(self, x) -> Tensor:
        x = dc.as_tensor(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = dc.reshape(x, (1,) + x.shape)
        B, J, D = x.shape
        if D != self.width:
            raise dc.DimensionError(f"encoder width is {self.width}, input has shape {x.shape}")
        if J < 1:
            raise dc.DimensionError("need at least one token or patch embedding")
        L = self.num_prompts
        g = dc.add(dc.reshape(self.prompts, (1, L, D)), np.zeros((B, 1, 1)))
        cls = dc.add(dc.reshape(self.cls_embedding, (1, 1, D)), np.zeros((B, 1, 1)))
        h = dc.concat([g, cls, x], axis=1)
        for layer in self.layers:
            h = layer(h)
        out = h[:, : L + 1, :]
        return out[0] if squeeze else out


def encode_unstructured(x, enc: PromptedEncoder) -> Tensor:
    return enc(x)


# ---------------------------------------------------------------------------
# common space


class CommonProjection(Module):
    """Modality-specific FFN (tanh hidden layer of width d) onto ``R^d``."""

    def __init__(self, n_in: int, d: int, rng: np.random.Generator | None = None, zero: bool = False):
        self.n_in = n_in
        self.ffn = FFN(n_in, d, d, rng, zero)

    def __call__(self, states: Tensor) -> Tensor:
        if states.shape[-1] != self.n_in:
            raise dc.DimensionError(f"projection expects width {self.n_in}, got shape {states.shape}")
        return self.ffn(states)


def to_common_space(states: Tensor, proj: CommonProjection) -> Tensor:
    return proj(states)


def ingest_embeddings(path) -> Tensor:
    """Read a rank-2 NTF file as a constant (frozen) hidden-state matrix."""
    with open(path, "rb") as fh:
        buf = fh.read()
    arr = parse_ntf(buf)
    if arr.ndim != 2:
        raise FormatError(f"hidden states must be rank 2, file has rank {arr.ndim}", 7)
    return Tensor(arr)
