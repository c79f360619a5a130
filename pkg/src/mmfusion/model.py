"""The full pipeline: low-level extraction, mid-level compression, gated fusion, head."""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .config import RunConfig
from .data import HIDDEN, SEQUENCE, TABULAR, Dataset, ModalityInfo
from .diffcore import Tensor
from .fusion import ClassifierHead, MGFUnit, cross_entropy
from .layers import Module
from .lowlevel import ColumnProjector, CommonProjection, PromptedEncoder, TabularSchema
from .midlevel import MidLevel


class ModalityBranch(Module):
    """Everything owned by one modality up to its fused-space vector."""

    def __init__(self, info: ModalityInfo, cfg: RunConfig, rng: np.random.Generator):
        self.info = info
        d_s, d = cfg["lowlevel.d_s"], cfg["lowlevel.d"]
        self.schema = None
        self.columns = self.encoder = None
        if info.kind == TABULAR:
            self.schema = TabularSchema(list(info.columns))
            self.columns = ColumnProjector(self.schema, d_s, rng)
            native = d_s
        elif info.kind == SEQUENCE:
            self.encoder = PromptedEncoder(info.dim, cfg["lowlevel.prompts"], cfg["lowlevel.layers"],
                                           cfg["lowlevel.heads"], cfg["lowlevel.ffn_width"], rng)
            native = info.dim
        elif info.kind == HIDDEN:
            native = info.dim
        else:
            raise ValueError(f"unknown modality kind {info.kind!r}")
        self.projection = CommonProjection(native, d, rng)
        self.mid = MidLevel(d, cfg["midlevel.k"], cfg["midlevel.rounds"], cfg["midlevel.heads"], rng)

    def prepare(self, raw) -> object:
        """Raw dataset inputs -> arrays the branch consumes (no parameters)."""
        if self.info.kind == TABULAR:
            return self.schema.encode(raw)
        return np.asarray(raw, dtype=np.float64)

    def native(self, prepared) -> Tensor:
        """Hidden states in the modality's own width, shape (B, I, d_native)."""
        if self.info.kind == TABULAR:
            return self.columns(prepared)
        if self.info.kind == SEQUENCE:
            return self.encoder(Tensor(prepared))
        return Tensor(prepared)

    def hidden(self, prepared) -> Tensor:
        """Common-space hidden states, shape (B, I, d)."""
        return self.projection(self.native(prepared))

    def summarize(self, hidden: Tensor, traces: list | None = None) -> Tensor:
        vecs = []
        for b in range(hidden.shape[0]):
            v, trace = self.mid(hidden[b])
            vecs.append(v)
            if traces is not None:
                traces.append(trace)
        return dc.stack(vecs, axis=0)


class MultimodalClassifier(Module):
    def __init__(self, modalities: dict[str, ModalityInfo], num_classes: int, cfg: RunConfig):
        self.cfg = cfg
        self.num_classes = num_classes
        names = sorted(modalities)
        seeds = np.random.SeedSequence(cfg["seed"]).spawn(len(names) + 1)
        self.branches = {m: ModalityBranch(modalities[m], cfg, np.random.default_rng(s))
                         for m, s in zip(names, seeds)}
        rng = np.random.default_rng(seeds[-1])
        d = cfg["lowlevel.d"]
        self.fusion = MGFUnit(names, d, rng)
        self.head = ClassifierHead(d, num_classes, rng)
        self.assign_names()

    @property
    def names(self) -> list[str]:
        return sorted(self.branches)

    def fit_schema(self, train: Dataset) -> None:
        for m, br in self.branches.items():
            if br.schema is not None:
                br.schema.fit(train.inputs[m])

    def prepare(self, ds: Dataset, idx=None) -> dict:
        out = {}
        for m, br in self.branches.items():
            raw = ds.inputs[m]
            if idx is not None:
                raw = [raw[i] for i in idx] if isinstance(raw, list) else raw[idx]
            out[m] = br.prepare(raw)
        return out

    def vectors(self, prepared: dict) -> dict[str, Tensor]:
        return {m: br.summarize(br.hidden(prepared[m])) for m, br in self.branches.items()}

    def logits_from(self, vectors: dict[str, Tensor]) -> Tensor:
        return self.head(self.fusion(vectors))

    def logits(self, prepared: dict) -> Tensor:
        return self.logits_from(self.vectors(prepared))

    def loss(self, prepared: dict, y) -> Tensor:
        return cross_entropy(self.logits(prepared), y)

    def predict(self, ds: Dataset, batch_size: int = 64) -> np.ndarray:
        preds = []
        with dc.no_grad():
            for start in range(0, len(ds), batch_size):
                idx = np.arange(start, min(start + batch_size, len(ds)))
                preds.append(self.logits(self.prepare(ds, idx)).data.argmax(axis=-1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=int)

    def trainable(self) -> list:
        return [p for p in self.parameters() if not p.frozen]

    def frozen(self) -> list:
        return [p for p in self.parameters() if p.frozen]

    def parameter_groups(self) -> dict[str, list]:
        """Trainable parameters grouped by role."""
        groups: dict[str, list] = {}
        for name, p in self.named_parameters():
            if p.frozen:
                continue
            parts = name.split(".")
            if parts[0] == "branches":
                role = {"encoder": "prompts", "columns": "column_ffns", "projection": "projections"}.get(parts[2])
                if role is None:
                    role = "edgepool" if parts[3] == "pools" else "attention"
            else:
                role = "mgf" if parts[0] == "fusion" else "head"
            groups.setdefault(role, []).append(p)
        return groups

    def schema_state(self) -> dict:
        return {m: br.schema.to_json() for m, br in self.branches.items() if br.schema is not None}

    def load_schema_state(self, state: dict) -> None:
        for m, s in state.items():
            self.branches[m].schema = TabularSchema.from_json(s)
