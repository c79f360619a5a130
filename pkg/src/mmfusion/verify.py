"""Finite-difference verification of the assembled model.

Central differences perturb one entry at a time, so each probe only has to
re-run the stages downstream of the perturbed parameter.  Upstream outputs
are computed once and reused; they are constants with respect to that
parameter, so the loss being differenced is unchanged.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .config import RunConfig
from .data import SynthSpec, gen_synth
from .fusion import cross_entropy
from .model import MultimodalClassifier


def toy_problem(cfg: RunConfig | None = None, samples: int = 2):
    """Three-modality model plus ``samples`` inputs (classes alternating)."""
    cfg = cfg or RunConfig()
    ds = gen_synth(SynthSpec(modalities=3, samples=40, seed=cfg["seed"]))
    picks = []
    for i in range(samples):
        picks.append(int(np.flatnonzero(ds.labels == i % 2)[i // 2]))
    small = ds.subset(picks)
    model = MultimodalClassifier(small.modalities, small.num_classes, cfg)
    model.fit_schema(ds)
    return model, model.prepare(small), small.labels


@dataclass
class GradReport:
    groups: dict[str, float] = field(default_factory=dict)
    params: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def max_error(self) -> float:
        return max(self.groups.values(), default=0.0)


def model_grad_report(model: MultimodalClassifier, prepared: dict, y, eps: float = 1e-5,
                      refine_dtype=np.longdouble, include_frozen: bool = False) -> GradReport:
    """Analytic gradients of the mean cross-entropy versus central
    differences, for every trainable entry (frozen ones on request)."""
    t0 = time.perf_counter()
    with dc.no_grad():
        native = {m: br.native(prepared[m]) for m, br in model.branches.items()}
        columns = {m: br.columns.column_states(prepared[m])
                   for m, br in model.branches.items() if br.columns is not None}
        hidden = {m: model.branches[m].projection(native[m]) for m in native}
        vectors = {m: model.branches[m].summarize(hidden[m]) for m in hidden}
        terms = model.fusion.terms(vectors)
        fused = model.fusion(vectors)

    def loss_with(m, vec):
        return cross_entropy(model.logits_from({**vectors, m: vec}), y)

    def closure(name: str):
        parts = name.split(".")
        if parts[0] == "head":
            return lambda: cross_entropy(model.head(fused), y)
        if parts[0] == "fusion":
            m = parts[2]
            rest = [z for o, z in terms.items() if o != m]

            def f():
                total = model.fusion.terms(vectors, only={m})[m]
                for z in rest:
                    total = total + z
                return cross_entropy(model.head(total), y)
            return f
        m, part = parts[1], parts[2]
        br = model.branches[m]
        if part == "mid":
            return lambda: loss_with(m, br.summarize(hidden[m]))
        if part == "projection":
            return lambda: loss_with(m, br.summarize(br.projection(native[m])))
        if part == "columns":
            i = int(parts[4])

            def f():
                cols = list(columns[m])
                cols[i] = br.columns.ffns[i](dc.Tensor(prepared[m][i]))
                return loss_with(m, br.summarize(br.projection(dc.stack(cols, axis=1))))
            return f
        return lambda: loss_with(m, br.summarize(br.hidden(prepared[m])))

    params = model.parameters()
    dc.zero_grad(params)
    dc.backward(model.loss(prepared, y))
    analytic = {p.name: (np.zeros(p.shape) if p.grad is None else p.grad.copy()) for p in params}
    dc.zero_grad(params)

    report = GradReport()
    roles = {id(p): role for role, ps in model.parameter_groups().items() for p in ps}
    for p in params:
        if p.frozen and not include_frozen:
            continue
        err = dc.checked_errors(closure(p.name), p, analytic[p.name], eps, refine_dtype)
        e = float(err.max()) if err.size else 0.0
        report.params[p.name] = e
        role = roles.get(id(p), "frozen")
        report.groups[role] = max(report.groups.get(role, 0.0), e)
    report.seconds = time.perf_counter() - t0
    return report
