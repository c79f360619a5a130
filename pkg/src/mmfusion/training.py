"""AdamW with cosine-annealed warmup, the epoch loop, and checkpoint files."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .config import RunConfig
from .data import Dataset, ModalityInfo
from .model import MultimodalClassifier


class DivergenceError(ArithmeticError):
    def __init__(self, message: str, checkpoint: "Checkpoint | None" = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class OptimConfig:
    lr_peak: float = 0.00325
    weight_decay: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 30
    warmup_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lr_peak <= 0:
            raise ValueError("lr_peak must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in [0, 1)")

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> "OptimConfig":
        return cls(cfg["optim.lr"], cfg["optim.weight_decay"], (cfg["optim.beta1"], cfg["optim.beta2"]),
                   cfg["optim.eps"], cfg["train.batch_size"], cfg["train.epochs"],
                   cfg["train.warmup_fraction"], cfg["seed"])


def warmup_steps(total_steps: int, cfg: OptimConfig) -> int:
    return int(math.floor(cfg.warmup_fraction * total_steps))


def lr_at(step: int, total_steps: int, cfg: OptimConfig) -> float:
    """Linear ramp to ``lr_peak`` over the warmup steps, then half-cosine to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, cfg)
    if step < w:
        return cfg.lr_peak * step / w
    if total_steps == w:
        return cfg.lr_peak
    progress = (step - w) / (total_steps - w)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam moments with bias correction; weight decay applied as a separate
    shrink ``p -= lr * wd * p``.  Frozen parameters are skipped."""

    def __init__(self, params, cfg: OptimConfig):
        self.params = list(params)
        self.cfg = cfg
        self.t = 0
        self.m = {p.name: np.zeros(p.shape) for p in self.params if not p.frozen}
        self.v = {p.name: np.zeros(p.shape) for p in self.params if not p.frozen}

    def step(self, lr: float) -> None:
        live = [p for p in self.params if not p.frozen and p.grad is not None]
        for p in live:
            if not np.all(np.isfinite(p.grad)):
                raise dc.NumericError(f"non-finite gradient in {p.name}")
        self.t += 1
        b1, b2 = self.cfg.betas
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for p in live:
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            if self.cfg.weight_decay:
                p.data -= lr * self.cfg.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.cfg.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([float(self.t)])}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["step"][0])
        for name in self.m:
            self.m[name] = state[f"m.{name}"].copy()
            self.v[name] = state[f"v.{name}"].copy()


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean recall over the classes present in ``y_true``."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        raise dc.ContractError("balanced accuracy of an empty set")
    if y_true.shape != y_pred.shape:
        raise dc.ContractError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    recalls = [np.mean(y_pred[y_true == c] == c) for c in np.unique(y_true)]
    return float(np.mean(recalls))


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"MGCK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    epoch: int
    val_balanced_accuracy: float
    config_hash: str
    seed: int
    meta: dict = field(default_factory=dict)


def _write_records(out: list, records: dict[str, np.ndarray]) -> None:
    out.append(struct.pack("<I", len(records)))
    for name, arr in records.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        out.append(struct.pack("<I", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())


def _read_records(buf: bytes, pos: int) -> tuple[dict[str, np.ndarray], int]:
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + ln].decode("utf-8")
        pos += ln
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(dims, dtype=np.int64))
        if pos + 8 * count > len(buf):
            raise ValueError(f"checkpoint truncated inside record {name!r} at byte {pos}")
        out[name] = np.frombuffer(buf, "<f8", count, pos).astype(np.float64).reshape(dims)
        pos += 8 * count
    return out, pos


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Header (magic, version, sha256 config hash, seed), a JSON metadata
    block, then parameter records and optimizer records."""
    meta = dict(ckpt.meta, epoch=ckpt.epoch, val_balanced_accuracy=ckpt.val_balanced_accuracy)
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), bytes.fromhex(ckpt.config_hash),
           struct.pack("<q", ckpt.seed), struct.pack("<I", len(meta_raw)), meta_raw]
    _write_records(out, ckpt.params)
    _write_records(out, ckpt.optimizer)
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    config_hash = buf[6:38].hex()
    (seed,) = struct.unpack_from("<q", buf, 38)
    (mlen,) = struct.unpack_from("<I", buf, 46)
    meta = json.loads(buf[50:50 + mlen].decode("utf-8"))
    params, pos = _read_records(buf, 50 + mlen)
    optimizer, pos = _read_records(buf, pos)
    epoch = meta.pop("epoch")
    val = meta.pop("val_balanced_accuracy")
    return Checkpoint(params, optimizer, epoch, val, config_hash, seed, meta)


def snapshot(model: MultimodalClassifier, opt: AdamW | None, epoch: int, val_ba: float) -> Checkpoint:
    cfg = model.cfg
    meta = {
        "config": cfg.text(),
        "num_classes": model.num_classes,
        "modalities": [br.info.to_json() for _, br in sorted(model.branches.items())],
        "schema": model.schema_state(),
    }
    return Checkpoint({name: p.data.copy() for name, p in model.named_parameters()},
                      {k: v.copy() for k, v in opt.state().items()} if opt else {},
                      epoch, val_ba, cfg.hash(), cfg["seed"], meta)


def model_from_checkpoint(ckpt: Checkpoint) -> MultimodalClassifier:
    from .config import parse_pairs

    cfg = RunConfig(parse_pairs(ckpt.meta["config"]))
    if cfg.hash() != ckpt.config_hash:
        raise ValueError("checkpoint config hash does not match its stored config")
    modalities = {d["name"]: ModalityInfo.from_json(d) for d in ckpt.meta["modalities"]}
    model = MultimodalClassifier(modalities, ckpt.meta["num_classes"], cfg)
    model.load_schema_state(ckpt.meta["schema"])
    named = dict(model.named_parameters())
    if set(named) != set(ckpt.params):
        raise ValueError("checkpoint parameters do not match the model layout")
    for name, p in named.items():
        if ckpt.params[name].shape != p.shape:
            raise ValueError(f"{name}: checkpoint shape {ckpt.params[name].shape} != {p.shape}")
        p.data = ckpt.params[name].copy()
    return model


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    best: Checkpoint
    history: list[dict]
    steps: int
    lrs: list[float]


def evaluate(model: MultimodalClassifier, ds: Dataset) -> float:
    return balanced_accuracy(ds.labels, model.predict(ds))


def train(model: MultimodalClassifier, train_ds: Dataset, val_ds: Dataset, cfg: OptimConfig,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Seeded mini-batch AdamW; returns the checkpoint of the epoch with the
    best validation balanced accuracy (earliest on ties)."""
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("train and validation splits must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = AdamW(params, cfg)
    n = len(train_ds)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = per_epoch * cfg.epochs
    step = 0
    lrs: list[float] = []
    history: list[dict] = []
    best: Checkpoint | None = None
    last_good = snapshot(model, opt, 0, float("nan"))

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            dc.zero_grad(params)
            step += 1
            lr = lr_at(step, total, cfg)
            try:
                # overflow is detected explicitly below, so numpy's warnings are noise here
                with np.errstate(over="ignore", invalid="ignore"):
                    loss = model.loss(model.prepare(train_ds, idx), train_ds.labels[idx])
                    if not np.isfinite(loss.data).all():
                        raise dc.NumericError("non-finite loss")
                    loss.backward()
                opt.step(lr)
            except dc.NumericError as exc:
                raise DivergenceError(f"{exc} at epoch {epoch}, step {step}", best or last_good) from exc
            lrs.append(lr)
            loss_sum += loss.item() * len(idx)
        val_ba = evaluate(model, val_ds)
        record = {"epoch": epoch, "train_loss": loss_sum / n, "val_balanced_accuracy": val_ba, "lr_last": lrs[-1]}
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if best is None or val_ba > best.val_balanced_accuracy:
            best = snapshot(model, opt, epoch, val_ba)
        last_good = snapshot(model, opt, epoch, val_ba) if best.epoch != epoch else best
    dc.zero_grad(params)
    return TrainResult(best, history, step, lrs)


def restore_params(model: MultimodalClassifier, ckpt: Checkpoint) -> None:
    for name, p in model.named_parameters():
        p.data = ckpt.params[name].copy()
