"""Datasets on disk, NTF tensor files, stratified splitting, synthetic tasks.

A dataset directory holds::

    schema.json      class names and per-modality layout
    manifest.jsonl   one sample per line: id, label, per-modality source
    tabular.csv      one row per sample (header = column names)
    <modality>/*.ntf one embedding matrix per sample for sequence modalities
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

NTF_MAGIC = b"MGNT"
NTF_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}

TABULAR, SEQUENCE, HIDDEN = "tabular", "sequence", "hidden"


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class StratificationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# NTF binary tensors


def ntf_bytes(array: np.ndarray, dtype: int = 0) -> bytes:
    array = np.asarray(array)
    if array.ndim < 1:
        raise ValueError("NTF needs rank >= 1")
    if array.ndim > 255:
        raise ValueError("NTF rank must fit in one byte")
    if any(n > 0xFFFFFFFF for n in array.shape):
        raise ValueError(f"dimension too large for u32: {array.shape}")
    header = NTF_MAGIC + struct.pack("<HBB", NTF_VERSION, dtype, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes()


def write_ntf(array, path, dtype: int = 0) -> None:
    data = getattr(array, "data", array)
    Path(path).write_bytes(ntf_bytes(data, dtype))


def parse_ntf(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise FormatError("truncated header", len(buf))
    if buf[:4] != NTF_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    version, dtype, rank = struct.unpack_from("<HBB", buf, 4)
    if version != NTF_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if dtype not in _DTYPES:
        raise FormatError(f"unknown dtype code {dtype}", 6)
    if rank < 1:
        raise FormatError("rank must be >= 1", 7)
    end = 8 + 4 * rank
    if len(buf) < end:
        raise FormatError("truncated dimension list", len(buf))
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(dims, dtype=object))
    need = count * _DTYPES[dtype].itemsize
    if len(buf) - end != need:
        raise FormatError(f"payload has {len(buf) - end} bytes, dims {dims} need {need}", end)
    values = np.frombuffer(buf, dtype=_DTYPES[dtype], count=count, offset=end)
    return values.astype(np.float64).reshape(dims)


def read_ntf(path) -> np.ndarray:
    return parse_ntf(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# dataset description


@dataclass
class Column:
    name: str
    kind: str  # "numeric" | "categorical"
    categories: list[str] = field(default_factory=list)


@dataclass
class ModalityInfo:
    name: str
    kind: str  # tabular | sequence | hidden
    columns: list[Column] = field(default_factory=list)
    length: int = 0
    dim: int = 0

    def to_json(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.kind == TABULAR:
            d["columns"] = [asdict(c) for c in self.columns]
        else:
            d["length"], d["dim"] = self.length, self.dim
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModalityInfo":
        cols = [Column(**c) for c in d.get("columns", [])]
        return cls(d["name"], d["kind"], cols, d.get("length", 0), d.get("dim", 0))


@dataclass
class Dataset:
    """In-memory dataset.

    ``inputs`` maps modality name to raw inputs for every sample: a list of
    string rows for tabular modalities, an ``(n, J, dim)`` float array for
    sequence / hidden modalities.
    """

    modalities: dict[str, ModalityInfo]
    class_names: list[str]
    sample_ids: list[str]
    labels: np.ndarray
    inputs: dict[str, object]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        inputs = {}
        for name, raw in self.inputs.items():
            inputs[name] = [raw[i] for i in idx] if isinstance(raw, list) else raw[idx]
        return Dataset(self.modalities, self.class_names, [self.sample_ids[i] for i in idx],
                       self.labels[idx], inputs)

    def restrict(self, names) -> "Dataset":
        names = list(names)
        missing = [n for n in names if n not in self.modalities]
        if missing:
            raise KeyError(f"unknown modalities {missing}")
        return Dataset({n: self.modalities[n] for n in names}, self.class_names, self.sample_ids,
                       self.labels, {n: self.inputs[n] for n in names})


def _tabular_modality(ds: Dataset) -> ModalityInfo | None:
    tab = [m for m in ds.modalities.values() if m.kind == TABULAR]
    if len(tab) > 1:
        raise ValueError("at most one tabular modality per dataset")
    return tab[0] if tab else None


def write_dataset(ds: Dataset, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    schema = {"classes": ds.class_names,
              "modalities": [ds.modalities[n].to_json() for n in sorted(ds.modalities)]}
    (out / "schema.json").write_text(json.dumps(schema, indent=2, sort_keys=True) + "\n")

    tab = _tabular_modality(ds)
    if tab is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([c.name for c in tab.columns])
        w.writerows(ds.inputs[tab.name])
        (out / "tabular.csv").write_text(buf.getvalue())

    lines = []
    for i, sid in enumerate(ds.sample_ids):
        sources = {}
        for name, info in sorted(ds.modalities.items()):
            if info.kind == TABULAR:
                sources[name] = {"row": i}
            else:
                rel = f"{name}/{sid}.ntf"
                (out / name).mkdir(exist_ok=True)
                write_ntf(ds.inputs[name][i], out / rel)
                sources[name] = {"path": rel}
        lines.append(json.dumps({"sample_id": sid, "label": int(ds.labels[i]), "sources": sources},
                                sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return out


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "schema.json").is_file() or not (root / "manifest.jsonl").is_file():
        raise FileNotFoundError(f"{root} is not a dataset directory (schema.json/manifest.jsonl missing)")
    schema = json.loads((root / "schema.json").read_text())
    modalities = {d["name"]: ModalityInfo.from_json(d) for d in schema["modalities"]}
    classes = list(schema["classes"])
    records = [json.loads(line) for line in (root / "manifest.jsonl").read_text().splitlines() if line.strip()]

    rows = None
    tab = [m for m in modalities.values() if m.kind == TABULAR]
    if tab:
        with open(root / "tabular.csv", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != [c.name for c in tab[0].columns]:
                raise ValueError(f"tabular.csv header {header} does not match schema")
            rows = [list(r) for r in reader]

    labels = np.array([int(r["label"]) for r in records], dtype=int)
    if len(labels) and (labels.min() < 0 or labels.max() >= len(classes)):
        raise ValueError("manifest label outside class range")
    inputs: dict[str, object] = {}
    for name, info in modalities.items():
        if info.kind == TABULAR:
            inputs[name] = [rows[r["sources"][name]["row"]] for r in records]
        else:
            arrays = [read_ntf(root / r["sources"][name]["path"]) for r in records]
            for a in arrays:
                if a.ndim != 2 or a.shape[1] != info.dim:
                    raise ValueError(f"{name}: expected (J, {info.dim}) matrices, got {a.shape}")
            inputs[name] = np.stack(arrays) if arrays else np.zeros((0, info.length, info.dim))
    return Dataset(modalities, classes, [r["sample_id"] for r in records], labels, inputs)


# ---------------------------------------------------------------------------
# splitting

SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


def split_indices(labels, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stratified 70/15/15 partition.

    Each class gets floor quotas; its leftover samples go to the parts whose
    cumulative quota (over classes so far) lags most, ties resolved train,
    val, test.  No part gets more than one leftover per class.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    fr = np.array(SPLIT_FRACTIONS)
    parts: list[list[int]] = [[], [], []]
    ideal_total = np.zeros(3)
    given_total = np.zeros(3)
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        n = members.size
        if n < 3:
            raise StratificationError(f"class {c} has {n} samples; need at least 3")
        members = members[rng.permutation(n)]
        ideal = n * fr
        counts = np.floor(ideal).astype(int)
        ideal_total += ideal
        deficit = ideal_total - (given_total + counts)
        extra = n - counts.sum()
        # stable sort keeps train, val, test order among equal deficits
        for k in np.argsort(-deficit, kind="stable")[:extra]:
            counts[k] += 1
        given_total += counts
        start = 0
        for k in range(3):
            parts[k].extend(members[start:start + counts[k]].tolist())
            start += counts[k]
    return tuple(np.array(sorted(p), dtype=int) for p in parts)


def split(ds: Dataset, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    tr, va, te = split_indices(ds.labels, seed)
    return ds.subset(tr), ds.subset(va), ds.subset(te)


# ---------------------------------------------------------------------------
# synthetic generators

UNSTRUCTURED_NAMES = ("text", "image", "audio", "video", "signal")
SIGNAL_CHANNEL = 0


@dataclass
class SynthSpec:
    modalities: int = 3
    samples: int = 2000
    classes: int = 2
    signal_mode: str = "xor_cross_modal"
    noise_std: float = 0.1
    seed: int = 0
    length: int = 8
    dim: int = 32

    def validate(self) -> None:
        if self.signal_mode not in ("unimodal", "xor_cross_modal"):
            raise ValueError(f"signal_mode must be unimodal or xor_cross_modal, got {self.signal_mode!r}")
        if not 1 <= self.modalities <= 1 + len(UNSTRUCTURED_NAMES):
            raise ValueError(f"modalities must be in [1, {1 + len(UNSTRUCTURED_NAMES)}]")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.samples < 20 * self.classes:
            raise ValueError(f"samples must be >= 20 * classes = {20 * self.classes}")
        if self.signal_mode == "xor_cross_modal" and (self.classes != 2 or self.modalities < 2):
            raise ValueError("xor_cross_modal needs classes=2 and at least 2 modalities")
        if self.noise_std < 0 or self.length < 1 or self.dim < 1:
            raise ValueError("noise_std must be >= 0, length and dim >= 1")


SYNTH_COLUMNS = [
    Column("signal", "numeric"),
    Column("noise_a", "numeric"),
    Column("noise_b", "numeric"),
    Column("color", "categorical", ["blue", "green", "red"]),
]


def _balanced(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def gen_synth(spec: SynthSpec) -> Dataset:
    """Tabular rows plus embedding sequences with a planted label signal.

    ``unimodal``: label c puts the tabular ``signal`` column in [c, c+1)
    (plus noise); embeddings carry nothing.
    ``xor_cross_modal``: label = bit_t XOR bit_u; bit_t is the sign of the
    ``signal`` column and bit_u the sign of channel 0's mean in the ``text``
    embeddings.  Each modality alone is independent of the label.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.samples
    seq_names = list(UNSTRUCTURED_NAMES[: spec.modalities - 1])

    if spec.signal_mode == "unimodal":
        labels = _balanced(rng, n, spec.classes)
        signal = labels + rng.uniform(0.1, 0.9, n) + spec.noise_std * rng.standard_normal(n)
        text_bit = None
    else:
        combo = _balanced(rng, n, 4)
        tab_bit, text_bit = combo // 2, combo % 2
        labels = tab_bit ^ text_bit
        magnitude = rng.uniform(0.5, 1.5, n)
        signal = (2 * tab_bit - 1) * magnitude + spec.noise_std * rng.standard_normal(n)

    noise_a = rng.standard_normal(n)
    noise_b = rng.standard_normal(n)
    color = rng.integers(0, 3, n)
    rows = [[repr(float(signal[i])), repr(float(noise_a[i])), repr(float(noise_b[i])),
             SYNTH_COLUMNS[3].categories[color[i]]] for i in range(n)]

    modalities = {"tabular": ModalityInfo("tabular", TABULAR, [Column(**asdict(c)) for c in SYNTH_COLUMNS])}
    inputs: dict[str, object] = {"tabular": rows}
    for name in seq_names:
        x = rng.standard_normal((n, spec.length, spec.dim))
        if name == "text" and text_bit is not None:
            x[:, :, SIGNAL_CHANNEL] += (2 * text_bit - 1)[:, None] * 1.5
        modalities[name] = ModalityInfo(name, SEQUENCE, length=spec.length, dim=spec.dim)
        inputs[name] = x

    class_names = [f"class_{c}" for c in range(spec.classes)]
    ids = [f"s{i:05d}" for i in range(n)]
    return Dataset(modalities, class_names, ids, np.asarray(labels, dtype=int), inputs)


def planted_features(ds: Dataset) -> dict[str, np.ndarray]:
    """The raw planted statistics per modality, for oracle classifiers."""
    out = {}
    if "tabular" in ds.inputs:
        out["tabular"] = np.array([float(r[0]) for r in ds.inputs["tabular"]])
    if "text" in ds.inputs:
        out["text"] = np.asarray(ds.inputs["text"])[:, :, SIGNAL_CHANNEL].mean(axis=1)
    return out
