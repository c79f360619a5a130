"""Command-line entry point.

Exit codes: 0 success, 2 usage/config error, 3 numeric divergence,
4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import ConfigError, RunConfig, load_config, parse_pairs

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4
GRAD_TOLERANCE = 1e-6

SYNTH_PRESETS = {
    "xor": {"signal_mode": "xor_cross_modal"},
    "unimodal": {"signal_mode": "unimodal"},
}


class UsageError(Exception):
    pass


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _run_config(args, extra: dict | None = None) -> RunConfig:
    over = _overrides(getattr(args, "set", None))
    over.update(extra or {})
    cfg_path = getattr(args, "config", None)
    if cfg_path is not None and not Path(cfg_path).is_file():
        raise UsageError(f"config file not found: {cfg_path}")
    return load_config(cfg_path, over)


# ---------------------------------------------------------------------------


def synth_spec(spec: str, seed: int | None = None) -> data_mod.SynthSpec:
    if spec in SYNTH_PRESETS:
        values = dict(SYNTH_PRESETS[spec])
    elif Path(spec).is_file():
        values = parse_pairs(Path(spec).read_text(), spec)
    else:
        raise UsageError(f"--spec must be one of {sorted(SYNTH_PRESETS)} or a spec file, got {spec!r}")
    types = {f.name: f.type for f in fields(data_mod.SynthSpec)}
    kwargs = {}
    for key, value in values.items():
        if key not in types:
            raise ConfigError(f"unknown synth spec key {key!r}", key)
        kind = {"int": int, "float": float, "str": str}[types[key]]
        try:
            kwargs[key] = kind(value)
        except ValueError:
            raise ConfigError(f"bad value {value!r} for synth spec key {key!r}", key) from None
    if seed is not None:
        kwargs["seed"] = seed
    out = data_mod.SynthSpec(**kwargs)
    try:
        out.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return out


def cmd_synth(args) -> int:
    spec = synth_spec(args.spec, args.seed)
    ds = data_mod.gen_synth(spec)
    try:
        data_mod.write_dataset(ds, args.out)
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {args.out}: {exc}") from None
    print(f"wrote {len(ds)} samples ({', '.join(sorted(ds.modalities))}) to {args.out}")
    return EXIT_OK


def _load_data(path) -> data_mod.Dataset:
    if path is None or not Path(path).is_dir():
        raise UsageError(f"data directory not found: {path}")
    try:
        return data_mod.load_dataset(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    from .model import MultimodalClassifier
    from .report import plot_training
    from .training import (DivergenceError, OptimConfig, evaluate, restore_params, save_checkpoint, snapshot,
                           train)

    extra = {}
    if args.epochs is not None:
        extra["train.epochs"] = str(args.epochs)
    if args.seed is not None:
        extra["seed"] = str(args.seed)
    cfg = _run_config(args, extra)
    ds = _load_data(args.data)
    if cfg["train.modalities"]:
        try:
            ds = ds.restrict(cfg["train.modalities"])
        except KeyError as exc:
            raise UsageError(str(exc)) from None
    tr, va, te = data_mod.split(ds, cfg["seed"])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.text())
    model = MultimodalClassifier(ds.modalities, ds.num_classes, cfg)
    model.fit_schema(tr)
    optim = OptimConfig.from_run_config(cfg)
    print(f"config {cfg.hash()[:12]}: lr={optim.lr_peak} weight_decay={optim.weight_decay} "
          f"batch_size={optim.batch_size} epochs={optim.epochs} warmup_fraction={optim.warmup_fraction}")
    print(f"split: train={len(tr)} val={len(va)} test={len(te)}; modalities: {', '.join(model.names)}")

    log_path = out / "train_log.jsonl"
    log_fh = open(log_path, "w")

    def on_epoch(rec):
        log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
        log_fh.flush()
        print(f"epoch {rec['epoch']:3d}  loss {rec['train_loss']:.4f}  "
              f"val_bacc {rec['val_balanced_accuracy']:.4f}  lr {rec['lr_last']:.6f}", flush=True)

    try:
        result = train(model, tr, va, optim, on_epoch)
    except DivergenceError as exc:
        log_fh.close()
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, out / "checkpoint.bin")
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    log_fh.close()

    last = result.history[-1]
    save_checkpoint(snapshot(model, None, last["epoch"], last["val_balanced_accuracy"]), out / "final.bin")
    restore_params(model, result.best)
    test_ba = evaluate(model, te)
    save_checkpoint(result.best, out / "checkpoint.bin")
    summary = {
        "best_epoch": result.best.epoch,
        "val_balanced_accuracy": result.best.val_balanced_accuracy,
        "test_balanced_accuracy": test_ba,
        "optimizer_steps": result.steps,
        "config_hash": cfg.hash(),
        "hyperparameters": {"lr": optim.lr_peak, "weight_decay": optim.weight_decay,
                            "batch_size": optim.batch_size, "epochs": optim.epochs,
                            "warmup_fraction": optim.warmup_fraction, "betas": list(optim.betas),
                            "eps": optim.eps, "seed": optim.seed},
        "modalities": model.names,
        "split_sizes": {"train": len(tr), "val": len(va), "test": len(te)},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if not args.no_plot:
        plot_training(result.history, out / "training_curves.png", result.best.epoch)
    print(f"best epoch {result.best.epoch}: val_bacc {result.best.val_balanced_accuracy:.4f} "
          f"test_bacc {test_ba:.4f}")
    return EXIT_OK


def _model_and_data(args):
    from .training import load_checkpoint, model_from_checkpoint

    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    try:
        ckpt = load_checkpoint(args.checkpoint)
        model = model_from_checkpoint(ckpt)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"unusable checkpoint {args.checkpoint}: {exc}") from None
    ds = _load_data(args.data)
    try:
        ds = ds.restrict(model.names)
    except KeyError as exc:
        raise UsageError(f"dataset lacks checkpoint modalities: {exc}") from None
    return ckpt, model, ds


def cmd_eval(args) -> int:
    from .training import evaluate

    ckpt, model, ds = _model_and_data(args)
    if args.split != "all":
        parts = dict(zip(("train", "val", "test"), data_mod.split(ds, ckpt.seed)))
        ds = parts[args.split]
    print(repr(evaluate(model, ds)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import model_grad_report, toy_problem

    if args.eps <= 0:
        raise UsageError("--eps must be positive")
    cfg = _run_config(args)
    model, prepared, y = toy_problem(cfg, samples=args.samples)
    if args.groups:
        wanted = set(args.groups.split(","))
        groups = model.parameter_groups()
        unknown = wanted - set(groups)
        if unknown:
            raise UsageError(f"unknown parameter groups {sorted(unknown)}; have {sorted(groups)}")
        keep = {id(p) for g in wanted for p in groups[g]}
        for p in model.parameters():
            if id(p) not in keep:
                p.frozen = True
    report = model_grad_report(model, prepared, y, eps=args.eps)
    for name in sorted(report.groups):
        print(f"{name:12s} {report.groups[name]:.3e}")
    print(f"max_relative_error {report.max_error:.3e}  ({report.seconds:.1f} s, eps {args.eps:g})")
    if args.out:
        from .report import plot_gradcheck

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "gradcheck.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "max_relative_error"])
            for name, err in sorted(report.params.items()):
                w.writerow([name, repr(err)])
        plot_gradcheck(report.groups, out / "gradcheck.png", GRAD_TOLERANCE)
    if not np.isfinite(report.max_error) or report.max_error >= GRAD_TOLERANCE:
        return EXIT_VERIFY
    return EXIT_OK


def cmd_inspect_graph(args) -> int:
    from . import diffcore as dc

    _, model, ds = _model_and_data(args)
    if args.modality not in model.branches:
        raise UsageError(f"unknown modality {args.modality!r}; have {model.names}")
    if args.sample in ds.sample_ids:
        i = ds.sample_ids.index(args.sample)
    elif args.sample.isdigit() and int(args.sample) < len(ds):
        i = int(args.sample)
    else:
        raise UsageError(f"no sample {args.sample!r}")
    br = model.branches[args.modality]
    traces: list = []
    with dc.no_grad():
        br.summarize(br.hidden(br.prepare(_take(ds.inputs[args.modality], i))), traces)
    trace = traces[0]
    dump = {"num_nodes": trace["num_nodes"], "edges": trace["edges"], "contracted": trace["contracted"]}
    text = json.dumps(dump)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _take(raw, i):
    return [raw[i]] if isinstance(raw, list) else np.asarray(raw)[i:i + 1]


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmfusion", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multimodal dataset")
    s.add_argument("--spec", default="xor", help="preset (xor, unimodal) or key=value spec file")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="split, train, and checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--no-plot", action="store_true", help="skip training_curves.png")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="balanced accuracy of a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    g.add_argument("--config")
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--samples", type=int, default=2)
    g.add_argument("--groups", help="comma-separated subset of parameter groups")
    g.add_argument("--set", action="append", metavar="KEY=VALUE")
    g.add_argument("--out", help="directory for gradcheck.csv and gradcheck.png")
    g.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect-graph", help="dump one sample's sparsified/coarsened graph as JSON")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--sample", required=True, help="sample id or row index")
    i.add_argument("--modality", required=True)
    i.add_argument("--out")
    i.set_defaults(func=cmd_inspect_graph)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" [{exc.key}]" if exc.key else ""
        print(f"error{key}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
