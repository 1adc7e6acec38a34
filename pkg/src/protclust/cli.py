"""Command line front end.

Subcommands: synth, train, eval, trace, sweep, gradcheck. Configuration for
train/sweep merges three layers, later winning: built-in defaults, a JSON
config file (--config), then explicit flags. Unknown config keys are
rejected, and the effective merged config is written next to the outputs.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error
(argparse's own convention for bad flags is also 2).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from .autodiff import grad_check, load_checkpoint, param, save_checkpoint
from .errors import IoError, ParseError, ProtclustError, SchemaError
from .network import ModelConfig, forward, save_trace, trace_svg
from .records import load_dataset, load_record, parse_pdb_ca, save_dataset
from .synthetic import AugmentConfig, SynthConfig, synth_motif_dataset
from .training import (MODE_SETTINGS, SweepGrid, TrainConfig, evaluate, sweep,
                       tiny_gradcheck_builder, train)

log = logging.getLogger(__name__)

# Desk-scale recipe: small enough to train on one core in minutes, with
# early stop before the multiplicative gating can collapse a converged run.
# Reference-scale settings (4 iterations, channels 128..1024) are reachable
# through flags or a config file but are not practical to train here.
RUN_DEFAULTS = {
    # model
    "iterations": 2,
    "blocks": 1,
    "base_radius": 4.0,
    "keep_fraction": 0.4,
    "channels": [16, 16],
    "embed_dim": 16,
    "neighbor_cap": 64,
    "attention": "learned",
    "pooling": "neural-clustering",
    # optimization
    "epochs": 300,
    "lr": 3e-3,
    "lr_decay": 1.0,
    "weight_decay": 5e-4,
    "batch_size": 1,
    "seed": 2,  # converges on the default synth dataset; see README
    "eval_every": 0,
    "stop_train_acc": 0.995,
    "augment": False,
    "noise_std": 0.1,
    "scale_min": 0.9,
    "scale_max": 1.1,
}


def _parse_channels(value):
    if isinstance(value, str):
        return [int(tok) for tok in value.split(",") if tok]
    return [int(v) for v in value]


def merge_run_config(args) -> dict:
    """defaults < --config file < flags; unknown file keys are rejected."""
    merged = dict(RUN_DEFAULTS)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        try:
            with open(cfg_path) as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise IoError(f"cannot read config {cfg_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config {cfg_path}: invalid JSON ({exc})") from exc
        unknown = sorted(set(loaded) - set(RUN_DEFAULTS))
        if unknown:
            raise SchemaError(f"config {cfg_path}: unknown keys {unknown}")
        merged.update(loaded)
    for key in RUN_DEFAULTS:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            merged[key] = flag_val
    merged["channels"] = _parse_channels(merged["channels"])
    return merged


def _model_config(run: dict, task: str, num_classes: int) -> ModelConfig:
    t = int(run["iterations"])
    ch = list(run["channels"])
    if len(ch) != t:  # keep one width per iteration, extending with the last
        ch = (ch[:t] + [ch[-1]] * (t - len(ch)))[:t]
    return ModelConfig(
        num_classes=num_classes, task=task, iterations=t,
        blocks_per_iteration=int(run["blocks"]), base_radius=float(run["base_radius"]),
        keep_fraction=float(run["keep_fraction"]), channels=tuple(ch),
        embed_dim=int(run["embed_dim"]), neighbor_cap=int(run["neighbor_cap"]),
        attention_mode=run["attention"], pooling_mode=run["pooling"],
    ).validate()


def _train_config(run: dict) -> TrainConfig:
    aug = None
    if run["augment"]:
        aug = AugmentConfig(noise_std=float(run["noise_std"]),
                            scale_min=float(run["scale_min"]),
                            scale_max=float(run["scale_max"]))
    stop = run["stop_train_acc"]
    return TrainConfig(
        epochs=int(run["epochs"]), lr=float(run["lr"]),
        lr_decay=float(run["lr_decay"]),
        weight_decay=float(run["weight_decay"]), batch_size=int(run["batch_size"]),
        seed=int(run["seed"]), augment=aug, eval_every=int(run["eval_every"]),
        stop_train_acc=None if stop is None else float(stop),
    ).validate()


def _write_effective(run: dict, path: str, **extra) -> None:
    payload = dict(run)
    payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_model(ckpt_path: str):
    arrays, extra = load_checkpoint(ckpt_path)
    md = extra.get("model")
    if not md:
        raise SchemaError(f"{ckpt_path}: checkpoint lacks a model config")
    cfg = ModelConfig(**{**md, "channels": tuple(md["channels"])}).validate()
    params = {name: param(arr, name) for name, arr in arrays.items()}
    return params, cfg


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    test_frac = 1.0 - args.train_frac - args.val_frac
    cfg = SynthConfig(
        num_proteins=args.proteins,
        chain_len_range=(args.chain_min, args.chain_max),
        num_classes=args.classes, motif_size=args.motif_size, noise=args.noise,
        split_fractions=(args.train_frac, args.val_frac, test_frac),
    )
    data = synth_motif_dataset(cfg, np.random.default_rng(args.seed))
    save_dataset(data, args.out)
    counts = ", ".join(f"{sp}={len(ds.records)}" for sp, ds in sorted(data.items()))
    print(f"wrote {args.out}: {counts} ({args.classes} classes)")
    return 0


def cmd_train(args) -> int:
    run = merge_run_config(args)
    datasets = load_dataset(args.data)
    if "train" not in datasets or not datasets["train"].records:
        raise SchemaError(f"{args.data}: no train split")
    train_ds = datasets["train"]
    mcfg = _model_config(run, train_ds.task, train_ds.num_classes)
    tcfg = _train_config(run)

    params, report = train(train_ds, mcfg, tcfg, val_ds=datasets.get("val"))
    if "test" in datasets and datasets["test"].records:
        report.metrics["test"] = evaluate(datasets["test"], params, mcfg)

    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.bin")
    save_checkpoint(ckpt, params, extra={"model": asdict(mcfg)})
    report.save(os.path.join(args.out, "report.json"))
    _write_effective(run, os.path.join(args.out, "effective_config.json"),
                     data=args.data, out=args.out)

    last = report.train_loss[-1] if report.train_loss else float("nan")
    line = (f"trained {report.epochs_run} epochs, final loss {last:.4f}, "
            f"train acc {report.train_acc[-1]:.3f}" if report.train_acc else
            f"trained {report.epochs_run} epochs")
    test = report.metrics.get("test", {})
    for key in ("accuracy", "fmax"):
        if key in test:
            line += f", test {key} {test[key]:.3f}"
    print(line)
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_eval(args) -> int:
    params, mcfg = _load_model(args.checkpoint)
    ds = load_dataset(args.data, split=args.split)
    if not ds.records:
        raise SchemaError(f"{args.data}: split {args.split!r} is empty")
    metrics = evaluate(ds, params, mcfg)
    text = json.dumps(metrics, indent=1, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return 0


def cmd_trace(args) -> int:
    params, mcfg = _load_model(args.checkpoint)
    if args.record.endswith(".pdb"):
        with open(args.record) as fh:
            rec = parse_pdb_ca(fh.read(), chain=args.chain)
    else:
        rec = load_record(args.record)
    _, trace = forward(rec, params, mcfg, rng=np.random.default_rng(0))
    save_trace(trace, args.out)
    print(f"trace for {trace.record_id}: "
          + " -> ".join(str(c) for c in trace.survivor_counts())
          + f" nodes, {args.out}")
    if args.svg:
        for block in trace.iterations:
            path = f"{args.svg}_it{block.iteration}.svg"
            with open(path, "w") as fh:
                fh.write(trace_svg(block) + "\n")
        print(f"svg: {args.svg}_it1.svg .. _it{trace.iterations[-1].iteration}.svg")
    return 0


def cmd_sweep(args) -> int:
    run = merge_run_config(args)
    datasets = load_dataset(args.data)
    if "train" not in datasets or not datasets["train"].records:
        raise SchemaError(f"{args.data}: no train split")
    train_ds = datasets["train"]
    mcfg = _model_config(run, train_ds.task, train_ds.num_classes)
    tcfg = _train_config(run)

    def floats(s):
        return [float(t) for t in s.split(",") if t] if s else None

    def ints(s):
        return [int(t) for t in s.split(",") if t] if s else None

    modes = [t for t in args.modes.split(",") if t] if args.modes else None
    if modes:
        bad = sorted(set(modes) - set(MODE_SETTINGS))
        if bad:
            raise SchemaError(f"unknown sweep modes {bad}; pick from {sorted(MODE_SETTINGS)}")
    grid = SweepGrid(radii=floats(args.radii), keep_fractions=floats(args.omega),
                     iterations=ints(args.iters_list), drop_fractions=floats(args.drops),
                     modes=modes, seeds=ints(args.seeds))

    rows = sweep(datasets, mcfg, tcfg, grid, out_csv=args.out)
    _write_effective(run, args.out + ".config.json", data=args.data, out=args.out)
    failed = sum(1 for r in rows if r["status"] != "ok")
    print(f"swept {len(rows)} cells -> {args.out}"
          + (f" ({failed} failed)" if failed else ""))
    return 0


def cmd_gradcheck(args) -> int:
    report = grad_check(lambda s: tiny_gradcheck_builder(s, num_nodes=args.nodes),
                        seed=args.seed, h=args.step)
    print(f"max relative error {report['max_rel']:.3e} "
          f"over {len(report['params'])} parameter groups (tol {args.tol:g})")
    return 0 if report["max_rel"] < args.tol else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protclust",
        description="Iterative neural clustering of protein residue graphs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    conf = argparse.ArgumentParser(add_help=False)
    conf.add_argument("--config", help="JSON config file; flags override it")
    conf.add_argument("--iters", dest="iterations", type=int)
    conf.add_argument("--blocks", type=int)
    conf.add_argument("--base-radius", type=float)
    conf.add_argument("--keep-fraction", type=float)
    conf.add_argument("--channels", help="comma list, one width per iteration")
    conf.add_argument("--embed-dim", type=int)
    conf.add_argument("--neighbor-cap", type=int)
    conf.add_argument("--attention", choices=["learned", "random-baseline"])
    conf.add_argument("--pooling", choices=["neural-clustering", "average-pool-baseline"])
    conf.add_argument("--epochs", type=int)
    conf.add_argument("--lr", type=float)
    conf.add_argument("--lr-decay", type=float, help="per-epoch lr multiplier")
    conf.add_argument("--weight-decay", type=float)
    conf.add_argument("--batch-size", type=int)
    conf.add_argument("--seed", type=int)
    conf.add_argument("--eval-every", type=int)
    conf.add_argument("--stop-train-acc", type=float)
    conf.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    conf.add_argument("--noise-std", type=float)
    conf.add_argument("--scale-min", type=float)
    conf.add_argument("--scale-max", type=float)

    p = sub.add_parser("synth", help="generate a planted-motif dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--proteins", type=int, default=250)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--chain-min", type=int, default=30)
    p.add_argument("--chain-max", type=int, default=40)
    p.add_argument("--motif-size", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--val-frac", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[conf], help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trace", help="dump per-iteration scores for one record")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--record", required=True, help="record JSON or .pdb file")
    p.add_argument("--chain", help="PDB chain id (first chain when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--svg", help="prefix for per-iteration SVG renderings")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("sweep", parents=[conf], help="grid sweep, one train+eval per cell")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--radii", help="comma list of base radii")
    p.add_argument("--omega", help="comma list of keep fractions")
    p.add_argument("--iters-list", help="comma list of iteration counts")
    p.add_argument("--drops", help="comma list of node-deletion fractions")
    p.add_argument("--modes", help=f"comma list from {sorted(MODE_SETTINGS)}")
    p.add_argument("--seeds", help="comma list of training seeds")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nodes", type=int, default=20)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SchemaError, ParseError, IoError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ProtclustError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # anything else is an internal failure, not usage
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
