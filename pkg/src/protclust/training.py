"""Training loop, evaluation metrics, and hyperparameter sweeps.

Everything here is deterministic given the seeds in the configs: shuffling,
augmentation, and the random-attention baseline all consume one generator
chain, so identical inputs reproduce loss curves bit for bit.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .autodiff import Tensor, backward, bce_with_logits, cross_entropy, mul, sgd_step
from .errors import NumericalError, SchemaError
from .network import ModelConfig, ScoreTrace, forward, init_params
from .records import MULTI_LABEL, SINGLE_LABEL, Dataset
from .synthetic import AugmentConfig, SynthConfig, augment, drop_nodes, synth_motif_dataset

log = logging.getLogger(__name__)

FMAX_GRID = np.arange(101) / 100.0

MODE_SETTINGS = {
    "neural-clustering": ("learned", "neural-clustering"),
    "average-pool-baseline": ("learned", "average-pool-baseline"),
    "random-attention-baseline": ("random-baseline", "neural-clustering"),
}


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    lr_decay: float = 1.0         # per-epoch multiplier; epoch e runs at lr*decay^e
    weight_decay: float = 5e-4
    batch_size: int = 8
    seed: int = 0
    augment: Optional[AugmentConfig] = None
    eval_every: int = 0           # 0 disables mid-training validation
    stop_train_acc: Optional[float] = None

    def validate(self) -> "TrainConfig":
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 0:
            raise SchemaError("epochs/batch_size/eval_every out of range")
        if self.lr < 0 or self.weight_decay < 0:
            raise SchemaError("lr and weight_decay must be nonnegative")
        if not 0.0 < self.lr_decay <= 1.0:
            raise SchemaError("lr_decay must be in (0, 1]")
        if self.augment is not None:
            self.augment.validate()
        return self


@dataclass
class MetricReport:
    task: str
    metrics: dict
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)   # (epoch, metric) pairs
    epochs_run: int = 0
    best_epoch: int = 0
    seed: int = 0
    wall_clock_sec: float = 0.0

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "metrics": self.metrics,
            "train_loss": self.train_loss,
            "train_acc": self.train_acc,
            "val_curve": [[int(e), float(v)] for e, v in self.val_curve],
            "epochs_run": self.epochs_run,
            "best_epoch": self.best_epoch,
            "seed": self.seed,
            "wall_clock_sec": self.wall_clock_sec,
        }

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


def _loss_node(logits, label, task):
    if task == SINGLE_LABEL:
        return cross_entropy(logits, [int(label)])
    return bce_with_logits(logits, np.asarray(label, dtype=float)[None, :])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _hit(logits_row: np.ndarray, label, task) -> bool:
    if task == SINGLE_LABEL:
        return int(np.argmax(logits_row)) == int(label)
    return bool(np.all((_sigmoid(logits_row) >= 0.5) == (np.asarray(label) > 0)))


def train(train_ds: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
          val_ds: Optional[Dataset] = None):
    """SGD with per-batch gradient accumulation.

    Returns (params, MetricReport). When a non-empty validation set and
    eval_every are given, the parameters snapshot with the best validation
    metric is what comes back; otherwise the final state does.
    """
    model_cfg.validate()
    train_cfg.validate()
    if not train_ds.records:
        raise SchemaError("train: empty training set")

    rng = np.random.default_rng(train_cfg.seed)
    params = init_params(model_cfg, train_cfg.seed)
    n = len(train_ds.records)
    loss_curve, acc_curve, val_curve = [], [], []
    best = None  # (metric, epoch, state dict)
    epochs_run = 0
    t0 = time.perf_counter()

    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        lr = train_cfg.lr * train_cfg.lr_decay ** epoch
        total = 0.0
        correct = 0
        for start in range(0, n, train_cfg.batch_size):
            batch = order[start:start + train_cfg.batch_size]
            inv = 1.0 / len(batch)
            for i in batch:
                rec = train_ds.records[int(i)]
                if train_cfg.augment is not None:
                    rec = augment(rec, train_cfg.augment, rng)
                logits, _ = forward(rec, params, model_cfg, rng=rng)
                loss = _loss_node(logits, rec.label, model_cfg.task)
                backward(mul(loss, Tensor(inv)))
                total += float(loss.data)
                correct += int(_hit(logits.data[0], rec.label, model_cfg.task))
            sgd_step(params.values(), lr, train_cfg.weight_decay)
        loss_curve.append(total / n)
        acc = correct / n
        acc_curve.append(acc)
        epochs_run = epoch + 1

        if val_ds is not None and val_ds.records and train_cfg.eval_every \
                and (epoch + 1) % train_cfg.eval_every == 0:
            m = evaluate(val_ds, params, model_cfg)
            key = m.get("accuracy", m.get("fmax", 0.0))
            val_curve.append((epoch + 1, key))
            if best is None or key > best[0]:
                best = (key, epoch + 1, {k: p.data.copy() for k, p in params.items()})

        if train_cfg.stop_train_acc is not None and acc >= train_cfg.stop_train_acc:
            break

    best_epoch = epochs_run
    if best is not None:
        best_epoch = best[1]
        for k, p in params.items():
            p.data = best[2][k]

    final_metrics = {}
    report = MetricReport(
        task=model_cfg.task, metrics=final_metrics, train_loss=loss_curve,
        train_acc=acc_curve, val_curve=val_curve, epochs_run=epochs_run,
        best_epoch=best_epoch, seed=train_cfg.seed,
        wall_clock_sec=time.perf_counter() - t0,
    )
    return params, report


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def accuracy(logits: np.ndarray, labels) -> float:
    """Fraction of rows whose argmax hits the label; argmax takes the lowest
    index on ties."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise SchemaError(f"accuracy: logits {logits.shape} vs labels {labels.shape}")
    if logits.shape[0] == 0:
        raise SchemaError("accuracy: empty input")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def fmax(scores: np.ndarray, truth: np.ndarray):
    """Protein-centric F-max over the 101-point threshold grid.

    scores is (N, C) in [0, 1]; a NaN entry means that class is never
    predicted for that protein. truth is (N, C) binary. At each threshold,
    precision averages over proteins with at least one prediction and recall
    over proteins with a nonempty truth set (empty ones are dropped from the
    denominator with a warning). Thresholds where nothing is predicted are
    skipped. Returns (fmax, threshold), the first grid point attaining the
    max; (0.0, 0.0) when no threshold improves on zero.
    """
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth)
    if scores.ndim != 2 or scores.shape != truth.shape:
        raise SchemaError(f"fmax: scores {scores.shape} vs truth {truth.shape}")
    if scores.shape[0] == 0:
        raise SchemaError("fmax: empty input")
    t = truth > 0
    valid = ~np.isnan(scores)
    s = np.where(valid, scores, -1.0)
    has_truth = t.any(axis=1)
    if not has_truth.all():
        log.warning("fmax: %d protein(s) with empty truth set excluded from recall",
                    int((~has_truth).sum()))

    best_f, best_lam = 0.0, 0.0
    for lam in FMAX_GRID:
        pred = valid & (s >= lam)
        npred = pred.sum(axis=1)
        m_rows = npred > 0
        if not m_rows.any():
            continue
        tp = (pred & t).sum(axis=1)
        precision = float(np.mean(tp[m_rows] / npred[m_rows]))
        if has_truth.any():
            recall = float(np.mean(tp[has_truth] / t.sum(axis=1)[has_truth]))
        else:
            recall = 0.0
        f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        if f > best_f:
            best_f, best_lam = f, float(lam)
    return best_f, best_lam


def nomination_recall(trace: ScoreTrace, motif_ids):
    """(raw recall, enrichment over chance) of motif nodes among the final
    survivors. Chance is the survivor fraction N_T / N_0."""
    motif = {int(i) for i in motif_ids}
    if not motif:
        raise SchemaError("nomination_recall: empty motif")
    if not trace.iterations:
        raise SchemaError("nomination_recall: trace has no iterations")
    survivors = {int(i) for i in trace.iterations[-1].selected}
    raw = len(motif & survivors) / len(motif)
    chance = len(survivors) / trace.num_nodes
    return raw, raw / chance


def evaluate(ds: Dataset, params: dict, cfg: ModelConfig, with_nomination: bool = True) -> dict:
    """Task metric plus optional motif-nomination recall and timing."""
    if not ds.records:
        raise SchemaError("evaluate: empty dataset")
    rng = np.random.default_rng(0)
    logits_rows = []
    recalls, enrichments = [], []
    t0 = time.perf_counter()
    for rec in ds.records:
        logits, trace = forward(rec, params, cfg, rng=rng)
        logits_rows.append(logits.data[0].copy())
        motif = rec.meta.get("motif_ids") if with_nomination else None
        if motif:
            raw, enr = nomination_recall(trace, motif)
            recalls.append(raw)
            enrichments.append(enr)
    elapsed = time.perf_counter() - t0
    logits_mat = np.stack(logits_rows)

    out: dict = {}
    if cfg.task == SINGLE_LABEL:
        labels = [int(r.label) for r in ds.records]
        out["accuracy"] = accuracy(logits_mat, labels)
    else:
        truth = np.stack([np.asarray(r.label) for r in ds.records])
        f, lam = fmax(_sigmoid(logits_mat), truth)
        out["fmax"] = f
        out["threshold"] = lam
    if recalls:
        out["nomination_recall"] = float(np.mean(recalls))
        out["nomination_enrichment"] = float(np.mean(enrichments))
    out["seconds_per_protein"] = elapsed / len(ds.records)
    return out


def _kink_margin(loss: Tensor) -> float:
    """Smallest |relu input| anywhere in the graph under loss."""
    seen, stack, m = set(), [loss], np.inf
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.name == "relu":
            z = t._parents[0].data
            if z.size:
                m = min(m, float(np.min(np.abs(z))))
        stack.extend(t._parents)
    return m


def _selection_margin(trace: ScoreTrace) -> float:
    """Smallest gap between the last kept score and the best dropped one."""
    m = np.inf
    for blk in trace.iterations:
        k = len(blk.selected)
        if k < len(blk.scores):
            s = np.sort(blk.scores)[::-1]
            m = min(m, float(s[k - 1] - s[k]))
    return m


def tiny_gradcheck_builder(seed: int = 0, num_nodes: int = 20,
                           margin: float = 2e-4, attempts: int = 256):
    """A small end-to-end model suitable for finite-difference checking.

    Returns (params, loss_fn) for grad_check: a chain of num_nodes residues
    through a 2-iteration, 1-block, 8-channel network with a 4-class loss.

    The loss is piecewise in the parameters: relu has a kink at zero and
    top-k selection jumps when two scores tie. Central differences measure
    nothing at those boundaries, so candidate chains are generated until one
    keeps every relu input and every selection gap at least `margin` away
    from a boundary at the init-point parameters.
    """
    cfg = ModelConfig(num_classes=4, iterations=2, blocks_per_iteration=1,
                      channels=(8, 8), embed_dim=8)
    gen = SynthConfig(num_proteins=1, chain_len_range=(num_nodes, num_nodes),
                      num_classes=4, motif_size=3, split_fractions=(1.0, 0.0, 0.0))
    params = init_params(cfg, seed)

    for attempt in range(attempts):
        rec = synth_motif_dataset(
            gen, np.random.default_rng([seed, attempt]))["train"].records[0]
        logits, trace = forward(rec, params, cfg)
        loss = _loss_node(logits, rec.label, cfg.task)
        if min(_kink_margin(loss), _selection_margin(trace)) <= margin:
            continue

        def loss_fn(rec=rec):
            logits, _ = forward(rec, params, cfg)
            return _loss_node(logits, rec.label, cfg.task)

        log.info("gradcheck instance found on attempt %d", attempt)
        return params, loss_fn

    raise NumericalError(
        f"no {num_nodes}-node instance kept clear of relu/selection "
        f"boundaries after {attempts} attempts")


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepGrid:
    """Axes to vary; None keeps the base value. Cells are the product."""

    radii: Optional[list] = None
    keep_fractions: Optional[list] = None
    iterations: Optional[list] = None
    drop_fractions: Optional[list] = None
    modes: Optional[list] = None
    seeds: Optional[list] = None

    def cells(self):
        axes = [self.radii or [None], self.keep_fractions or [None],
                self.iterations or [None], self.drop_fractions or [None],
                self.modes or [None], self.seeds or [None]]
        return list(itertools.product(*axes))


SWEEP_FIELDS = ["radius", "keep_fraction", "iterations", "drop_fraction", "mode", "seed",
                "status", "train_loss", "train_accuracy", "test_metric", "survivors",
                "nomination_recall", "nomination_enrichment", "error"]


def _apply_drop(ds: Dataset, u: float, rng) -> Dataset:
    recs = [drop_nodes(rec, u, rng) for rec in ds.records]
    return Dataset(records=recs, task=ds.task, num_classes=ds.num_classes, split=ds.split)


def sweep(datasets: dict, model_cfg: ModelConfig, train_cfg: TrainConfig,
          grid: SweepGrid, out_csv: Optional[str] = None) -> list:
    """One full train + eval per grid cell; failed cells are recorded, not fatal.

    Returns the table as a list of row dicts (and writes CSV when asked).
    Wall-clock numbers are deliberately left out so identical runs produce
    identical bytes.
    """
    train_base = datasets.get("train")
    if train_base is None or not train_base.records:
        raise SchemaError("sweep: no training split")
    test_base = datasets.get("test")
    eval_base = test_base if (test_base is not None and test_base.records) else train_base

    rows = []
    for radius, keep, iters, u, mode, seed in grid.cells():
        mcfg = model_cfg
        tcfg = train_cfg
        if radius is not None:
            mcfg = replace(mcfg, base_radius=float(radius))
        if keep is not None:
            mcfg = replace(mcfg, keep_fraction=float(keep))
        if iters is not None:
            mcfg = mcfg.with_iterations(int(iters))
        if mode is not None:
            att, pool = MODE_SETTINGS[mode]
            mcfg = replace(mcfg, attention_mode=att, pooling_mode=pool)
        if seed is not None:
            tcfg = replace(tcfg, seed=int(seed))

        row = {
            "radius": mcfg.base_radius, "keep_fraction": mcfg.keep_fraction,
            "iterations": mcfg.iterations, "drop_fraction": 0.0 if u is None else u,
            "mode": mode or "neural-clustering", "seed": tcfg.seed,
            "status": "ok", "train_loss": "", "train_accuracy": "", "test_metric": "",
            "survivors": "", "nomination_recall": "", "nomination_enrichment": "",
            "error": "",
        }
        try:
            tr, ev = train_base, eval_base
            if u:
                drop_rng = np.random.default_rng([tcfg.seed, int(round(u * 1000)), 7])
                tr = _apply_drop(train_base, u, drop_rng)
                ev = _apply_drop(eval_base, u, drop_rng)
            params, report = train(tr, mcfg, tcfg)
            metrics = evaluate(ev, params, mcfg)
            _, probe = forward(ev.records[0], params, mcfg, rng=np.random.default_rng(0))
            row["train_loss"] = report.train_loss[-1] if report.train_loss else ""
            row["train_accuracy"] = report.train_acc[-1] if report.train_acc else ""
            row["test_metric"] = metrics.get("accuracy", metrics.get("fmax", ""))
            row["survivors"] = ">".join(str(c) for c in probe.survivor_counts())
            if "nomination_recall" in metrics:
                row["nomination_recall"] = metrics["nomination_recall"]
                row["nomination_enrichment"] = metrics["nomination_enrichment"]
        except Exception as exc:  # keep sweeping; the table records the failure
            log.warning("sweep cell failed: %s", exc)
            row["status"] = "error"
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)

    if out_csv:
        write_sweep_csv(rows, out_csv)
    return rows


def write_sweep_csv(rows: list, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in SWEEP_FIELDS})
