"""The iterative clustering network.

One forward pass runs T coarsening iterations over a residue graph. Each
iteration t:

  1. opens a radius ball around every surviving node (radius grows linearly
     with t) and encodes every (center, member) pair with rotation-invariant
     features,
  2. runs B attention blocks that pool member features into each center via
     a learned softmax over the ball, with a skip connection,
  3. scores every center with a difference-aggregation rule over the ball
     adjacency, multiplies features by their scores, and keeps the top
     floor(keep_fraction * N) nodes (never fewer than one).

Survivors keep their original chain frames and sequence positions, so later
iterations still see chain-aware geometry. A mean readout plus affine head
produces class logits.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (Tensor, add, affine, concat, gather_rows, matmul, mean_rows, mul,
                       param, relu, segment_softmax, segment_weighted_sum, sub)
from .errors import DegenerateError, SchemaError
from .geometry import (ENCODING_DIM, adjacency_from_lists, local_frames,
                       pair_encoding_batch, radius_neighbors)
from .records import MULTI_LABEL, NUM_AA_TYPES, SINGLE_LABEL, ProteinRecord, masked_record

log = logging.getLogger(__name__)

ATTENTION_MODES = ("learned", "random-baseline")
POOLING_MODES = ("neural-clustering", "average-pool-baseline")


@dataclass
class ModelConfig:
    num_classes: int
    task: str = SINGLE_LABEL
    iterations: int = 4
    blocks_per_iteration: int = 2
    base_radius: float = 4.0
    keep_fraction: float = 0.40
    channels: tuple = (128, 256, 512, 1024)
    embed_dim: int = 128
    neighbor_cap: int = 64
    attention_mode: str = "learned"
    pooling_mode: str = "neural-clustering"

    def validate(self) -> "ModelConfig":
        if self.num_classes < 1:
            raise SchemaError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.task not in (SINGLE_LABEL, MULTI_LABEL):
            raise SchemaError(f"unknown task {self.task!r}")
        if self.iterations < 1:
            raise SchemaError(f"iterations must be >= 1, got {self.iterations}")
        if self.blocks_per_iteration < 1:
            raise SchemaError(f"blocks_per_iteration must be >= 1")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise SchemaError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")
        if self.base_radius <= 0.0:
            raise SchemaError(f"base_radius must be positive, got {self.base_radius}")
        if len(self.channels) != self.iterations:
            raise SchemaError(
                f"channels {tuple(self.channels)} must list one width per iteration "
                f"({self.iterations})")
        if self.embed_dim < 1 or self.neighbor_cap < 1:
            raise SchemaError("embed_dim and neighbor_cap must be positive")
        if self.attention_mode not in ATTENTION_MODES:
            raise SchemaError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.pooling_mode not in POOLING_MODES:
            raise SchemaError(f"pooling_mode must be one of {POOLING_MODES}")
        return self

    def with_iterations(self, t: int) -> "ModelConfig":
        """Resize the channel list along with the iteration count."""
        ch = tuple(self.channels[:t])
        while len(ch) < t:
            ch = ch + (self.channels[-1],)
        return replace(self, iterations=t, channels=ch)


def next_count(n: int, keep_fraction: float) -> int:
    """Survivor count for one coarsening step: max(1, floor(keep * n)).

    The product is rounded at the 9th decimal first so decimal keep fractions
    (0.3 * 10 is 2.999... in binary) floor like exact arithmetic.
    """
    k = int(np.floor(round(keep_fraction * n, 9)))
    if k < 1:
        log.warning("keep count clamped to 1 (keep_fraction=%s, nodes=%d)", keep_fraction, n)
        return 1
    return k


def survivor_schedule(n0: int, keep_fraction: float, iterations: int) -> list:
    """[N_0, N_1, ..., N_T] under the coarsening law."""
    counts = [int(n0)]
    for _ in range(iterations):
        counts.append(next_count(counts[-1], keep_fraction))
    return counts


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def init_params(cfg: ModelConfig, seed: int) -> dict:
    """Fresh parameter dict; uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) per layer.

    Only layers the configured modes actually use are created, so every
    parameter receives a gradient on every step.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    params: dict = {}

    def lin(name, fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = param(rng.uniform(-bound, bound, size=shape), name)

    lin("embed", cfg.embed_dim, (NUM_AA_TYPES, cfg.embed_dim))
    cin = cfg.embed_dim
    for t, c in enumerate(cfg.channels):
        for b in range(cfg.blocks_per_iteration):
            pre = f"it{t}.b{b}."
            lin(pre + "f1_w", ENCODING_DIM + cin, (ENCODING_DIM + cin, c))
            lin(pre + "f1_b", ENCODING_DIM + cin, (c,))
            lin(pre + "f2_w", c, (c, c))
            lin(pre + "f2_b", c, (c,))
            if cfg.attention_mode == "learned":
                lin(pre + "att_u_w", 2 * c, (2 * c, c))
                lin(pre + "att_u_b", 2 * c, (c,))
                lin(pre + "att_w", c, (c, 1))
            if cin != c:
                lin(pre + "skip_w", cin, (cin, c))
                lin(pre + "skip_b", cin, (c,))
            cin = c
        if cfg.pooling_mode == "neural-clustering":
            # w1 starts at zero and w3 mirrors w2, so the initial score is a
            # pure Laplacian contrast sum_m A[n,m] w2.(x_n - x_m). That kills
            # the feature direction shared by all nodes, leaving signs that
            # differ per node; a random w1 instead projects that shared
            # direction with one global sign and can zero every score, which
            # freezes the model (dead relu gives no gradient path back).
            params[f"it{t}.nom_w1"] = param(np.zeros((c, 1)), f"it{t}.nom_w1")
            lin(f"it{t}.nom_w2", c, (c, 1))
            params[f"it{t}.nom_w3"] = param(params[f"it{t}.nom_w2"].data.copy(),
                                            f"it{t}.nom_w3")
    lin("head_w", cfg.channels[-1], (cfg.channels[-1], cfg.num_classes))
    lin("head_b", cfg.channels[-1], (cfg.num_classes,))
    return params


def count_params(params: dict) -> int:
    return int(sum(p.data.size for p in params.values()))


# ---------------------------------------------------------------------------
# Score trace
# ---------------------------------------------------------------------------

@dataclass
class IterationBlock:
    """What one coarsening iteration saw and decided.

    node_ids are original-chain indices of that iteration's inputs; scores
    (one per input) are the raw nomination scores; selected lists the
    survivors in descending score order.
    """

    iteration: int
    node_ids: np.ndarray
    scores: np.ndarray
    coords: np.ndarray
    selected: np.ndarray

    def to_dict(self) -> dict:
        return {
            "iteration": int(self.iteration),
            "node_ids": [int(i) for i in self.node_ids],
            "scores": [float(s) for s in self.scores],
            "coords": [[float(c) for c in row] for row in self.coords],
            "selected": [int(i) for i in self.selected],
        }


@dataclass
class ScoreTrace:
    record_id: str
    num_nodes: int
    iterations: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "num_nodes": int(self.num_nodes),
            "iterations": [b.to_dict() for b in self.iterations],
        }

    def survivor_counts(self) -> list:
        """[N_0, N_1, ...] actually realized by this pass."""
        counts = [self.num_nodes]
        counts.extend(len(b.selected) for b in self.iterations)
        return counts


def save_trace(trace: ScoreTrace, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(trace.to_dict(), fh, indent=1)
        fh.write("\n")


def load_trace(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def trace_svg(block: IterationBlock, size: int = 480) -> str:
    """One SVG per iteration: a circle per selected node, colored by score."""
    ids = list(block.selected)
    pos = {int(n): i for i, n in enumerate(block.node_ids)}
    pts = np.asarray([block.coords[pos[int(n)]] for n in ids], dtype=float)
    sc = np.asarray([block.scores[pos[int(n)]] for n in ids], dtype=float)
    if len(pts) == 0:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}"/>'
    xy = pts[:, :2]
    lo = xy.min(axis=0)
    span = max(float((xy.max(axis=0) - lo).max()), 1e-9)
    margin = 20.0
    scale = (size - 2 * margin) / span
    srange = float(sc.max() - sc.min())
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for (x, y), s, ident in zip(xy, sc, ids):
        u = 0.5 if srange <= 0 else (float(s) - float(sc.min())) / srange
        r = int(40 + 30 * (1 - u))
        g = int(60 + 150 * u)
        bch = int(200 - 140 * u)
        cx = margin + (x - lo[0]) * scale
        cy = margin + (y - lo[1]) * scale
        parts.append(
            f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="6" fill="#{r:02x}{g:02x}{bch:02x}">'
            f'<title>node {ident}: {float(s):.6g}</title></circle>')
    parts.append("</svg>")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def _cre_block(feats, enc, pn, pk, self_pos, num_nodes, params, t, b, cfg, rng):
    """One attention block: encode pairs, pool into centers, add skip."""
    pre = f"it{t}.b{b}."
    hk = gather_rows(feats, pk)
    pair_in = concat([enc, hk], axis=1)
    hidden = relu(affine(pair_in, params[pre + "f1_w"], params[pre + "f1_b"]))
    x = affine(hidden, params[pre + "f2_w"], params[pre + "f2_b"])

    if cfg.attention_mode == "learned":
        xn = gather_rows(x, self_pos[pn])
        both = concat([xn, x], axis=1)
        h = relu(affine(both, params[pre + "att_u_w"], params[pre + "att_u_b"]))
        score = matmul(h, params[pre + "att_w"])
        gamma = segment_softmax(score, pn, num_nodes)
    else:
        # weights drawn uniformly on the simplex of each ball, held constant
        e = rng.standard_exponential(len(pn))
        den = np.zeros(num_nodes)
        np.add.at(den, pn, e)
        gamma = Tensor((e / den[pn])[:, None])

    agg = segment_weighted_sum(x, gamma, pn, num_nodes)
    if pre + "skip_w" in params:
        skip = affine(feats, params[pre + "skip_w"], params[pre + "skip_b"])
    else:
        skip = feats
    return add(agg, skip)


def _nominate(feats, adj, params, t, cfg):
    """Score nodes, gate features by score, keep the top slice.

    score_n = relu(W1 x_n + sum_m A[n, m] (W2 x_n - W3 x_m)); ties broken by
    lower node index; survivors are re-linked in ascending chain order.
    """
    pre = f"it{t}."
    s_self = matmul(feats, params[pre + "nom_w1"])
    s_here = matmul(feats, params[pre + "nom_w2"])
    s_there = matmul(feats, params[pre + "nom_w3"])
    deg = adj.sum(axis=1, keepdims=True)
    phi = relu(add(s_self, sub(mul(s_here, Tensor(deg)), matmul(Tensor(adj), s_there))))
    gated = mul(feats, phi)

    scores = phi.data[:, 0].copy()
    n = scores.shape[0]
    keep = next_count(n, cfg.keep_fraction)
    order = np.lexsort((np.arange(n), -scores))
    sel_desc = order[:keep]
    sel_asc = np.sort(sel_desc)
    return gather_rows(gated, sel_asc), sel_asc, sel_desc, scores


def _stride_pool(feats, keep_fraction):
    """Positional downsampling baseline: evenly strided rows, no scoring."""
    n = feats.shape[0]
    keep = next_count(n, keep_fraction)
    idx = (np.arange(keep, dtype=np.int64) * n) // keep
    scores = np.ones(n)
    return gather_rows(feats, idx), idx, idx, scores


def forward(rec: ProteinRecord, params: dict, cfg: ModelConfig, rng=None):
    """Run the full pipeline on one record.

    Returns (logits, trace) where logits is a (1, num_classes) tensor and the
    trace records inputs, scores, and survivors of every iteration. rng is
    consumed only by the random-attention baseline; a fixed default keeps
    that mode reproducible when none is supplied.
    """
    rec = masked_record(rec)
    n = len(rec)
    if n == 0:
        raise DegenerateError(f"record {rec.id}: no present nodes")
    if rng is None:
        rng = np.random.default_rng(0)

    frames = local_frames(rec.coords)
    feats = gather_rows(params["embed"], rec.aa_types)
    alive = np.arange(n, dtype=np.int64)
    blocks = []

    for t in range(cfg.iterations):
        radius_t = cfg.base_radius * (t + 1)
        sub_coords = rec.coords[alive]
        nbrs = radius_neighbors(sub_coords, radius_t, cfg.neighbor_cap)
        pn, pk, self_pos = nbrs.pair_arrays()
        enc = Tensor(pair_encoding_batch(frames, rec.coords, rec.seq_index,
                                         alive[pn], alive[pk], radius_t, n))
        num_nodes = alive.shape[0]
        for b in range(cfg.blocks_per_iteration):
            feats = _cre_block(feats, enc, pn, pk, self_pos, num_nodes,
                               params, t, b, cfg, rng)

        if cfg.pooling_mode == "neural-clustering":
            adj = adjacency_from_lists(nbrs)
            feats, sel_asc, sel_desc, scores = _nominate(feats, adj, params, t, cfg)
        else:
            feats, sel_asc, sel_desc, scores = _stride_pool(feats, cfg.keep_fraction)

        blocks.append(IterationBlock(
            iteration=t + 1,
            node_ids=alive.copy(),
            scores=scores,
            coords=sub_coords,
            selected=alive[sel_desc],
        ))
        alive = alive[sel_asc]

    readout = mean_rows(feats)
    logits = affine(readout, params["head_w"], params["head_b"])
    return logits, ScoreTrace(record_id=rec.id, num_nodes=n, iterations=blocks)


def predict(rec: ProteinRecord, params: dict, cfg: ModelConfig, rng=None) -> np.ndarray:
    logits, _ = forward(rec, params, cfg, rng=rng)
    return logits.data[0].copy()
