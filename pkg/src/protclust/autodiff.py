"""Dense-tensor computation with reverse-mode differentiation.

A Tensor wraps a float64 numpy array and remembers how it was produced; the
compute graph is the implicit DAG of parent links, and backward() derives a
topological order on the fly. Only tensors that (transitively) depend on a
trainable parameter participate in the backward pass; everything else is
treated as a constant of the forward computation.

All arithmetic is 64-bit. Forward results are checked for finiteness unless
FINITE_CHECKS is switched off.
"""

from __future__ import annotations

import json
import struct
from typing import Iterable, Optional

import numpy as np

from .errors import NumericalError, ShapeError, StateError

DTYPE = np.float64
FINITE_CHECKS = True


class Tensor:
    """A float64 array plus optional gradient and graph linkage."""

    __slots__ = ("data", "grad", "name", "trainable", "requires", "_parents", "_vjp")

    def __init__(self, data, parents=(), vjp=None, name=None, trainable=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.name = name
        self.trainable = trainable
        self._parents = tuple(parents)
        self._vjp = vjp
        self.requires = trainable or any(p.requires for p in self._parents)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data, name: str) -> Tensor:
    return Tensor(data, name=name, trainable=True)


def _finish(out: Tensor) -> Tensor:
    if FINITE_CHECKS and not np.all(np.isfinite(out.data)):
        raise NumericalError("non-finite values in op output")
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcasted gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape} do not conform")
    out_data = a.data @ b.data

    def vjp(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return _finish(Tensor(out_data, (a, b), vjp))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: {a.shape} and {b.shape} do not broadcast")

    def vjp(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _finish(Tensor(out_data, (a, b), vjp))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: {a.shape} and {b.shape} do not broadcast")

    def vjp(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return _finish(Tensor(out_data, (a, b), vjp))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: {a.shape} and {b.shape} do not broadcast")

    def vjp(g):
        return [(a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape))]

    return _finish(Tensor(out_data, (a, b), vjp))


def concat(tensors: Iterable[Tensor], axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out_data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} do not align on axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        return list(zip(ts, pieces))

    return _finish(Tensor(out_data, ts, vjp))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def vjp(g):
        return [(a, g * (a.data > 0.0))]

    # tagged so graph walks can find kink inputs (finite differences are
    # only meaningful away from them)
    return _finish(Tensor(out_data, (a,), vjp, name="relu"))


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, shift-stabilized."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return [(a, out_data * (g - dot))]

    return _finish(Tensor(out_data, (a,), vjp))


def gather_rows(a: Tensor, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim < 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
        raise ShapeError(f"gather_rows: indices out of range for {a.shape}")
    out_data = a.data[idx]

    def vjp(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return [(a, da)]

    return _finish(Tensor(out_data, (a,), vjp))


def segment_weighted_sum(values: Tensor, weights: Tensor, segments, num_segments: int) -> Tensor:
    """Per-segment sum of weight-scaled rows: out[s] = sum over k in s of w_k * v_k."""
    values, weights = as_tensor(values), as_tensor(weights)
    seg = np.asarray(segments, dtype=np.int64)
    w = weights.data.reshape(-1)
    if values.data.ndim != 2 or w.shape[0] != values.shape[0] or seg.shape[0] != values.shape[0]:
        raise ShapeError(
            f"segment_weighted_sum: values {values.shape}, weights {weights.shape}, "
            f"segments {seg.shape} do not align"
        )
    out_data = np.zeros((num_segments, values.shape[1]), dtype=DTYPE)
    np.add.at(out_data, seg, values.data * w[:, None])

    def vjp(g):
        gseg = g[seg]
        dv = gseg * w[:, None]
        dw = (values.data * gseg).sum(axis=1).reshape(weights.shape)
        return [(values, dv), (weights, dw)]

    return _finish(Tensor(out_data, (values, weights), vjp))


def segment_softmax(scores: Tensor, segments, num_segments: int) -> Tensor:
    """Softmax over ragged groups given by segment ids; shape preserved."""
    scores = as_tensor(scores)
    seg = np.asarray(segments, dtype=np.int64)
    s = scores.data.reshape(-1)
    if seg.shape[0] != s.shape[0]:
        raise ShapeError(f"segment_softmax: scores {scores.shape} vs segments {seg.shape}")
    mx = np.full(num_segments, -np.inf, dtype=DTYPE)
    np.maximum.at(mx, seg, s)
    e = np.exp(s - mx[seg])
    den = np.zeros(num_segments, dtype=DTYPE)
    np.add.at(den, seg, e)
    out_flat = e / den[seg]
    out_data = out_flat.reshape(scores.shape)

    def vjp(g):
        gf = g.reshape(-1)
        t = out_flat * gf
        tsum = np.zeros(num_segments, dtype=DTYPE)
        np.add.at(tsum, seg, t)
        return [(scores, (out_flat * (gf - tsum[seg])).reshape(scores.shape))]

    return _finish(Tensor(out_data, (scores,), vjp))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] \
            or b.shape != (w.shape[1],):
        raise ShapeError(f"affine: x {x.shape}, w {w.shape}, b {b.shape} do not conform")
    out_data = x.data @ w.data + b.data

    def vjp(g):
        return [(x, g @ w.data.T), (w, x.data.T @ g), (b, g.sum(axis=0))]

    return _finish(Tensor(out_data, (x, w, b), vjp))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over rows; labels are integer class ids."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or y.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs {y.shape[0]} labels")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = (lse - shifted[np.arange(n), y]).mean()
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)

    def vjp(g):
        d = probs.copy()
        d[np.arange(n), y] -= 1.0
        return [(logits, (float(g) / n) * d)]

    return _finish(Tensor(loss, (logits,), vjp))


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean element-wise sigmoid binary cross-entropy, numerically stable."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=DTYPE).reshape(logits.shape)
    z = logits.data
    loss = (np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()
    sig = 1.0 / (1.0 + np.exp(-z))

    def vjp(g):
        return [(logits, (float(g) / z.size) * (sig - t))]

    return _finish(Tensor(loss, (logits,), vjp))


def mean_rows(a: Tensor) -> Tensor:
    """Column means of a 2-D tensor, kept as a single row."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"mean_rows: need a 2-D tensor, got {a.shape}")
    n = a.shape[0]
    out_data = a.data.mean(axis=0, keepdims=True)

    def vjp(g):
        return [(a, np.broadcast_to(g / n, a.shape).copy())]

    return _finish(Tensor(out_data, (a,), vjp))


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum()

    def vjp(g):
        return [(a, np.full(a.shape, float(g), dtype=DTYPE))]

    return _finish(Tensor(out_data, (a,), vjp))


OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "concat": concat,
    "relu": relu,
    "softmax_rows": softmax_rows,
    "gather_rows": gather_rows,
    "segment_weighted_sum": segment_weighted_sum,
    "segment_softmax": segment_softmax,
    "affine": affine,
    "cross_entropy": cross_entropy,
    "bce_with_logits": bce_with_logits,
    "mean_rows": mean_rows,
    "sum_all": sum_all,
}


def op_eval(kind: str, *inputs) -> Tensor:
    """Uniform dispatch over the op vocabulary, mainly for tests and tooling."""
    if kind not in OPS:
        raise ShapeError(f"unknown op kind {kind!r}")
    return OPS[kind](*inputs)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into .grad of every reachable trainable tensor.

    Repeated calls add up, which is how gradient accumulation over a batch
    works; sgd_step clears the grads.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires:
        return

    topo: list = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.trainable:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in node._vjp(g):
            if not parent.requires:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def sgd_step(params: Iterable[Tensor], lr: float, weight_decay: float = 0.0) -> None:
    """p <- p - lr * (grad + weight_decay * p), then clear grads."""
    for p in params:
        if not p.trainable:
            continue
        if p.grad is None:
            raise StateError(f"sgd_step: parameter {p.name!r} has no gradient")
        p.data = p.data - lr * (p.grad + weight_decay * p.data)
        p.grad = None


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def grad_check(builder, seed: int = 0, h: float = 1e-5, rel_floor: float = 1e-6) -> dict:
    """Compare reverse-mode gradients with central finite differences.

    builder(seed) must return (params, loss_fn) where params is a dict of
    trainable Tensors and loss_fn() rebuilds the scalar loss from the current
    parameter values. Returns per-parameter max/mean relative error plus the
    overall max; the relative error denominator is floored at rel_floor so
    near-zero gradients compare by absolute difference.
    """
    params, loss_fn = builder(seed)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    report = {}
    overall = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(loss_fn().data)
            flat[i] = keep - h
            down = float(loss_fn().data)
            flat[i] = keep
            fd[i] = (up - down) / (2.0 * h)
        fd = fd.reshape(p.data.shape)
        a = analytic[name]
        rel = np.abs(a - fd) / np.maximum(np.maximum(np.abs(a), np.abs(fd)), rel_floor)
        report[name] = {"max_rel": float(rel.max()), "mean_rel": float(rel.mean())}
        overall = max(overall, float(rel.max()))
    return {"params": report, "max_rel": overall}


# ---------------------------------------------------------------------------
# Checkpoint archive: named tensors, raw little-endian float64
# ---------------------------------------------------------------------------

_MAGIC = b"NTAR\x01\n"


def save_checkpoint(path: str, tensors: dict, extra: Optional[dict] = None) -> None:
    """Write a named-tensor archive; byte-exact given identical contents."""
    names = sorted(tensors)
    index = []
    blobs = []
    for name in names:
        t = tensors[name]
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    meta = json.dumps({"version": 1, "extra": extra or {}, "tensors": index},
                      sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str):
    """Read a named-tensor archive back as (arrays dict, extra dict)."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise StateError(f"{path}: not a checkpoint archive")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(mlen).decode())
        out = {}
        for entry in meta["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
            out[entry["name"]] = arr.astype(DTYPE)
    return out, meta.get("extra", {})
