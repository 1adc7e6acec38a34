"""Coordinate augmentation, node dropping, and planted-motif synthetic datasets.

The synthetic generator builds random 3D chains and implants one rigid motif
template per class; the class label is fully determined by which template was
implanted, and the implant location is stored in record metadata so nomination
quality can be measured against ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateError, SchemaError
from .records import Dataset, ProteinRecord, SINGLE_LABEL

CA_SPACING = 3.8  # consecutive alpha carbons, Angstroms


@dataclass
class AugmentConfig:
    """Gaussian coordinate noise plus anisotropic scaling."""

    noise_std: float = 0.1
    scale_min: float = 0.9
    scale_max: float = 1.1
    drop_fraction: float = 0.0

    def validate(self) -> None:
        if self.noise_std < 0:
            raise SchemaError("noise_std must be >= 0")
        if not 0 < self.scale_min <= self.scale_max:
            raise SchemaError("need 0 < scale_min <= scale_max")
        if not 0 <= self.drop_fraction < 1:
            raise SchemaError("drop_fraction must be in [0, 1)")


def augment(rec: ProteinRecord, cfg: AugmentConfig, rng: np.random.Generator) -> ProteinRecord:
    """Scale coordinates per axis and add i.i.d. Gaussian noise per residue.

    Each axis factor is drawn uniformly from [scale_min, scale_max]; noise has
    standard deviation noise_std. Types, labels, and chain positions are
    untouched. One point per residue, so the per-residue noise convention
    reduces to one draw per node.
    """
    cfg.validate()
    scale = rng.uniform(cfg.scale_min, cfg.scale_max, size=3)
    noise = rng.normal(0.0, cfg.noise_std, size=rec.coords.shape) if cfg.noise_std > 0 else 0.0
    out = replace(rec, coords=rec.coords * scale + noise)
    if cfg.drop_fraction > 0:
        out = drop_nodes(out, cfg.drop_fraction, rng)
    return out


def drop_nodes(rec: ProteinRecord, u: float, rng: np.random.Generator) -> ProteinRecord:
    """Remove floor(u*N) uniformly chosen nodes, keeping survivor order.

    Motif metadata indices are remapped onto the surviving rows.
    """
    if not 0 <= u < 1:
        raise SchemaError(f"drop fraction {u} outside [0, 1)")
    n = len(rec)
    k = int(np.floor(u * n))
    if k >= n:
        raise DegenerateError("drop would remove every node")
    if k == 0:
        return rec
    removed = rng.choice(n, size=k, replace=False)
    keep = np.setdiff1d(np.arange(n), removed)
    meta = dict(rec.meta)
    if "motif_ids" in meta:
        remap = {int(old): new for new, old in enumerate(keep)}
        meta["motif_ids"] = [remap[i] for i in meta["motif_ids"] if i in remap]
    return replace(
        rec,
        coords=rec.coords[keep],
        aa_types=rec.aa_types[keep],
        seq_index=rec.seq_index[keep],
        present_mask=rec.present_mask[keep],
        meta=meta,
    )


@dataclass
class SynthConfig:
    """Planted-motif dataset generator settings."""

    num_proteins: int = 250
    chain_len_range: tuple = (30, 40)
    num_classes: int = 4
    motif_size: int = 8
    noise: float = 0.1
    split_fractions: tuple = (0.8, 0.0, 0.2)  # train, val, test

    def validate(self) -> None:
        if self.num_proteins < 1 or self.num_classes < 1:
            raise SchemaError("need at least one protein and one class")
        lo, hi = self.chain_len_range
        if not 1 <= lo <= hi:
            raise SchemaError("bad chain_len_range")
        if not 0 < self.motif_size < lo:
            raise SchemaError("motif_size must be positive and below min chain length")
        if self.noise < 0:
            raise SchemaError("noise must be >= 0")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise SchemaError("split_fractions must be nonnegative and sum to 1")


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix from a normalized random quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _chain_step(rng: np.random.Generator, prev_dir: np.ndarray) -> np.ndarray:
    """A unit step biased away from doubling straight back on the chain."""
    for _ in range(8):
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        if prev_dir is None or np.dot(v, prev_dir) > -0.5:
            return v
    return v


def _motif_templates(cfg: SynthConfig, rng: np.random.Generator):
    """One rigid template per class: residue types plus local geometry."""
    templates = []
    seen_types = set()
    for _ in range(cfg.num_classes):
        while True:
            types = tuple(rng.integers(0, 20, size=cfg.motif_size))
            if types not in seen_types:
                seen_types.add(types)
                break
        offsets = np.zeros((cfg.motif_size, 3))
        d = None
        for i in range(1, cfg.motif_size):
            d = _chain_step(rng, d)
            offsets[i] = offsets[i - 1] + CA_SPACING * d
        templates.append((np.array(types), offsets))
    return templates


def synth_motif_dataset(cfg: SynthConfig, rng: np.random.Generator) -> dict:
    """Generate a planted-motif dataset, returning a dict split -> Dataset.

    Each protein is a random 3D chain with CA-like spacing; its class is
    determined solely by which rigid motif template (types + geometry) was
    implanted at a random location. The motif node indices are stored in
    record metadata as "motif_ids". Classes and splits are assigned
    round-robin so every split stays class-balanced.
    """
    cfg.validate()
    templates = _motif_templates(cfg, rng)
    lo, hi = cfg.chain_len_range
    pattern = _split_pattern(cfg.split_fractions)

    by_split: dict = {"train": [], "val": [], "test": []}
    for i in range(cfg.num_proteins):
        cls = i % cfg.num_classes
        types_t, offsets_t = templates[cls]
        n = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, n - cfg.motif_size + 1))

        aa = rng.integers(0, 20, size=n)
        coords = np.zeros((n, 3))
        d = None
        j = 1
        while j < n:
            if j == start + 1 and start + cfg.motif_size <= n and cfg.motif_size > 1:
                # implant: rigid motion of the template anchored at the start node
                rot = _random_rotation(rng)
                block = coords[start] + (offsets_t - offsets_t[0]) @ rot.T
                coords[start:start + cfg.motif_size] = block
                d = None
                j = start + cfg.motif_size
                continue
            d = _chain_step(rng, d)
            coords[j] = coords[j - 1] + CA_SPACING * d
            j += 1
        aa[start:start + cfg.motif_size] = types_t
        if cfg.noise > 0:
            coords = coords + rng.normal(0.0, cfg.noise, size=coords.shape)

        rec = ProteinRecord(
            id=f"p{i:05d}",
            coords=coords,
            aa_types=aa,
            seq_index=np.arange(n),
            label=cls,
            meta={"motif_ids": list(range(start, start + cfg.motif_size)),
                  "template": int(cls)},
        )
        by_split[pattern[i % len(pattern)]].append(rec)

    return {
        sp: Dataset(records=recs, task=SINGLE_LABEL, num_classes=cfg.num_classes, split=sp)
        for sp, recs in by_split.items() if recs
    }


def _split_pattern(fractions) -> list:
    """Length-10 cyclic split assignment matching the fractions by largest remainder."""
    names = ("train", "val", "test")
    exact = [10 * f for f in fractions]
    counts = [int(np.floor(e)) for e in exact]
    while sum(counts) < 10:
        rem = [e - c for e, c in zip(exact, counts)]
        counts[int(np.argmax(rem))] += 1
    pattern = []
    for name, c in zip(names, counts):
        pattern.extend([name] * c)
    return pattern
