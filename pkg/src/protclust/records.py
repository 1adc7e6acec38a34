"""Protein records: per-residue chains, datasets, PDB ingestion, JSON serialization.

A protein is represented at one point per residue (the alpha carbon), with the
amino-acid type, the original chain position, and a task label. Records are
immutable after construction and validated against their dataset's task
descriptor.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import IoError, ParseError, SchemaError

log = logging.getLogger(__name__)

# Standard 20 amino acids, one-letter codes in alphabetical order.
AMINO_ACIDS = list("ACDEFGHIKLMNPQRSTVWY")
AA_INDEX = {aa: i for i, aa in enumerate(AMINO_ACIDS)}
UNKNOWN_AA = 20
NUM_AA_TYPES = 21

THREE_TO_ONE = {
    "ALA": "A", "CYS": "C", "ASP": "D", "GLU": "E", "PHE": "F",
    "GLY": "G", "HIS": "H", "ILE": "I", "LYS": "K", "LEU": "L",
    "MET": "M", "ASN": "N", "PRO": "P", "GLN": "Q", "ARG": "R",
    "SER": "S", "THR": "T", "VAL": "V", "TRP": "W", "TYR": "Y",
}

SINGLE_LABEL = "single_label"
MULTI_LABEL = "multi_label"


@dataclass(frozen=True)
class ProteinRecord:
    """One protein chain: coordinates, residue types, chain positions, label.

    coords holds alpha-carbon positions in Angstroms, one row per residue.
    aa_types are indices in [0, 20] (20 standard residues plus unknown).
    seq_index holds the original, strictly increasing chain positions.
    label is an int for single-label tasks or a 0/1 vector for multi-label.
    present_mask is False where coordinates are missing; masked rows may be
    non-finite and are ignored by downstream geometry.
    meta carries side information such as planted-motif node indices.
    """

    id: str
    coords: np.ndarray
    aa_types: np.ndarray
    seq_index: np.ndarray
    label: object
    present_mask: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "coords", np.asarray(self.coords, dtype=np.float64))
        object.__setattr__(self, "aa_types", np.asarray(self.aa_types, dtype=np.int64))
        object.__setattr__(self, "seq_index", np.asarray(self.seq_index, dtype=np.int64))
        if self.present_mask is None:
            object.__setattr__(self, "present_mask", np.ones(len(self.aa_types), dtype=bool))
        else:
            object.__setattr__(self, "present_mask", np.asarray(self.present_mask, dtype=bool))
        if isinstance(self.label, (list, np.ndarray)):
            object.__setattr__(self, "label", np.asarray(self.label, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.aa_types)


@dataclass
class Dataset:
    """A list of records sharing one task descriptor and one split tag."""

    records: list
    task: str
    num_classes: int
    split: str = "train"


def validate_record(rec: ProteinRecord, task: str, num_classes: int) -> None:
    """Check a record against its invariants; raise SchemaError on violation."""
    n = len(rec)
    if n < 1:
        raise SchemaError(f"record {rec.id}: empty chain")
    if rec.coords.shape != (n, 3):
        raise SchemaError(f"record {rec.id}: coords shape {rec.coords.shape} != ({n}, 3)")
    if rec.seq_index.shape != (n,) or rec.present_mask.shape != (n,):
        raise SchemaError(f"record {rec.id}: field lengths disagree")
    if not np.all(np.isfinite(rec.coords[rec.present_mask])):
        raise SchemaError(f"record {rec.id}: non-finite coordinates on present rows")
    if n > 1 and not np.all(np.diff(rec.seq_index) > 0):
        raise SchemaError(f"record {rec.id}: seq_index not strictly increasing")
    if rec.aa_types.min(initial=0) < 0 or rec.aa_types.max(initial=0) > UNKNOWN_AA:
        raise SchemaError(f"record {rec.id}: aa_types outside [0, {UNKNOWN_AA}]")
    if task == SINGLE_LABEL:
        if not isinstance(rec.label, (int, np.integer)):
            raise SchemaError(f"record {rec.id}: single-label task needs an integer label")
        if not 0 <= int(rec.label) < num_classes:
            raise SchemaError(f"record {rec.id}: label {rec.label} outside [0, {num_classes})")
    elif task == MULTI_LABEL:
        lab = rec.label
        if not isinstance(lab, np.ndarray) or lab.shape != (num_classes,):
            raise SchemaError(
                f"record {rec.id}: multi-label task needs a length-{num_classes} vector"
            )
        if not np.all((lab == 0) | (lab == 1)):
            raise SchemaError(f"record {rec.id}: multi-label vector must be 0/1")
    else:
        raise SchemaError(f"unknown task kind {task!r}")


# ---------------------------------------------------------------------------
# PDB ingestion (ATOM-record subset, CA atoms only)
# ---------------------------------------------------------------------------

def parse_pdb_ca(text: str, chain: Optional[str] = None) -> ProteinRecord:
    """Extract one residue chain from PDB ATOM records, one node per CA atom.

    Fixed-column fields used: atom name (13-16), residue name (18-20),
    chain id (22), residue number (23-26), coordinates (31-54). Duplicate
    residue numbers (altlocs, insertion codes) keep the first occurrence.
    When chain is None the first chain carrying a CA atom is used.
    """
    coords = []
    aa_types = []
    seq_index = []
    seen = set()
    picked_chain = chain
    duplicates = 0

    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.startswith("ATOM"):
            continue
        if len(line) < 54:
            raise ParseError(f"line {lineno}: ATOM record shorter than coordinate field")
        atom_name = line[12:16].strip()
        if atom_name != "CA":
            continue
        chain_id = line[21:22]
        if picked_chain is None:
            picked_chain = chain_id
        if chain_id != picked_chain:
            continue
        res_name = line[17:20].strip()
        try:
            res_seq = int(line[22:26])
            x = float(line[30:38])
            y = float(line[38:46])
            z = float(line[46:54])
        except ValueError as exc:
            raise ParseError(f"line {lineno}: malformed ATOM fields ({exc})") from exc
        if res_seq in seen:
            duplicates += 1
            continue
        seen.add(res_seq)
        coords.append((x, y, z))
        aa_types.append(AA_INDEX.get(THREE_TO_ONE.get(res_name, "?"), UNKNOWN_AA))
        seq_index.append(res_seq)

    if not coords:
        raise ParseError("no CA atoms found")
    if duplicates:
        log.warning("parse_pdb_ca: skipped %d duplicate residue numbers", duplicates)
    order = np.argsort(np.asarray(seq_index), kind="stable")
    meta = {"duplicate_residues": duplicates} if duplicates else {}
    rec_id = f"pdb:{picked_chain}"
    return ProteinRecord(
        id=rec_id,
        coords=np.asarray(coords)[order],
        aa_types=np.asarray(aa_types)[order],
        seq_index=np.asarray(seq_index)[order],
        label=0,
        meta=meta,
    )


# ---------------------------------------------------------------------------
# Native JSON format: one record per file plus a manifest
# ---------------------------------------------------------------------------

def record_to_dict(rec: ProteinRecord) -> dict:
    label = rec.label.tolist() if isinstance(rec.label, np.ndarray) else int(rec.label)
    return {
        "id": rec.id,
        "coords": rec.coords.tolist(),
        "aa_types": rec.aa_types.tolist(),
        "seq_index": rec.seq_index.tolist(),
        "label": label,
        "present_mask": rec.present_mask.tolist(),
        "meta": rec.meta,
    }


def record_from_dict(d: dict) -> ProteinRecord:
    return ProteinRecord(
        id=d["id"],
        coords=np.asarray(d["coords"], dtype=np.float64).reshape(-1, 3),
        aa_types=d["aa_types"],
        seq_index=d["seq_index"],
        label=d["label"],
        present_mask=d.get("present_mask"),
        meta=d.get("meta", {}),
    )


def save_record(rec: ProteinRecord, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(record_to_dict(rec), fh)


def load_record(path: str) -> ProteinRecord:
    try:
        with open(path) as fh:
            return record_from_dict(json.load(fh))
    except OSError as exc:
        raise IoError(f"cannot read record file {path}: {exc}") from exc


def save_dataset(datasets: dict, directory: str) -> str:
    """Write per-split datasets as one JSON file per record plus manifest.json.

    datasets maps split name -> Dataset. Returns the manifest path.
    """
    os.makedirs(directory, exist_ok=True)
    first = next(iter(datasets.values()))
    entries = []
    for split, ds in datasets.items():
        if ds.task != first.task or ds.num_classes != first.num_classes:
            raise SchemaError("splits disagree on task descriptor")
        for rec in ds.records:
            fname = f"{rec.id}.json"
            save_record(rec, os.path.join(directory, fname))
            entries.append({"file": fname, "id": rec.id, "split": split})
    manifest = {
        "task": first.task,
        "num_classes": first.num_classes,
        "records": entries,
    }
    mpath = os.path.join(directory, "manifest.json")
    with open(mpath, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return mpath


def load_dataset(path: str, split: Optional[str] = None):
    """Load and fully validate the dataset directory written by save_dataset.

    Returns a dict split -> Dataset, or a single Dataset when split is given.
    Every record is checked against its invariants and the task descriptor;
    ids must be disjoint across splits.
    """
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read manifest {mpath}: {exc}") from exc

    task = manifest.get("task")
    num_classes = manifest.get("num_classes")
    if task not in (SINGLE_LABEL, MULTI_LABEL) or not isinstance(num_classes, int):
        raise SchemaError("manifest missing a valid task/num_classes descriptor")

    by_split: dict = {}
    seen_ids: dict = {}
    for entry in manifest["records"]:
        rec = load_record(os.path.join(path, entry["file"]))
        validate_record(rec, task, num_classes)
        sp = entry["split"]
        if rec.id in seen_ids:
            other = seen_ids[rec.id]
            what = "in multiple splits" if other != sp else "twice"
            raise SchemaError(f"record id {rec.id} appears {what}")
        seen_ids[rec.id] = sp
        by_split.setdefault(sp, []).append(rec)

    out = {
        sp: Dataset(records=recs, task=task, num_classes=num_classes, split=sp)
        for sp, recs in by_split.items()
    }
    if split is not None:
        if split not in out:
            return Dataset(records=[], task=task, num_classes=num_classes, split=split)
        return out[split]
    return out


def masked_record(rec: ProteinRecord) -> ProteinRecord:
    """Return the record restricted to rows whose coordinates are present."""
    if rec.present_mask.all():
        return rec
    keep = np.flatnonzero(rec.present_mask)
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
