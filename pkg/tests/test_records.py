import json
import os

import numpy as np
import pytest

from protclust import (Dataset, ParseError, ProteinRecord, SchemaError, load_dataset,
                       load_record, masked_record, parse_pdb_ca, save_dataset, save_record,
                       validate_record)
from protclust.records import AA_INDEX, SINGLE_LABEL, MULTI_LABEL, UNKNOWN_AA


def make_record(n=5, label=0, rec_id="r0", **kw):
    coords = np.arange(n * 3, dtype=float).reshape(n, 3)
    return ProteinRecord(id=rec_id, coords=coords, aa_types=np.zeros(n, dtype=int),
                         seq_index=np.arange(n), label=label, **kw)


# fixed-column ATOM lines; columns matter, so these are built by format
def atom_line(serial, name, res, chain, seq, x, y, z):
    return (f"ATOM  {serial:5d} {name:^4s}{res:>4s} {chain}{seq:4d}    "
            f"{x:8.3f}{y:8.3f}{z:8.3f}  1.00  0.00")


class TestParsePdb:
    def test_three_residues(self):
        text = "\n".join([
            atom_line(1, "N", "GLY", "A", 1, 0.0, 0.0, 0.0),
            atom_line(2, "CA", "GLY", "A", 1, 1.0, 2.0, 3.0),
            atom_line(3, "CA", "ALA", "A", 2, 4.0, 5.0, 6.0),
            atom_line(4, "CA", "LYS", "A", 3, 7.0, 8.0, 9.0),
        ])
        rec = parse_pdb_ca(text)
        assert len(rec) == 3
        assert rec.aa_types.tolist() == [AA_INDEX["G"], AA_INDEX["A"], AA_INDEX["K"]]
        assert np.array_equal(rec.coords, [[1, 2, 3], [4, 5, 6], [7, 8, 9]])
        assert rec.seq_index.tolist() == [1, 2, 3]

    def test_empty_text(self):
        with pytest.raises(ParseError):
            parse_pdb_ca("")

    def test_hetatm_only(self):
        with pytest.raises(ParseError, match="no CA"):
            parse_pdb_ca("HETATM    1  CA  CA  A 101      10.0    10.0    10.0")

    def test_chain_selection(self):
        text = "\n".join([
            atom_line(1, "CA", "GLY", "A", 1, 0.0, 0.0, 0.0),
            atom_line(2, "CA", "ALA", "B", 1, 9.0, 9.0, 9.0),
            atom_line(3, "CA", "ALA", "A", 2, 1.0, 0.0, 0.0),
        ])
        rec = parse_pdb_ca(text)  # first chain wins
        assert len(rec) == 2 and rec.id == "pdb:A"
        rec_b = parse_pdb_ca(text, chain="B")
        assert len(rec_b) == 1 and rec_b.coords[0, 0] == 9.0

    def test_duplicate_residues_keep_first(self):
        text = "\n".join([
            atom_line(1, "CA", "GLY", "A", 1, 0.0, 0.0, 0.0),
            atom_line(2, "CA", "GLY", "A", 1, 5.0, 5.0, 5.0),
            atom_line(3, "CA", "ALA", "A", 2, 1.0, 0.0, 0.0),
        ])
        rec = parse_pdb_ca(text)
        assert len(rec) == 2
        assert rec.coords[0, 0] == 0.0
        assert rec.meta["duplicate_residues"] == 1

    def test_nonstandard_residue_maps_to_unknown(self):
        text = atom_line(1, "CA", "MSE", "A", 1, 0.0, 0.0, 0.0)
        assert parse_pdb_ca(text).aa_types[0] == UNKNOWN_AA

    def test_short_atom_line(self):
        with pytest.raises(ParseError, match="line 1"):
            parse_pdb_ca("ATOM      1  CA  GLY A   1      1.0")

    def test_malformed_coordinate(self):
        bad = atom_line(1, "CA", "GLY", "A", 1, 0.0, 0.0, 0.0).replace("   0.000", "  oops  ")
        with pytest.raises(ParseError):
            parse_pdb_ca(bad)

    def test_out_of_order_residues_sorted(self):
        text = "\n".join([
            atom_line(1, "CA", "GLY", "A", 5, 5.0, 0.0, 0.0),
            atom_line(2, "CA", "ALA", "A", 2, 2.0, 0.0, 0.0),
        ])
        rec = parse_pdb_ca(text)
        assert rec.seq_index.tolist() == [2, 5]
        assert rec.coords[0, 0] == 2.0


class TestValidation:
    def test_good_record(self):
        validate_record(make_record(), SINGLE_LABEL, 4)

    def test_label_out_of_range(self):
        with pytest.raises(SchemaError):
            validate_record(make_record(label=4), SINGLE_LABEL, 4)

    def test_multi_label_needs_vector(self):
        with pytest.raises(SchemaError):
            validate_record(make_record(label=1), MULTI_LABEL, 4)
        validate_record(make_record(label=[0, 1, 0, 1]), MULTI_LABEL, 4)

    def test_multi_label_not_binary(self):
        with pytest.raises(SchemaError):
            validate_record(make_record(label=[0, 2, 0, 0]), MULTI_LABEL, 4)

    def test_seq_index_must_increase(self):
        rec = make_record()
        bad = ProteinRecord(id="x", coords=rec.coords, aa_types=rec.aa_types,
                            seq_index=np.array([0, 1, 1, 2, 3]), label=0)
        with pytest.raises(SchemaError, match="increasing"):
            validate_record(bad, SINGLE_LABEL, 4)

    def test_masked_rows_may_be_nonfinite(self):
        rec = make_record()
        coords = rec.coords.copy()
        coords[2] = np.nan
        mask = np.ones(5, dtype=bool)
        mask[2] = False
        ok = ProteinRecord(id="x", coords=coords, aa_types=rec.aa_types,
                           seq_index=rec.seq_index, label=0, present_mask=mask)
        validate_record(ok, SINGLE_LABEL, 4)
        bad = ProteinRecord(id="x", coords=coords, aa_types=rec.aa_types,
                            seq_index=rec.seq_index, label=0)
        with pytest.raises(SchemaError, match="finite"):
            validate_record(bad, SINGLE_LABEL, 4)


class TestMasking:
    def test_masked_record_filters_and_remaps(self):
        rec = make_record(6, meta={"motif_ids": [1, 3, 4]})
        mask = np.array([True, True, False, True, True, True])
        rec = ProteinRecord(id="m", coords=rec.coords, aa_types=rec.aa_types,
                            seq_index=rec.seq_index, label=0, present_mask=mask,
                            meta=rec.meta)
        out = masked_record(rec)
        assert len(out) == 5
        # row 2 dropped, so original rows 3 and 4 are now 2 and 3
        assert out.meta["motif_ids"] == [1, 2, 3]
        assert out.present_mask.all()

    def test_all_present_is_passthrough(self):
        rec = make_record()
        assert masked_record(rec) is rec


class TestRoundTrip:
    def test_record_json_round_trip(self, tmp_path):
        rec = make_record(4, label=2, meta={"motif_ids": [0, 1]})
        path = tmp_path / "rec.json"
        save_record(rec, str(path))
        back = load_record(str(path))
        assert back.id == rec.id
        assert np.array_equal(back.coords, rec.coords)
        assert np.array_equal(back.aa_types, rec.aa_types)
        assert np.array_equal(back.seq_index, rec.seq_index)
        assert back.label == rec.label
        assert back.meta == rec.meta

    def test_dataset_round_trip(self, tmp_path):
        d = {
            "train": Dataset([make_record(rec_id="a"), make_record(rec_id="b", label=1)],
                             SINGLE_LABEL, 4, "train"),
            "test": Dataset([make_record(rec_id="c", label=3)], SINGLE_LABEL, 4, "test"),
        }
        save_dataset(d, str(tmp_path))
        back = load_dataset(str(tmp_path))
        assert sorted(back) == ["test", "train"]
        assert len(back["train"].records) == 2
        assert back["train"].num_classes == 4
        one = load_dataset(str(tmp_path), split="test")
        assert [r.id for r in one.records] == ["c"]

    def test_missing_split_is_empty(self, tmp_path):
        d = {"train": Dataset([make_record(rec_id="a")], SINGLE_LABEL, 4, "train")}
        save_dataset(d, str(tmp_path))
        val = load_dataset(str(tmp_path), split="val")
        assert val.records == [] and val.num_classes == 4

    def test_overlapping_ids_rejected(self, tmp_path):
        d = {
            "train": Dataset([make_record(rec_id="a")], SINGLE_LABEL, 4, "train"),
            "test": Dataset([make_record(rec_id="b")], SINGLE_LABEL, 4, "test"),
        }
        save_dataset(d, str(tmp_path))
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["records"][1]["file"] = manifest["records"][0]["file"]
        manifest["records"][1]["id"] = manifest["records"][0]["id"]
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(SchemaError, match="multiple splits"):
            load_dataset(str(tmp_path))

    def test_wrong_task_label_rejected_at_load(self, tmp_path):
        d = {"train": Dataset([make_record(rec_id="a")], SINGLE_LABEL, 4, "train")}
        save_dataset(d, str(tmp_path))
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["task"] = MULTI_LABEL
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(SchemaError):
            load_dataset(str(tmp_path))
