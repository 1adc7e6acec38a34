import json
import os

import numpy as np
import pytest

from protclust import load_checkpoint, load_dataset, save_record
from protclust.cli import RUN_DEFAULTS, main, merge_run_config
from test_records import atom_line

TINY_FLAGS = ["--iters", "2", "--channels", "12,12", "--embed-dim", "12",
              "--epochs", "1", "--batch-size", "8", "--lr", "1e-3"]


def read_tree(root):
    out = {}
    for base, _, files in os.walk(root):
        for f in sorted(files):
            p = os.path.join(base, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = str(tmp_path_factory.mktemp("data") / "ds")
    rc = main(["synth", "--out", d, "--proteins", "16", "--classes", "4",
               "--chain-min", "18", "--chain-max", "24", "--motif-size", "5",
               "--noise", "0.1", "--train-frac", "0.75", "--seed", "0"])
    assert rc == 0
    return d


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_dir):
    out = str(tmp_path_factory.mktemp("run") / "out")
    rc = main(["train", "--data", data_dir, "--out", out] + TINY_FLAGS)
    assert rc == 0
    return out


class TestSynth:
    def test_deterministic_bytes(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        args = ["--proteins", "8", "--classes", "2", "--chain-min", "12",
                "--chain-max", "16", "--motif-size", "4", "--seed", "3"]
        assert main(["synth", "--out", a] + args) == 0
        assert main(["synth", "--out", b] + args) == 0
        assert read_tree(a) == read_tree(b)

    def test_split_sizes(self, data_dir, capsys):
        # splits cycle with period 10, so 16 proteins at 0.75 give 14/2
        ds = load_dataset(data_dir)
        assert len(ds["train"].records) == 14
        assert len(ds["test"].records) == 2
        labels = sorted({r.label for r in ds["train"].records})
        assert labels == [0, 1, 2, 3]

    def test_bad_classes_exits_2(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "x"), "--classes", "0"]) == 2


class TestTrain:
    def test_outputs_exist(self, run_dir):
        for name in ("checkpoint.bin", "report.json", "effective_config.json"):
            assert os.path.exists(os.path.join(run_dir, name)), name
        report = json.load(open(os.path.join(run_dir, "report.json")))
        assert report["epochs_run"] == 1
        eff = json.load(open(os.path.join(run_dir, "effective_config.json")))
        assert eff["iterations"] == 2 and eff["channels"] == [12, 12]
        assert eff["epochs"] == 1  # flag beat the default

    def test_checkpoint_carries_model_config(self, run_dir):
        _, extra = load_checkpoint(os.path.join(run_dir, "checkpoint.bin"))
        md = extra["model"]
        assert md["iterations"] == 2
        assert md["pooling_mode"] == "neural-clustering"
        assert md["num_classes"] == 4

    def test_missing_data_exits_2(self, tmp_path):
        rc = main(["train", "--data", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "o")] + TINY_FLAGS)
        assert rc == 2

    def test_pooling_baseline_recorded(self, tmp_path, data_dir):
        out = str(tmp_path / "avg")
        rc = main(["train", "--data", data_dir, "--out", out,
                   "--pooling", "average-pool-baseline"] + TINY_FLAGS)
        assert rc == 0
        _, extra = load_checkpoint(os.path.join(out, "checkpoint.bin"))
        assert extra["model"]["pooling_mode"] == "average-pool-baseline"

    def test_config_file_merge_and_flag_override(self, tmp_path, data_dir):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"epochs": 7, "lr": 0.5}))
        out = str(tmp_path / "o")
        rc = main(["train", "--data", data_dir, "--out", out, "--config", str(cfg),
                   "--lr", "1e-3"] + ["--iters", "2", "--channels", "12,12",
                                      "--embed-dim", "12", "--batch-size", "8",
                                      "--epochs", "1"])
        assert rc == 0
        eff = json.load(open(os.path.join(out, "effective_config.json")))
        assert eff["lr"] == 1e-3  # flag wins over config file

    def test_unknown_config_key_exits_2(self, tmp_path, data_dir):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"leerning_rate": 0.1}))
        rc = main(["train", "--data", data_dir, "--out", str(tmp_path / "o"),
                   "--config", str(cfg)] + TINY_FLAGS)
        assert rc == 2

    def test_merge_defaults_complete(self):
        class A:
            config = None
        merged = merge_run_config(A())
        assert set(merged) == set(RUN_DEFAULTS)


class TestEval:
    def test_eval_prints_and_writes(self, run_dir, data_dir, tmp_path, capsys):
        out = str(tmp_path / "metrics.json")
        rc = main(["eval", "--checkpoint", os.path.join(run_dir, "checkpoint.bin"),
                   "--data", data_dir, "--split", "test", "--out", out])
        assert rc == 0
        printed = json.loads(capsys.readouterr().out)
        saved = json.load(open(out))
        assert printed == saved
        assert 0.0 <= saved["accuracy"] <= 1.0

    def test_missing_checkpoint_exits_2(self, data_dir, tmp_path):
        rc = main(["eval", "--checkpoint", str(tmp_path / "no.bin"),
                   "--data", data_dir])
        assert rc == 2

    def test_empty_split_exits_2(self, run_dir, data_dir):
        rc = main(["eval", "--checkpoint", os.path.join(run_dir, "checkpoint.bin"),
                   "--data", data_dir, "--split", "val"])
        assert rc == 2


class TestTrace:
    def test_trace_json_and_svg(self, run_dir, data_dir, tmp_path, capsys):
        ds = load_dataset(data_dir)
        rec = ds["test"].records[0]
        rec_path = str(tmp_path / "rec.json")
        save_record(rec, rec_path)
        out = str(tmp_path / "trace.json")
        svg_prefix = str(tmp_path / "pic")
        rc = main(["trace", "--checkpoint", os.path.join(run_dir, "checkpoint.bin"),
                   "--record", rec_path, "--out", out, "--svg", svg_prefix])
        assert rc == 0
        doc = json.load(open(out))
        assert len(doc["iterations"]) == 2
        n = doc["num_nodes"]
        assert len(doc["iterations"][0]["scores"]) == n
        for it in range(1, 3):
            svg = open(f"{svg_prefix}_it{it}.svg").read()
            assert svg.count("<circle") == len(doc["iterations"][it - 1]["selected"])

    def test_trace_from_pdb(self, run_dir, tmp_path):
        lines = [atom_line(i + 1, "CA", "GLY", "A", i + 1,
                           float(3.8 * i), float((i % 3)), 0.0) for i in range(12)]
        pdb = tmp_path / "toy.pdb"
        pdb.write_text("\n".join(lines) + "\n")
        out = str(tmp_path / "t.json")
        rc = main(["trace", "--checkpoint", os.path.join(run_dir, "checkpoint.bin"),
                   "--record", str(pdb), "--out", out])
        assert rc == 0
        assert json.load(open(out))["num_nodes"] == 12

    def test_missing_checkpoint_exits_2(self, tmp_path):
        rc = main(["trace", "--checkpoint", str(tmp_path / "no.bin"),
                   "--record", str(tmp_path / "r.json"), "--out", str(tmp_path / "t")])
        assert rc == 2


class TestSweep:
    def test_omega_grid_three_rows(self, data_dir, tmp_path, capsys):
        out = str(tmp_path / "sweep.csv")
        rc = main(["sweep", "--data", data_dir, "--out", out,
                   "--omega", "0.2,0.4,0.6"] + TINY_FLAGS)
        assert rc == 0
        rows = open(out).read().strip().splitlines()
        assert len(rows) == 4  # header + one per keep fraction
        assert rows[0].startswith("radius,keep_fraction,")
        assert os.path.exists(out + ".config.json")
        assert "swept 3 cells" in capsys.readouterr().out

    def test_unknown_mode_exits_2(self, data_dir, tmp_path):
        rc = main(["sweep", "--data", data_dir, "--out", str(tmp_path / "s.csv"),
                   "--modes", "quantum-pool"] + TINY_FLAGS)
        assert rc == 2


class TestGradcheck:
    def test_pass_and_fail_exit_codes(self, capsys):
        assert main(["gradcheck", "--nodes", "10", "--seed", "0"]) == 0
        assert "max relative error" in capsys.readouterr().out
        assert main(["gradcheck", "--nodes", "10", "--seed", "0",
                     "--tol", "1e-15"]) == 1


class TestParser:
    def test_no_command_is_usage_error(self):
        with pytest.raises(SystemExit):
            main([])

    def test_unknown_flag_is_usage_error(self, data_dir):
        with pytest.raises(SystemExit):
            main(["train", "--data", data_dir, "--out", "x", "--warp", "9"])
