import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from hiformer import cli
from hiformer.model import RankingModel
from hiformer.preprocessing import read_csv

SMALL = ["--heads", "2", "--dk", "4", "--dv", "4", "--rk", "8", "--rv", "8", "--d", "8"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen") / "data"
    assert run("gen", "--out", out, "--n", 600, "--seed", 7, "--vocab", 20) == 0
    return out


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    runs = {}
    for layer in ("homo", "hetero", "hiformer"):
        out = tmp_path_factory.mktemp(layer)
        assert run("train", "--data", data_dir, "--out", out, "--layer", layer, "--epochs", 1, *SMALL) == 0
        runs[layer] = out
    return runs


class TestGen:
    def test_files_and_checksums(self, data_dir):
        names = {p.name for p in data_dir.iterdir()}
        assert {"train.csv", "valid.csv", "test.csv", "spec.json", "schema.json", "checksums.sha256",
                "config.json"} <= names
        for line in (data_dir / "checksums.sha256").read_text().splitlines():
            h, name = line.split("  ")
            assert digest(data_dir / name) == h

    def test_split_sizes(self, data_dir):
        assert [len(read_csv(data_dir / f"{s}.csv")) for s in ("train", "valid", "test")] == [500, 50, 50]

    def test_same_seed_same_checksums(self, tmp_path):
        for k in (1, 2):
            assert run("gen", "--out", tmp_path / str(k), "--n", 100, "--seed", 7) == 0
        assert (tmp_path / "1" / "checksums.sha256").read_bytes() == (tmp_path / "2" / "checksums.sha256").read_bytes()

    def test_default_row_count(self):
        args = cli.build_parser().parse_args(["gen", "--out", "x"])
        assert args.n == 240_000

    def test_zero_pairs_is_config_error(self, tmp_path):
        assert run("gen", "--out", tmp_path, "--n", 100, "--pairs", 0) == 2

    def test_refuses_overwrite(self, tmp_path):
        assert run("gen", "--out", tmp_path, "--n", 24) == 0
        assert run("gen", "--out", tmp_path, "--n", 24) == 2
        assert run("gen", "--out", tmp_path, "--n", 24, "--force") == 0

    def test_unknown_flag(self, tmp_path, capsys):
        assert run("gen", "--out", tmp_path, "--bogus") == 2
        assert "unrecognized arguments" in capsys.readouterr().err


class TestTrain:
    def test_outputs(self, trained):
        for out in trained.values():
            assert (out / "checkpoint.bin").exists() and (out / "config.json").exists()
            recs = [json.loads(x) for x in (out / "metrics.jsonl").read_text().splitlines()]
            assert [r["epoch"] for r in recs] == [1]
            assert set(recs[0]) == {"epoch", "train_loss", "valid_auc", "valid_logloss"}
            assert "wall_ms" in json.loads((out / "run_meta.json").read_text())

    def test_stdout_has_wall_time(self, data_dir, tmp_path, capsys):
        assert run("train", "--data", data_dir, "--out", tmp_path, "--layer", "homo", "--epochs", 1, *SMALL) == 0
        rec = json.loads(capsys.readouterr().out.splitlines()[0])
        assert rec["wall_ms"] > 0

    def test_zero_epochs_writes_initial_checkpoint(self, data_dir, tmp_path):
        assert run("train", "--data", data_dir, "--out", tmp_path, "--epochs", 0, *SMALL) == 0
        assert (tmp_path / "checkpoint.bin").exists()
        assert (tmp_path / "metrics.jsonl").read_text() == ""

    def test_prune_last_task_encoding(self, data_dir, tmp_path):
        assert run("train", "--data", data_dir, "--out", tmp_path, "--layer", "hiformer", "--prune-last",
                   "--epochs", 1, *SMALL) == 0
        model = RankingModel.load(tmp_path / "checkpoint.bin")
        assert model.cfg.prune_last
        assert model.tower_w1.shape[0] == model.schema.task_count * model.cfg.d

    def test_schema_mismatch_is_data_error(self, data_dir, tmp_path):
        schema = json.loads((data_dir / "schema.json").read_text())
        schema["dense_count"] += 1
        bad = tmp_path / "schema.json"
        bad.write_text(json.dumps(schema))
        assert run("train", "--data", data_dir, "--schema", bad, "--out", tmp_path / "o", *SMALL) == 3

    def test_missing_data_is_data_error(self, tmp_path):
        assert run("train", "--data", tmp_path / "none", "--out", tmp_path / "o") == 3

    def test_deterministic(self, data_dir, tmp_path):
        for k in (1, 2):
            assert run("train", "--data", data_dir, "--out", tmp_path / str(k), "--layer", "hetero",
                       "--epochs", 2, "--seed", 3, *SMALL) == 0
        for name in ("checkpoint.bin", "metrics.jsonl"):
            assert digest(tmp_path / "1" / name) == digest(tmp_path / "2" / name)


class TestEval:
    def test_eval_and_determinism(self, trained, data_dir, tmp_path):
        for k in (1, 2):
            assert run("eval", "--checkpoint", trained["hetero"] / "checkpoint.bin", "--data", data_dir,
                       "--out", tmp_path / str(k)) == 0
        res = json.loads((tmp_path / "1" / "eval.json").read_text())
        assert 0.0 <= res["auc"] <= 1.0 and res["rows"] == 50
        assert digest(tmp_path / "1" / "eval.json") == digest(tmp_path / "2" / "eval.json")

    def test_incompatible_checkpoint(self, data_dir, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b'{"format_version": 99}\n')
        assert run("eval", "--checkpoint", bad, "--data", data_dir, "--out", tmp_path / "o") == 3

    def test_missing_checkpoint(self, data_dir, tmp_path):
        assert run("eval", "--checkpoint", tmp_path / "nope.bin", "--data", data_dir, "--out", tmp_path) == 3


class TestCost:
    @pytest.mark.parametrize("fmt", ["csv", "json"])
    def test_reports(self, tmp_path, fmt):
        assert run("cost", "--out", tmp_path, "--length", 10, "--d", 8, "--heads", 2, "--dk", 4, "--dv", 4,
                   "--rk", 4, "--rv", 4, "--format", fmt) == 0
        text = (tmp_path / f"cost.{fmt}").read_text()
        if fmt == "json":
            rows = [json.loads(x) for x in text.splitlines()]
        else:
            rows = list(csv.DictReader(text.splitlines()))
        dense = next(r for r in rows if r["name"] == "hiformer-dense" and r["convention"] == "mac")
        assert int(dense["flops.qkv_projection"]) == 19200
        assert int(dense["flops.ffn"]) == 5120
        names = {r["name"] for r in rows}
        assert {"hiformer-dense", "hiformer-lowrank", "homo", "hetero"} <= names

    def test_schema_sets_length(self, data_dir, tmp_path):
        assert run("cost", "--out", tmp_path, "--schema", data_dir / "schema.json", "--format", "json") == 0
        row = json.loads((tmp_path / "cost.json").read_text().splitlines()[0])
        assert row["length"] == 13


class TestBench:
    def test_table(self, tmp_path):
        assert run("bench", "--out", tmp_path, "--lengths", 4, 8, "--batch", 2, "--repeats", 1, *SMALL) == 0
        rows = list(csv.DictReader((tmp_path / "bench.csv").read_text().splitlines()))
        assert len(rows) == 6
        assert all(r["low_confidence"] == "True" for r in rows)


class TestDumpAttention:
    def test_grids(self, trained, data_dir, tmp_path):
        assert run("dump-attention", "--checkpoint", trained["hetero"] / "checkpoint.bin", "--data", data_dir,
                   "--out", tmp_path, "--n", 20) == 0
        rows = list(csv.DictReader((tmp_path / "attention_layer0_head0.csv").read_text().splitlines()))
        assert len(rows) == 13
        sums = np.array([float(r["row_sum"]) for r in rows])
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)
        summary = json.loads((tmp_path / "attention_summary.json").read_text())
        assert 0.0 <= summary["off_diagonal_mass"][0] <= 1.0

    def test_zero_key_init_is_uniform(self, trained, data_dir):
        model = RankingModel.load(trained["hetero"] / "checkpoint.bin")
        model.layers[0].wk.data[...] = 0.0
        grid = cli.attention_grids(model, read_csv(data_dir / "test.csv")[np.arange(10)])[0]
        np.testing.assert_allclose(grid, 1.0 / 13, rtol=1e-6)

    def test_empty_batch(self, trained, data_dir, tmp_path):
        assert run("dump-attention", "--checkpoint", trained["hetero"] / "checkpoint.bin", "--data", data_dir,
                   "--out", tmp_path, "--n", 0) == 3

    def test_off_diagonal_mass(self):
        assert cli.off_diagonal_mass(np.eye(3)[None]) == 0.0
        assert cli.off_diagonal_mass(np.full((2, 4, 4), 0.25)) == pytest.approx(0.75)


class TestSvd:
    def test_report(self, trained, tmp_path):
        assert run("svd", "--checkpoint", trained["hiformer"] / "checkpoint.bin", "--out", tmp_path) == 0
        values = [float(r["singular_value"])
                  for r in csv.DictReader((tmp_path / "singular_values.csv").read_text().splitlines())]
        assert values == sorted(values, reverse=True)
        assert sum(v > 1e-8 * values[0] for v in values) <= 8

    def test_needs_hiformer(self, trained, tmp_path):
        assert run("svd", "--checkpoint", trained["homo"] / "checkpoint.bin", "--out", tmp_path) == 2
