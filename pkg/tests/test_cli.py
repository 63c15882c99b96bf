"""End-to-end CLI runs, in process via main(argv)."""

import csv
import json
import os

import numpy as np
import pytest

from subformer.cli import main
from subformer.datagen import make_molecules, write_corpus


def run(capsys, *argv):
    rc = main(list(argv))
    captured = capsys.readouterr()
    return rc, captured.out, captured.err


def last_json(out: str):
    return json.loads(out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Corpus, config, and one trained run shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    write_corpus(root / "corpus.jsonl", make_molecules(12, seed=11))
    (root / "config.json").write_text(json.dumps({
        "model": {"mp_layers": 1, "mp_hidden": 8, "transformer_layers": 1,
                  "transformer_hidden": 8, "heads": 2, "ffn_hidden": 8,
                  "readout_hidden": 8, "attn_dropout": 0.0},
        "train": {"epochs": 3, "lr": 0.01, "batch_size": 8,
                  "split": [0.8, 0.2, 0.0], "seed": 0},
    }))
    rc = main(["train", "--config", str(root / "config.json"),
               "--data", str(root / "corpus.jsonl"),
               "--out-dir", str(root / "run")])
    assert rc == 0
    return root


class TestParse:
    def test_single_smiles(self, capsys):
        rc, out, _ = run(capsys, "parse", "--smiles", "CCO")
        assert rc == 0
        payload = last_json(out)
        assert payload["num_nodes"] == 3
        assert payload["num_edges"] == 2
        assert len(payload["nodes"]) == 3

    def test_corpus_roundtrip(self, capsys, workdir, tmp_path):
        explicit = tmp_path / "explicit.jsonl"
        rc, out, _ = run(capsys, "parse",
                         "--input", str(workdir / "corpus.jsonl"),
                         "--output", str(explicit))
        assert rc == 0
        payload = last_json(out)
        assert payload["records"] == 12
        assert payload["skipped"] == 0
        assert payload["task_type"] == "regression"
        assert "C" in payload["atom_types"]
        lines = explicit.read_text().splitlines()
        assert json.loads(lines[0]) == {"task_type": "regression", "tasks": 1}
        first = json.loads(lines[1])
        assert {"id", "nodes", "edges", "targets"} <= set(first)

    def test_bad_smiles_is_json_error(self, capsys):
        rc, out, err = run(capsys, "parse", "--smiles", "C1CC")
        assert rc == 1
        assert out == ""
        payload = json.loads(err)
        assert payload["error"] == "UnmatchedRingClosure"
        assert "offset" in payload["message"]


class TestDecompose:
    def test_single_smiles_with_dot(self, capsys, tmp_path):
        dot_dir = tmp_path / "dots"
        rc, out, _ = run(capsys, "decompose", "--smiles", "CC(C)(C)C",
                         "--dot-dir", str(dot_dir))
        assert rc == 0
        payload = last_json(out)
        assert len(payload["clusters"]) == 5
        kinds = sorted(c["kind"] for c in payload["clusters"])
        assert kinds == ["bond"] * 4 + ["singleton"]
        dot = (dot_dir / "molecule.dot").read_text()
        assert dot.startswith("graph junction_tree {")

    def test_corpus_to_file(self, capsys, workdir, tmp_path):
        out_path = tmp_path / "decomps.jsonl"
        rc, _, _ = run(capsys, "decompose",
                       "--input", str(workdir / "corpus.jsonl"),
                       "--output", str(out_path))
        assert rc == 0
        lines = [json.loads(l) for l in out_path.read_text().splitlines()]
        assert len(lines) == 12
        assert all("clusters" in l and "id" in l for l in lines)
        assert lines[0]["id"] == "mol00000"


class TestTrain:
    def test_artifacts_and_summary(self, capsys, workdir):
        # the module fixture already trained; rerun to capture the summary
        rc, out, _ = run(capsys, "train",
                         "--config", str(workdir / "config.json"),
                         "--data", str(workdir / "corpus.jsonl"),
                         "--out-dir", str(workdir / "run2"))
        assert rc == 0
        payload = last_json(out)
        assert payload["epochs"] == 3
        assert payload["best_epoch"] in (1, 2, 3)
        assert np.isfinite(payload["final_train_loss"])
        ckpt = json.load(open(payload["checkpoint"]))
        assert ckpt["meta"]["train"]["epochs"] == 3
        with open(payload["log"]) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "split", "loss", "metric", "lr", "seconds"]
        assert len(rows) == 1 + 6  # train + valid rows for 3 epochs

    def test_reruns_are_byte_identical(self, workdir):
        a = (workdir / "run" / "checkpoint.json").read_bytes()
        b = (workdir / "run2" / "checkpoint.json").read_bytes()
        assert a == b

    def test_overrides_apply(self, capsys, workdir, tmp_path):
        rc, out, _ = run(capsys, "train",
                         "--config", str(workdir / "config.json"),
                         "--data", str(workdir / "corpus.jsonl"),
                         "--out-dir", str(tmp_path / "o"),
                         "train.epochs=1", "model.heads=1")
        assert rc == 0
        payload = last_json(out)
        assert payload["epochs"] == 1
        meta = json.load(open(payload["checkpoint"]))["meta"]
        assert meta["model"]["heads"] == 1
        assert meta["train"]["epochs"] == 1

    def test_unknown_override_field(self, capsys, workdir, tmp_path):
        rc, _, err = run(capsys, "train",
                         "--config", str(workdir / "config.json"),
                         "--data", str(workdir / "corpus.jsonl"),
                         "--out-dir", str(tmp_path / "o"),
                         "model.bogus=3")
        assert rc == 1
        payload = json.loads(err)
        assert payload["error"] == "CliError"
        assert payload["path"] == "model.bogus"
        assert "unknown config field" in payload["message"]

    def test_malformed_override(self, capsys, workdir, tmp_path):
        rc, _, err = run(capsys, "train",
                         "--config", str(workdir / "config.json"),
                         "--data", str(workdir / "corpus.jsonl"),
                         "--out-dir", str(tmp_path / "o"), "train.lr")
        assert rc == 1
        assert "not key=value" in json.loads(err)["message"]

    def test_no_nesting_under_scalar_field(self, capsys, workdir, tmp_path):
        rc, _, err = run(capsys, "train",
                         "--config", str(workdir / "config.json"),
                         "--data", str(workdir / "corpus.jsonl"),
                         "--out-dir", str(tmp_path / "o"), "train.lr.x=1")
        assert rc == 1
        assert "has no nested keys" in json.loads(err)["message"]

    def test_unknown_top_level_config_key(self, capsys, workdir, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"model": {}, "train": {}, "extra": 1}))
        rc, _, err = run(capsys, "train", "--config", str(bad),
                         "--data", str(workdir / "corpus.jsonl"),
                         "--out-dir", str(tmp_path / "o"))
        assert rc == 1
        assert "unknown top-level config keys" in json.loads(err)["message"]

    def test_missing_required_flag_is_usage_error(self, capsys):
        rc, _, err = run(capsys, "train", "--data", "x.jsonl")
        assert rc == 2
        assert json.loads(err)["error"] == "UsageError"


class TestEval:
    def test_mae_on_training_corpus(self, capsys, workdir):
        rc, out, _ = run(capsys, "eval",
                         "--checkpoint", str(workdir / "run/checkpoint.json"),
                         "--data", str(workdir / "corpus.jsonl"),
                         "--metric", "mae")
        assert rc == 0
        payload = last_json(out)
        assert payload["records"] == 12
        assert payload["metric"] == "mae"
        assert np.isfinite(payload["value"])

    def test_explicit_graph_corpus_scores_identically(self, capsys, workdir,
                                                      tmp_path):
        """parse --output emits vocab-indexed graphs the checkpoint accepts."""
        explicit = tmp_path / "explicit.jsonl"
        run(capsys, "parse", "--input", str(workdir / "corpus.jsonl"),
            "--output", str(explicit))
        args = ("--checkpoint", str(workdir / "run/checkpoint.json"),
                "--metric", "mae")
        _, out1, _ = run(capsys, "eval", "--data",
                         str(workdir / "corpus.jsonl"), *args)
        _, out2, _ = run(capsys, "eval", "--data", str(explicit), *args)
        assert last_json(out1)["value"] == last_json(out2)["value"]

    def test_invalid_metric_choice(self, capsys, workdir):
        rc, _, err = run(capsys, "eval",
                         "--checkpoint", str(workdir / "run/checkpoint.json"),
                         "--data", str(workdir / "corpus.jsonl"),
                         "--metric", "r2")
        assert rc == 2
        assert json.loads(err)["error"] == "UsageError"

    def test_unseen_atom_type(self, capsys, workdir, tmp_path):
        bad = tmp_path / "bad.jsonl"
        with open(bad, "w") as fh:
            fh.write(json.dumps({"tasks": 1, "task_type": "regression"}) + "\n")
            fh.write(json.dumps({"id": "m0", "smiles": "CCP",
                                 "targets": [0.1]}) + "\n")
        rc, _, err = run(capsys, "eval",
                         "--checkpoint", str(workdir / "run/checkpoint.json"),
                         "--data", str(bad), "--metric", "mae")
        assert rc == 1
        assert "not in the checkpoint vocabulary" in json.loads(err)["message"]

    def test_task_type_mismatch(self, capsys, workdir, tmp_path):
        bad = tmp_path / "cls.jsonl"
        with open(bad, "w") as fh:
            fh.write(json.dumps({"tasks": 1,
                                 "task_type": "classification"}) + "\n")
            fh.write(json.dumps({"id": "m0", "smiles": "CC",
                                 "targets": [1]}) + "\n")
        rc, _, err = run(capsys, "eval",
                         "--checkpoint", str(workdir / "run/checkpoint.json"),
                         "--data", str(bad), "--metric", "mae")
        assert rc == 1
        assert "does not match checkpoint" in json.loads(err)["message"]


class TestDiagnose:
    def test_all_instruments(self, capsys, workdir, tmp_path):
        out_dir = tmp_path / "diag"
        rc, out, _ = run(capsys, "diagnose",
                         "--checkpoint", str(workdir / "run/checkpoint.json"),
                         "--data", str(workdir / "corpus.jsonl"),
                         "--out-dir", str(out_dir),
                         "--energy", "--jacobian", "0", "--hops")
        assert rc == 0
        payload = last_json(out)
        assert set(payload) == {"energy", "jacobian", "hops"}
        energy = open(payload["energy"]).read().splitlines()
        assert energy[0] == "layer,energy"
        assert len(energy) == 1 + 2  # 1 encoder layer -> input + 1 snapshot
        jac = json.load(open(payload["jacobian"]))
        assert jac["ref_node"] == 0
        assert len(jac["norms"]) == len(jac["over_squashed"])
        assert all(n >= 0 for n in jac["norms"])
        hops = open(payload["hops"]).read().splitlines()
        assert hops[0] == "hops,count"

    def test_requires_an_instrument(self, capsys, workdir, tmp_path):
        rc, _, err = run(capsys, "diagnose",
                         "--checkpoint", str(workdir / "run/checkpoint.json"),
                         "--data", str(workdir / "corpus.jsonl"),
                         "--out-dir", str(tmp_path / "d"))
        assert rc == 1
        assert "nothing to do" in json.loads(err)["message"]

    def test_molecule_index_out_of_range(self, capsys, workdir, tmp_path):
        rc, _, err = run(capsys, "diagnose",
                         "--checkpoint", str(workdir / "run/checkpoint.json"),
                         "--data", str(workdir / "corpus.jsonl"),
                         "--out-dir", str(tmp_path / "d"),
                         "--energy", "--molecule", "99")
        assert rc == 1
        assert json.loads(err)["error"] == "IndexError"


class TestAttention:
    def test_export_files(self, capsys, workdir, tmp_path):
        prefix = tmp_path / "att" / "mol0"
        rc, out, _ = run(capsys, "attention",
                         "--checkpoint", str(workdir / "run/checkpoint.json"),
                         "--data", str(workdir / "corpus.jsonl"),
                         "--molecule", "0", "--out-prefix", str(prefix))
        assert rc == 0
        payload = last_json(out)
        data = json.load(open(payload["json"]))
        rows = np.array(data["last_layer_mean"])
        np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-4)
        assert os.path.exists(payload["tree_dot"])
        assert os.path.exists(payload["graph_dot"])


class TestWlTest:
    def test_verdicts(self, capsys, tmp_path):
        pairs = tmp_path / "pairs.jsonl"
        with open(pairs, "w") as fh:
            fh.write(json.dumps({
                "pair_id": "decalin_bicyclopentyl",
                "left": {"smiles": "C1CCC2CCCCC2C1"},
                "right": {"smiles": "C1CCC(C1)C1CCCC1"}}) + "\n")
            fh.write(json.dumps({
                "pair_id": "c5_p5",
                "left": {"nodes": [0, 0, 0, 0, 0],
                         "edges": [[0, 1, 0], [1, 2, 0], [2, 3, 0],
                                   [3, 4, 0], [0, 4, 0]]},
                "right": {"nodes": [0, 0, 0, 0, 0],
                          "edges": [[0, 1, 0], [1, 2, 0], [2, 3, 0],
                                    [3, 4, 0]]}}) + "\n")
        out_path = tmp_path / "verdicts.jsonl"
        rc, _, _ = run(capsys, "wl-test", "--pairs", str(pairs),
                       "--output", str(out_path))
        assert rc == 0
        lines = [json.loads(l) for l in out_path.read_text().splitlines()]
        by_id = {l["pair_id"]: l for l in lines}
        assert by_id["decalin_bicyclopentyl"]["wl"] == "Indistinguishable"
        assert by_id["decalin_bicyclopentyl"]["jt_wl"] == "Separated"
        assert by_id["c5_p5"]["wl"] == "Separated"

    def test_stdout_and_default_pair_id(self, capsys, tmp_path):
        pairs = tmp_path / "pairs.jsonl"
        pairs.write_text(json.dumps({"left": {"smiles": "CC"},
                                     "right": {"smiles": "CC"}}) + "\n")
        rc, out, _ = run(capsys, "wl-test", "--pairs", str(pairs))
        assert rc == 0
        line = json.loads(out.strip())
        assert line["pair_id"] == "1"
        assert line["wl"] == "Indistinguishable"

    def test_bad_pair_spec(self, capsys, tmp_path):
        pairs = tmp_path / "pairs.jsonl"
        pairs.write_text(json.dumps({"left": {}, "right": {}}) + "\n")
        rc, _, err = run(capsys, "wl-test", "--pairs", str(pairs))
        assert rc == 1
        assert "needs smiles or nodes/edges" in json.loads(err)["message"]


class TestHops:
    def test_stdout_csv(self, capsys, workdir):
        rc, out, _ = run(capsys, "hops", "--input",
                         str(workdir / "corpus.jsonl"))
        assert rc == 0
        lines = out.strip().splitlines()
        assert lines[0] == "hops,count"
        assert all("," in l for l in lines[1:])

    def test_file_output(self, capsys, workdir, tmp_path):
        out_csv = tmp_path / "hops.csv"
        rc, out, _ = run(capsys, "hops", "--input",
                         str(workdir / "corpus.jsonl"),
                         "--output", str(out_csv))
        assert rc == 0
        assert last_json(out)["histogram"] == str(out_csv)
        assert out_csv.read_text().startswith("hops,count")


class TestWiring:
    def test_unknown_command(self, capsys):
        rc, _, err = run(capsys, "frobnicate")
        assert rc == 2
        assert json.loads(err)["error"] == "UsageError"

    def test_help_documents_config_keys(self, capsys):
        rc = main(["--help"])
        out = capsys.readouterr().out
        assert rc == 0
        for key in ("model.padding_dim", "model.pe.kinds", "train.rop_patience",
                    "train.threads"):
            assert key in out

    def test_missing_file_is_clean_error(self, capsys):
        rc, _, err = run(capsys, "hops", "--input", "/nonexistent.jsonl")
        assert rc == 1
        assert json.loads(err)["error"] == "CorpusError"
