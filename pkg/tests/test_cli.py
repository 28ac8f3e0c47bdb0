import json

import pytest

from ecg import cli
from ecg.cli import run

MICRO = [
    "--set", "n_facts=4", "--set", "n_distractors=4",
    "--set", "hidden_size=16", "--set", "layers=1", "--set", "heads=2", "--set", "t=2",
    "--set", "ssl_steps=5", "--set", "batch_size=2", "--set", "n_min=2", "--set", "n_max=2",
    "--set", "budget=4", "--set", "max_new=6",
]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipeline")
    assert run(["synth", "--seed", "7", "--out", str(base / "data")] + MICRO) == 0
    assert run(
        ["train-ssl", "--corpus", str(base / "data/corpus.jsonl"), "--seed", "7", "--out", str(base / "ssl")]
        + MICRO
    ) == 0
    assert run(
        ["index", "--corpus", str(base / "data/corpus.jsonl"), "--model", str(base / "ssl"),
         "--seed", "7", "--out", str(base / "idx")] + MICRO
    ) == 0
    return base


class TestParsing:
    def test_unknown_subcommand_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run(["frobnicate", "--out", "/tmp/x"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag_exits_2(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run(["synth", "--out", str(tmp_path), "--bogus"])
        assert exc.value.code == 2

    def test_missing_input_exits_1_with_structured_error(self, tmp_path, capsys):
        code = run(["train-ssl", "--corpus", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")])
        assert code == 1
        err = json.loads(capsys.readouterr().err)
        assert set(err) == {"error", "message"}

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        code = run(["synth", "--out", str(tmp_path / "o"), "--set", "nonsense=1"])
        assert code == 1
        assert "nonsense" in capsys.readouterr().err

    def test_config_file_and_set_override(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# comment line\nn_facts=6\nn_distractors=4  # inline comment\n")
        out = tmp_path / "o"
        assert run(["synth", "--config", str(cfg), "--seed", "1", "--out", str(out),
                    "--set", "n_facts=5"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["settings"]["n_facts"] == "5"
        assert manifest["settings"]["n_distractors"] == "4"

    def test_malformed_config_line(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("this is not a setting\n")
        assert run(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
        assert "key=value" in json.loads(capsys.readouterr().err)["message"]


class TestManifest:
    def test_fields(self, pipeline):
        manifest = json.loads((pipeline / "data/manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 7
        assert len(manifest["config_hash"]) == 64
        assert manifest["version"].startswith("ecg-")
        assert manifest["settings"]["n_facts"] == "4"

    def test_out_path_not_recorded(self, pipeline):
        manifest = json.loads((pipeline / "data/manifest.json").read_text())
        assert str(pipeline / "data") not in json.dumps(manifest)


class TestSynthDeterminism:
    def test_identical_seed_identical_bytes(self, tmp_path):
        for tag in ("a", "b"):
            assert run(["synth", "--seed", "9", "--out", str(tmp_path / tag)] + MICRO) == 0
        for name in ("corpus.jsonl", "train.jsonl", "queries.jsonl", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_different_seed_differs(self, tmp_path):
        assert run(["synth", "--seed", "1", "--out", str(tmp_path / "a")] + MICRO) == 0
        assert run(["synth", "--seed", "2", "--out", str(tmp_path / "b")] + MICRO) == 0
        assert (tmp_path / "a/corpus.jsonl").read_bytes() != (tmp_path / "b/corpus.jsonl").read_bytes()


def test_chunk_command(tmp_path):
    doc = tmp_path / "doc.txt"
    doc.write_text(" ".join(f"w{i}" for i in range(47)))
    out = tmp_path / "o"
    assert run(["chunk", "--input", str(doc), "--out", str(out), "--set", "chunk_words=20"]) == 0
    lines = (out / "passages.jsonl").read_text().splitlines()
    assert len(lines) == 3


def test_search_out21_results(pipeline, tmp_path, capsys):
    out = tmp_path / "s"
    assert run(["search", "--index", str(pipeline / "idx/index.ecgs"), "--model", str(pipeline / "ssl"),
                "--query", "what is the capital", "--seed", "0", "--out", str(out),
                "--set", "k=3"] + MICRO[:-4]) == 0
    rows = [json.loads(line) for line in (out / "results.jsonl").read_text().splitlines()]
    assert [r["rank"] for r in rows] == [1, 2, 3]
    printed = capsys.readouterr().out.strip().splitlines()
    assert len(printed) == 3


def test_eval_csv_row_fields(pipeline, tmp_path):
    out = tmp_path / "e"
    assert run(["eval", "--method", "ecg", "--queries", str(pipeline / "data/queries.jsonl"),
                "--model", str(pipeline / "ssl"), "--index", str(pipeline / "idx/index.ecgs"),
                "--budget", "16", "--k", "1", "--seed", "0", "--out", str(out)] + MICRO) == 0
    lines = (out / "eval.csv").read_text().splitlines()
    assert lines[0] == "dataset,method,budget,k,em"
    dataset, method, budget, k, em = lines[1].split(",")
    assert (method, budget, k) == ("ecg", "16", "1")
    assert 0.0 <= float(em) <= 1.0
    assert (out / "eval.png").exists()
    assert (out / "records.jsonl").exists()


def test_eval_sweep_k(pipeline, tmp_path):
    out = tmp_path / "sw"
    assert run(["eval", "--method", "ecg", "--queries", str(pipeline / "data/queries.jsonl"),
                "--model", str(pipeline / "ssl"), "--index", str(pipeline / "idx/index.ecgs"),
                "--budget", "16", "--sweep-k", "1:3", "--seed", "0", "--out", str(out)] + MICRO) == 0
    lines = (out / "eval.csv").read_text().splitlines()
    assert len(lines) == 4  # header + k=1..3
    assert (out / "eval.png").exists()


def test_eval_fixed_performance_scaled_grid(pipeline, tmp_path):
    out = tmp_path / "fp"
    assert run(["eval", "--method", "ecg", "--queries", str(pipeline / "data/queries.jsonl"),
                "--model", str(pipeline / "ssl"), "--index", str(pipeline / "idx/index.ecgs"),
                "--fixed-performance", "0.0", "--seed", "0", "--out", str(out),
                "--set", "grid_start=4", "--set", "grid_stop=12", "--set", "grid_step=4"] + MICRO) == 0
    outcome = json.loads((out / "fixed_performance.json").read_text())
    assert outcome["budget"] == 4 and outcome["reached"] is True
    lines = (out / "eval.csv").read_text().splitlines()
    assert len(lines) == 4


def test_gradcheck_exit_codes(tmp_path, monkeypatch, capsys):
    from ecg.gradcheck import GradCheckReport

    passing = [("mock_loss", GradCheckReport(max_rel_err=1e-6, worst=None, tol=1e-4))]
    monkeypatch.setattr(cli, "run_suite", lambda: passing)
    out = tmp_path / "g1"
    assert run(["gradcheck", "--out", str(out)]) == 0
    assert "PASS mock_loss" in (out / "gradcheck.txt").read_text()

    failing = [("mock_loss", GradCheckReport(max_rel_err=0.5, worst=("w", 0), tol=1e-4))]
    monkeypatch.setattr(cli, "run_suite", lambda: failing)
    assert run(["gradcheck", "--out", str(tmp_path / "g2")]) == 1


def test_rerun_from_manifest_reproduces_outputs(tmp_path):
    first = tmp_path / "first"
    assert run(["synth", "--seed", "21", "--out", str(first)] + MICRO) == 0
    manifest = json.loads((first / "manifest.json").read_text())

    argv = [manifest["command"], "--seed", str(manifest["seed"]), "--out", str(tmp_path / "second")]
    for key, value in manifest["settings"].items():
        argv += ["--set", f"{key}={value}"]
    assert run(argv) == 0
    for name in ("corpus.jsonl", "train.jsonl", "queries.jsonl"):
        assert (first / name).read_bytes() == (tmp_path / "second" / name).read_bytes()
