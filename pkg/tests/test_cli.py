"""End-to-end tests for the command-line interface."""

import json
from pathlib import Path

import pytest
from typer.testing import CliRunner

from src.cli import app
from src.errors import NumericError
from src.training import Trainer

runner = CliRunner()

_RUN_CONFIG = {
    "model": {
        "d_model": 8,
        "n_heads": 2,
        "ffn_dim": 16,
        "n_enc_layers": 1,
        "n_dec_layers": 1,
        "max_text_tokens": 64,
        "max_decode_len": 4,
    },
    "train": {"total_steps": 4, "warmup_steps": 1, "batch_size": 2, "eval_every": 2, "keep_top_k": 2},
    "decode": {"beam_size": 2},
}


@pytest.fixture
def corpus(tmp_path: Path) -> Path:
    result = runner.invoke(app, ["synth", "--out", str(tmp_path / "data"), "--docs", "3", "--seed", "5"])
    assert result.exit_code == 0, result.output
    return tmp_path / "data" / "corpus.jsonl"


@pytest.fixture
def run_config(tmp_path: Path) -> Path:
    path = tmp_path / "run.json"
    path.write_text(json.dumps(_RUN_CONFIG))
    return path


def _train(corpus: Path, config: Path, out: Path, *extra: str) -> None:
    result = runner.invoke(
        app,
        ["train", "--data", str(corpus), "--out", str(out), "--config", str(config), *extra],
    )
    assert result.exit_code == 0, result.output


def _read_jsonl(path: Path) -> list[dict[str, object]]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


class TestDataCommands:
    """Tests for synth, oracle and teacher-scores."""

    def test_synth_writes_corpus_and_manifest(self, corpus: Path) -> None:
        """Three documents and a run manifest."""
        assert len(_read_jsonl(corpus)) == 3
        manifest = json.loads((corpus.parent / "run_manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 5

    def test_oracle_traces_increase(self, corpus: Path, tmp_path: Path) -> None:
        """Every oracle trace is strictly increasing."""
        result = runner.invoke(app, ["oracle", "--data", str(corpus), "--out", str(tmp_path / "o")])
        assert result.exit_code == 0, result.output
        rows = _read_jsonl(tmp_path / "o" / "oracle.jsonl")
        assert len(rows) == 3
        for row in rows:
            trace = row["trace"]
            assert isinstance(trace, list) and trace
            assert all(b > a for a, b in zip(trace, trace[1:], strict=False))

    def test_teacher_scores(self, corpus: Path, tmp_path: Path) -> None:
        """The mock teacher scores every image of every document."""
        out = tmp_path / "t"
        result = runner.invoke(
            app, ["teacher-scores", "--data", str(corpus), "--out", str(out), "--threads", "2"]
        )
        assert result.exit_code == 0, result.output
        rows = _read_jsonl(out / "teacher_scores.jsonl")
        docs = _read_jsonl(corpus)
        assert [r["id"] for r in rows] == [d["id"] for d in docs]
        for row, doc in zip(rows, docs, strict=True):
            assert isinstance(row["scores"], list) and isinstance(doc["images"], list)
            assert len(row["scores"]) == len(doc["images"])

    def test_build_vocab(self, corpus: Path, tmp_path: Path) -> None:
        """The vocabulary file opens with the reserved tokens."""
        result = runner.invoke(app, ["build-vocab", "--data", str(corpus), "--out", str(tmp_path / "v")])
        assert result.exit_code == 0, result.output
        tokens = json.loads((tmp_path / "v" / "vocab.json").read_text())["tokens"]
        assert tokens[0] == "<pad>"


class TestPipeline:
    """Train, summarize, evaluate and analyze on a tiny corpus."""

    def test_full_pipeline(self, corpus: Path, run_config: Path, tmp_path: Path) -> None:
        """Each stage consumes the previous stage's files."""
        train_out = tmp_path / "train"
        _train(corpus, run_config, train_out)
        assert (train_out / "run_manifest.json").exists()
        assert (train_out / "last" / "manifest.json").exists()
        assert json.loads((train_out / "registry.json").read_text())

        summary_out = tmp_path / "summarize"
        result = runner.invoke(
            app,
            [
                "summarize", "--data", str(corpus), "--out", str(summary_out),
                "--checkpoint", str(train_out / "last"), "--vocab", str(train_out / "vocab.json"),
                "--config", str(run_config), "--topk-images", "1",
            ],
        )
        assert result.exit_code == 0, result.output
        predictions = _read_jsonl(summary_out / "predictions.jsonl")
        assert len(predictions) == 3
        for pred in predictions:
            assert isinstance(pred["images"], list) and len(pred["images"]) == 1
            extractive = pred["extractive"]
            assert isinstance(extractive, list) and len(extractive) <= 3
            assert extractive == sorted(extractive)

        eval_out = tmp_path / "evaluate"
        pred_file = str(summary_out / "predictions.jsonl")
        result = runner.invoke(
            app,
            [
                "evaluate", "--data", str(corpus), "--out", str(eval_out),
                "--predictions", pred_file, "--predictions", pred_file, "--teacher", "mock",
            ],
        )
        assert result.exit_code == 0, result.output
        report = json.loads((eval_out / "report.json").read_text())
        assert len(report["runs"]) == 2
        assert report["mean"]["abstractive"] == report["runs"][0]["abstractive"]
        assert report["mean"]["msim"] is not None

        ngram_out = tmp_path / "ngrams"
        result = runner.invoke(
            app,
            ["analyze-ngrams", "--data", str(corpus), "--out", str(ngram_out), "--predictions", pred_file],
        )
        assert result.exit_code == 0, result.output
        curve = json.loads((ngram_out / "novel_ngrams.json").read_text())
        assert [p["n"] for p in curve] == [1, 2, 3, 4]

        viz_out = tmp_path / "viz"
        result = runner.invoke(
            app,
            [
                "visualize", "--data", str(corpus), "--out", str(viz_out),
                "--checkpoint", str(train_out / "last"), "--vocab", str(train_out / "vocab.json"),
            ],
        )
        assert result.exit_code == 0, result.output
        assert len(_read_jsonl(viz_out / "importance.jsonl")) == 3

    def test_training_is_reproducible(self, corpus: Path, run_config: Path, tmp_path: Path) -> None:
        """Two runs with the same seed write byte-identical parameters."""
        _train(corpus, run_config, tmp_path / "a", "--seed", "3")
        _train(corpus, run_config, tmp_path / "b", "--seed", "3")
        first = (tmp_path / "a" / "last" / "tensors.bin").read_bytes()
        assert first == (tmp_path / "b" / "last" / "tensors.bin").read_bytes()

    def test_ablation_recorded(self, corpus: Path, run_config: Path, tmp_path: Path) -> None:
        """The ablation reaches the manifest and the stored model config."""
        _train(corpus, run_config, tmp_path / "a", "--ablation", "no-both", "--steps", "2")
        manifest = json.loads((tmp_path / "a" / "run_manifest.json").read_text())
        assert manifest["ablation"] == "no-both"
        stored = json.loads((tmp_path / "a" / "last" / "manifest.json").read_text())["config"]
        assert stored["visual_guide"] is False and stored["use_ext_loss"] is False


class TestExitCodes:
    """Tests for error reporting."""

    def test_unknown_ablation(self, corpus: Path, run_config: Path, tmp_path: Path) -> None:
        """An unknown ablation exits 1 with a one-line message."""
        result = runner.invoke(
            app,
            [
                "train", "--data", str(corpus), "--out", str(tmp_path / "x"),
                "--config", str(run_config), "--ablation", "no-text",
            ],
        )
        assert result.exit_code == 1
        assert "error: unknown ablation" in result.output

    def test_missing_data(self, tmp_path: Path) -> None:
        """A missing dataset exits 1."""
        result = runner.invoke(
            app, ["oracle", "--data", str(tmp_path / "absent.jsonl"), "--out", str(tmp_path / "o")]
        )
        assert result.exit_code == 1

    def test_malformed_line(self, tmp_path: Path) -> None:
        """A wrongly typed line exits 1 with a one-line message naming the line."""
        data = tmp_path / "bad.jsonl"
        data.write_text('{"id": "a", "sentences": [1, 2]}\n')
        result = runner.invoke(app, ["oracle", "--data", str(data), "--out", str(tmp_path / "o")])
        assert result.exit_code == 1
        assert result.exception is None or isinstance(result.exception, SystemExit)
        errors = [line for line in result.output.splitlines() if line.startswith("error:")]
        assert len(errors) == 1 and "bad.jsonl:1:" in errors[0]

    def test_numeric_failure(
        self, corpus: Path, run_config: Path, tmp_path: Path, monkeypatch: pytest.MonkeyPatch
    ) -> None:
        """A numeric failure during training exits 2."""

        def diverge(self: Trainer, steps: int | None = None) -> list[object]:
            msg = "non-finite gradient norm"
            raise NumericError(msg)

        monkeypatch.setattr(Trainer, "fit", diverge)
        result = runner.invoke(
            app,
            ["train", "--data", str(corpus), "--out", str(tmp_path / "x"), "--config", str(run_config)],
        )
        assert result.exit_code == 2
        assert "numeric error" in result.output
