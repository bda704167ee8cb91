"""CLI entrypoint for desk-scale multimodal summarization."""

from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import TYPE_CHECKING, Any, cast

import structlog
import typer

from src.checkpoint import load_checkpoint
from src.config import Ablation, RunConfig, Settings, apply_ablation, load_run_config
from src.dataset import (
    encode_document,
    load_dataset,
    load_predictions,
    write_dataset,
    write_predictions,
)
from src.errors import ConfigError, InputError, NumericError, UniMSError
from src.metrics import average_reports, cross_modal_importance, evaluate_predictions
from src.model import UniMSModel, summarize_corpus
from src.models import RunManifest
from src.oracle import greedy_oracle
from src.synthetic import synthetic_corpus
from src.teacher import build_teacher, score_corpus, write_scores
from src.tokenizer import Vocabulary, build_vocab
from src.training import Trainer, build_training_examples

UTC = timezone.utc

if TYPE_CHECKING:
    from collections.abc import Iterator

    from src.models import MultimodalDocument

logger = structlog.get_logger()

app = typer.Typer(help="Unified multimodal summarization: extractive, abstractive and image selection")

_LOG_LEVELS: dict[str, int] = {
    "DEBUG": logging.DEBUG,
    "INFO": logging.INFO,
    "WARNING": logging.WARNING,
    "ERROR": logging.ERROR,
    "CRITICAL": logging.CRITICAL,
}

VOCAB_FILE = "vocab.json"
MANIFEST_FILE = "run_manifest.json"


def _configure_logging(level: str) -> None:
    """Configure structlog with the given log level.

    Args:
        level: Log level string (e.g., "INFO", "DEBUG").
    """
    log_level = _LOG_LEVELS.get(level.upper(), logging.INFO)
    structlog.configure(
        wrapper_class=structlog.make_filtering_bound_logger(log_level),
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.dev.ConsoleRenderer(),
        ],
    )


@contextmanager
def _exit_codes() -> Iterator[None]:
    """Map package errors to exit 1 (input) or 2 (numeric) with a one-line message."""
    try:
        yield
    except NumericError as e:
        typer.echo(f"numeric error: {' '.join(str(e).split())}", err=True)
        raise typer.Exit(2) from e
    except UniMSError as e:
        typer.echo(f"error: {' '.join(str(e).split())}", err=True)
        raise typer.Exit(1) from e


def _setup(threads: int | None) -> int:
    settings = Settings()
    _configure_logging(settings.log_level)
    return threads if threads is not None else settings.threads


def _run_config(config: Path | None, seed: int | None, ablation: Ablation = "none") -> RunConfig:
    run = load_run_config(config)
    model = apply_ablation(run.model, ablation)
    if seed is not None:
        model = model.model_copy(update={"seed": seed})
    return run.model_copy(update={"model": model})


def _write_manifest(
    out: Path,
    command: str,
    run: RunConfig,
    data: list[Path],
    teacher: str = "",
    ablation: str = "none",
) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command=command,
        config=run.model_dump(mode="json"),
        seed=run.model.seed,
        data=[str(p) for p in data],
        teacher=teacher,
        ablation=ablation,
        out_dir=str(out),
        created_at=datetime.now(UTC),
    )
    (out / MANIFEST_FILE).write_text(manifest.model_dump_json(indent=2) + "\n")


def _vocabulary(vocab: Path | None, docs: list[MultimodalDocument], run: RunConfig) -> Vocabulary:
    voc = (
        Vocabulary.load(vocab)
        if vocab is not None
        else build_vocab(docs, run.data.vocab_min_count, run.data.vocab_max_size)
    )
    if len(voc) > run.model.vocab_size:
        msg = f"vocabulary of {len(voc)} exceeds model.vocab_size {run.model.vocab_size}"
        raise ConfigError(msg)
    return voc


def _write_json(path: Path, payload: Any) -> None:  # noqa: ANN401
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")


# Shared option declarations
_CONFIG = typer.Option(None, "--config", help="Run configuration JSON")
_DATA = typer.Option(..., "--data", help="JSONL dataset")
_OUT = typer.Option(..., "--out", help="Output directory")
_SEED = typer.Option(None, "--seed", help="Seed overriding the configuration")
_THREADS = typer.Option(None, "--threads", help="Worker cap (default UNIMS_THREADS)")
_VOCAB = typer.Option(None, "--vocab", help="Vocabulary JSON (built from --data if omitted)")


@app.command()
def synth(
    out: Path = _OUT,
    docs: int = typer.Option(32, "--docs", help="Number of documents"),
    seed: int = typer.Option(7, "--seed", help="Generator seed"),
) -> None:
    """Write a seeded synthetic corpus with inline images."""
    _setup(None)
    with _exit_codes():
        run = _run_config(None, seed)
        _write_manifest(out, "synth", run, [])
        count = write_dataset(synthetic_corpus(docs, seed), out / "corpus.jsonl")
        typer.echo(f"Wrote {count} documents to {out / 'corpus.jsonl'}")


@app.command("build-vocab")
def build_vocab_cmd(
    data: Path = _DATA,
    out: Path = _OUT,
    config: Path | None = _CONFIG,
) -> None:
    """Build the vocabulary from a dataset."""
    _setup(None)
    with _exit_codes():
        run = _run_config(config, None)
        _write_manifest(out, "build-vocab", run, [data])
        voc = build_vocab(load_dataset(data), run.data.vocab_min_count, run.data.vocab_max_size)
        voc.save(out / VOCAB_FILE)
        typer.echo(f"Vocabulary of {len(voc)} tokens written to {out / VOCAB_FILE}")


@app.command()
def oracle(
    data: Path = _DATA,
    out: Path = _OUT,
    config: Path | None = _CONFIG,
) -> None:
    """Greedy ROUGE-L oracle labels for every document."""
    _setup(None)
    with _exit_codes():
        run = _run_config(config, None)
        _write_manifest(out, "oracle", run, [data])
        docs = load_dataset(data)
        degenerate = 0
        with (out / "oracle.jsonl").open("w", encoding="utf-8") as fh:
            for doc in docs:
                labels = greedy_oracle(doc.sentences, doc.summary)
                degenerate += labels.degenerate
                fh.write(json.dumps({"id": doc.id, **labels.model_dump()}) + "\n")
        typer.echo(f"Oracle labels for {len(docs)} documents ({degenerate} degenerate)")


@app.command("teacher-scores")
def teacher_scores(
    data: Path = _DATA,
    out: Path = _OUT,
    teacher: str = typer.Option("mock", "--teacher", help="mock | file:<path> | rouge-rank"),
    config: Path | None = _CONFIG,
    vocab: Path | None = _VOCAB,
    seed: int | None = _SEED,
    threads: int | None = _THREADS,
) -> None:
    """Score every retained image with the chosen teacher."""
    workers = _setup(threads)
    with _exit_codes():
        run = _run_config(config, seed)
        _write_manifest(out, "teacher-scores", run, [data], teacher=teacher)
        docs = load_dataset(data)
        scorer = build_teacher(teacher, _vocabulary(vocab, docs, run), run.model)
        scores = score_corpus(scorer, docs, workers)
        write_scores([scores[d.id] for d in docs], out / "teacher_scores.jsonl")
        typer.echo(f"Teacher {scorer.name} scored {len(docs)} documents")


@app.command()
def train(
    data: Path = _DATA,
    out: Path = _OUT,
    config: Path | None = _CONFIG,
    teacher: str = typer.Option("mock", "--teacher", help="mock | file:<path> | rouge-rank"),
    seed: int | None = _SEED,
    ablation: str = typer.Option("none", "--ablation", help="none | no-visual-guide | no-ext | no-both"),
    val_data: Path | None = typer.Option(None, "--val-data", help="Validation JSONL"),
    vocab: Path | None = _VOCAB,
    steps: int | None = typer.Option(None, "--steps", help="Stop after this many steps"),
    resume: Path | None = typer.Option(None, "--resume", help="Checkpoint directory to resume"),
    threads: int | None = _THREADS,
) -> None:
    """Train the model on a dataset and keep the best checkpoints by validation loss."""
    workers = _setup(threads)
    with _exit_codes():
        if ablation not in ("none", "no-visual-guide", "no-ext", "no-both"):
            msg = f"unknown ablation {ablation!r}"
            raise InputError(msg)
        run = _run_config(config, seed, cast("Ablation", ablation))
        _write_manifest(
            out, "train", run, [p for p in (data, val_data) if p], teacher=teacher, ablation=ablation
        )
        docs = load_dataset(data)
        voc = _vocabulary(vocab, docs, run)
        voc.save(out / VOCAB_FILE)
        scorer = build_teacher(teacher, voc, run.model)
        items = build_training_examples(docs, voc, run.model, scorer, workers)
        val_items = (
            build_training_examples(load_dataset(val_data), voc, run.model, scorer, workers)
            if val_data is not None
            else None
        )
        model = UniMSModel(run.model)
        kwargs: dict[str, Any] = {"val_items": val_items, "out_dir": out, "seed": run.model.seed}
        trainer = (
            Trainer.resume(model, resume, items, run.train, **kwargs)
            if resume is not None
            else Trainer(model, items, run.train, **kwargs)
        )
        history = trainer.fit(steps)
        if history:
            first, last = history[0], history[-1]
            typer.echo(
                f"Trained steps {first.step}-{last.step}: "
                f"total loss {first.total:.4f} -> {last.total:.4f}"
            )
        for rec in trainer.state.registry:
            typer.echo(f"  checkpoint step {rec.step}: val loss {rec.val_loss:.4f}")


@app.command()
def summarize(
    data: Path = _DATA,
    out: Path = _OUT,
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint directory"),
    vocab: Path = typer.Option(..., "--vocab", help="Vocabulary JSON used in training"),
    config: Path | None = _CONFIG,
    topk_images: int | None = typer.Option(None, "--topk-images", help="Images selected per document"),
    threads: int | None = _THREADS,
) -> None:
    """Generate abstractive text, extractive sentences and selected images."""
    workers = _setup(threads)
    with _exit_codes():
        run = _run_config(config, None)
        ckpt = load_checkpoint(checkpoint)
        decode_config = run.decode
        if topk_images is not None:
            decode_config = decode_config.model_copy(update={"top_k_images": topk_images})
        run = run.model_copy(update={"model": ckpt.config, "decode": decode_config})
        _write_manifest(out, "summarize", run, [data, checkpoint])
        voc = Vocabulary.load(vocab)
        docs = load_dataset(data)
        examples = [encode_document(d, voc, ckpt.config) for d in docs]
        model = UniMSModel(ckpt.config, ckpt.params)
        predictions = summarize_corpus(model, examples, voc, decode_config, workers)
        count = write_predictions(predictions, out / "predictions.jsonl")
        typer.echo(f"Summarized {count} documents into {out / 'predictions.jsonl'}")


@app.command()
def evaluate(
    data: Path = _DATA,
    out: Path = _OUT,
    predictions: list[Path] = typer.Option(..., "--predictions", help="Predictions JSONL (repeatable)"),
    teacher: str | None = typer.Option(None, "--teacher", help="Teacher for the M_sim proxy"),
    config: Path | None = _CONFIG,
    vocab: Path | None = _VOCAB,
    threads: int | None = _THREADS,
) -> None:
    """ROUGE, image precision and M_sim proxy; several files are metric-averaged."""
    workers = _setup(threads)
    with _exit_codes():
        run = _run_config(config, None)
        _write_manifest(out, "evaluate", run, [data, *predictions], teacher=teacher or "")
        docs = load_dataset(data)
        scorer = build_teacher(teacher, _vocabulary(vocab, docs, run), run.model) if teacher else None
        reports = [
            evaluate_predictions(
                load_predictions(p), docs, run.model, scorer, workers, source=str(p)
            )
            for p in predictions
        ]
        mean = average_reports(reports)
        _write_json(
            out / "report.json",
            {
                "runs": [r.model_dump(mode="json") for r in reports],
                "mean": mean.model_dump(mode="json"),
            },
        )
        typer.echo(f"{'':<12} {'R-1':>7} {'R-2':>7} {'R-L':>7}")
        for label, triple in (
            ("abstractive", mean.abstractive),
            ("extractive", mean.extractive),
            ("lead-3", mean.lead),
            ("oracle", mean.oracle),
        ):
            typer.echo(
                f"{label:<12} {triple.r1 * 100:>7.2f} {triple.r2 * 100:>7.2f} {triple.rl * 100:>7.2f}"
            )
        if mean.image_precision is not None:
            typer.echo(f"IP {mean.image_precision * 100:.2f} (skipped {mean.ip_skipped})")
        if mean.msim is not None:
            typer.echo(f"M_sim proxy {mean.msim:.4f}")


@app.command("analyze-ngrams")
def analyze_ngrams(
    data: Path = _DATA,
    out: Path = _OUT,
    predictions: Path = typer.Option(..., "--predictions", help="Predictions JSONL"),
    config: Path | None = _CONFIG,
) -> None:
    """Novel n-gram counts and recall for n = 1..4."""
    _setup(None)
    with _exit_codes():
        run = _run_config(config, None)
        _write_manifest(out, "analyze-ngrams", run, [data, predictions])
        report = evaluate_predictions(load_predictions(predictions), load_dataset(data), run.model)
        curve = [p.model_dump() for p in report.novel_ngrams]
        _write_json(out / "novel_ngrams.json", curve)
        for point in report.novel_ngrams:
            typer.echo(
                f"n={point.n}: novel {point.count:.2f} "
                f"(reference {point.reference_count:.2f}), recall {point.novel_recall:.3f}"
            )


@app.command()
def visualize(
    data: Path = _DATA,
    out: Path = _OUT,
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint directory"),
    vocab: Path = typer.Option(..., "--vocab", help="Vocabulary JSON used in training"),
) -> None:
    """Export cross-modal importance maps as JSONL for plotting."""
    _setup(None)
    with _exit_codes():
        ckpt = load_checkpoint(checkpoint)
        _write_manifest(out, "visualize", RunConfig(model=ckpt.config), [data, checkpoint])
        voc = Vocabulary.load(vocab)
        model = UniMSModel(ckpt.config, ckpt.params)
        count = 0
        with (out / "importance.jsonl").open("w", encoding="utf-8") as fh:
            for doc in load_dataset(data):
                example = encode_document(doc, voc, ckpt.config)
                maps = cross_modal_importance(model.encode(example), model.params, example, voc)
                fh.write(maps.model_dump_json() + "\n")
                count += 1
        typer.echo(f"Importance maps for {count} documents in {out / 'importance.jsonl'}")
