"""Desk-scale training run on the synthetic corpus (deselected by default; run with -m slow).

32 documents, the mock teacher and seed 7, trained for 2,000 steps with
``configs/desk.json``. The model must fit all three objectives.
"""

from pathlib import Path

import numpy as np
import pytest

from src.config import load_run_config
from src.decoder import abs_loss, decode
from src.model import UniMSModel, top_k
from src.models import TrainingExample
from src.synthetic import synthetic_corpus
from src.teacher import MockTeacher
from src.tokenizer import build_vocab
from src.training import Trainer, build_training_examples, validation_loss

pytestmark = pytest.mark.slow

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.json"


@pytest.fixture(scope="module")
def trained() -> tuple[UniMSModel, list[TrainingExample], float]:
    run = load_run_config(DESK_CONFIG)
    docs = synthetic_corpus(32, seed=run.model.seed)
    vocab = build_vocab(docs, run.data.vocab_min_count, run.data.vocab_max_size)
    items = build_training_examples(docs, vocab, run.model, MockTeacher(vocab, run.model))
    model = UniMSModel(run.model)
    history = Trainer(model, items, run.train, seed=run.model.seed).fit()
    assert len(history) == run.train.total_steps
    return model, items, history[0].total


class TestDeskScaleFit:
    """The trained model fits every objective on its training documents."""

    def test_total_loss_falls_by_ninety_percent(
        self, trained: tuple[UniMSModel, list[TrainingExample], float]
    ) -> None:
        """The corpus mean total loss ends at most 10% of the first step's."""
        model, items, first = trained
        assert validation_loss(model, items) <= 0.1 * first

    def test_image_choice_agrees_with_teacher(
        self, trained: tuple[UniMSModel, list[TrainingExample], float]
    ) -> None:
        """The student's top image is the teacher's top image on at least 95% of documents."""
        model, items, _ = trained
        agree = [
            top_k(model.scores(it.example).images, 1) == top_k(it.teacher_scores, 1)
            for it in items
        ]
        assert np.mean(agree) >= 0.95

    def test_extraction_recovers_oracle(
        self, trained: tuple[UniMSModel, list[TrainingExample], float]
    ) -> None:
        """Top-k sentences, k the number of oracle positives, reach F1 0.9."""
        model, items, _ = trained
        hits = chosen = positives = 0
        for it in items:
            gold = {i for i, label in enumerate(it.oracle_labels) if label}
            if not gold:
                continue
            picked = set(top_k(model.scores(it.example).sentences, len(gold)))
            hits += len(picked & gold)
            chosen += len(picked)
            positives += len(gold)
        assert 2 * hits / (chosen + positives) >= 0.9

    def test_abstractive_nll(
        self, trained: tuple[UniMSModel, list[TrainingExample], float]
    ) -> None:
        """Teacher-forced per-token NLL is at most 0.2."""
        model, items, _ = trained
        nll = [
            abs_loss(
                decode(model.encode(it.example), it.example.summary_in, model.params, model.config),
                it.example.summary_out,
            ).item()
            for it in items
        ]
        assert float(np.mean(nll)) <= 0.2
