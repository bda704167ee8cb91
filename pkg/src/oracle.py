"""Extractive references: greedy ROUGE-L oracle and the LEAD baseline."""

from __future__ import annotations

from typing import TYPE_CHECKING

import structlog

from src.errors import InputError
from src.models import OracleLabels
from src.rouge import rouge_l

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

logger = structlog.get_logger()


def extractive_text(sentences: Sequence[Sequence[str]], indices: Iterable[int]) -> list[str]:
    """Concatenate the chosen sentences in document order."""
    return [tok for i in sorted(set(indices)) for tok in sentences[i]]


def greedy_oracle(sentences: Sequence[Sequence[str]], reference: Sequence[str]) -> OracleLabels:
    """Greedily add the sentence that most improves ROUGE-L F1 against the reference.

    The candidate summary is always read in document order. Ties go to the
    lowest sentence index; the loop stops at the first step where no sentence
    improves the score, so the trace is strictly increasing.

    Args:
        sentences: Tokenized source sentences.
        reference: Tokenized gold summary.

    Returns:
        Selected indices in selection order with the score after each step.

    Raises:
        InputError: If there are no sentences.
    """
    if not sentences:
        msg = "greedy_oracle needs at least one sentence"
        raise InputError(msg)

    selected: list[int] = []
    trace: list[float] = []
    best = 0.0
    while len(selected) < len(sentences):
        step_best = best
        step_idx = -1
        for i in range(len(sentences)):
            if i in selected:
                continue
            score = rouge_l(extractive_text(sentences, [*selected, i]), reference).f1
            if score > step_best:
                step_best = score
                step_idx = i
        if step_idx < 0:
            break
        selected.append(step_idx)
        trace.append(step_best)
        best = step_best

    degenerate = not selected
    if degenerate:
        logger.warning("degenerate_oracle", sentences=len(sentences))
    return OracleLabels(selected=selected, trace=trace, degenerate=degenerate)


def lead(n_sentences: int, k: int = 3) -> list[int]:
    """The first k sentence indices (LEAD-k baseline)."""
    return list(range(min(k, n_sentences)))
