"""Beam search with a length penalty, and greedy decoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Protocol

import numpy as np

from src.errors import InputError
from src.tokenizer import BOS, EOS

if TYPE_CHECKING:
    from collections.abc import Sequence


class SequenceScorer(Protocol):
    """Anything that yields next-token log-probabilities for a prefix."""

    def start(self, example: Any) -> Any: ...  # noqa: ANN401

    def next_log_probs(self, state: Any, prefix: Sequence[int]) -> np.ndarray[Any, Any]: ...  # noqa: ANN401


@dataclass(frozen=True)
class Beam:
    """A hypothesis: generated tokens (no BOS), cumulative log-probability, finished flag."""

    tokens: tuple[int, ...]
    logprob: float
    finished: bool = False


def length_penalty(length: int, alpha: float) -> float:
    """((5 + n) / 6) ** alpha.

    Raises:
        InputError: If length < 1.
    """
    if length < 1:
        msg = f"length_penalty needs length >= 1, got {length}"
        raise InputError(msg)
    return float(((5.0 + length) / 6.0) ** alpha)


def _rank_key(beam: Beam) -> tuple[float, tuple[int, ...]]:
    return (-beam.logprob, beam.tokens)


def beam_search(
    model: SequenceScorer,
    example: Any,  # noqa: ANN401
    beam_size: int,
    alpha: float,
    max_len: int,
    bos: int = BOS,
    eos: int = EOS,
) -> list[int]:
    """Decode with a fixed-width beam.

    Hypotheses are ranked by cumulative log-probability while searching, ties
    going to the lexicographically smaller token sequence. A hypothesis that
    emits EOS is finished and never extended; unfinished ones stop at max_len.
    The returned sequence maximizes logprob / length_penalty over all
    finished hypotheses.

    Args:
        model: Sequence scorer.
        example: Source passed to ``model.start``.
        beam_size: Hypotheses kept per step.
        alpha: Length penalty exponent.
        max_len: Maximum number of generated tokens, EOS included.
        bos: Start token fed before the first step.
        eos: End token.

    Returns:
        Generated token ids, ending in EOS unless max_len was reached.

    Raises:
        InputError: If max_len or beam_size is below 1.
    """
    if max_len < 1:
        msg = f"max_len must be >= 1, got {max_len}"
        raise InputError(msg)
    if beam_size < 1:
        msg = f"beam_size must be >= 1, got {beam_size}"
        raise InputError(msg)

    state = model.start(example)
    alive = [Beam(tokens=(), logprob=0.0)]
    finished: list[Beam] = []
    for _ in range(max_len):
        candidates: list[Beam] = []
        for beam in alive:
            log_probs = model.next_log_probs(state, (bos, *beam.tokens))
            for tok, lp in enumerate(log_probs):
                candidates.append(
                    Beam(tokens=(*beam.tokens, tok), logprob=beam.logprob + float(lp),
                         finished=tok == eos)
                )
        candidates.sort(key=_rank_key)
        alive = []
        for cand in candidates[:beam_size]:
            (finished if cand.finished else alive).append(cand)
        if not alive:
            break
    finished.extend(alive)

    def final_key(beam: Beam) -> tuple[float, tuple[int, ...]]:
        return (-beam.logprob / length_penalty(len(beam.tokens), alpha), beam.tokens)

    return list(min(finished, key=final_key).tokens)


def greedy_decode(
    model: SequenceScorer,
    example: Any,  # noqa: ANN401
    max_len: int,
    bos: int = BOS,
    eos: int = EOS,
) -> list[int]:
    """Pick the most likely token at every step (lowest id on ties).

    Raises:
        InputError: If max_len < 1.
    """
    if max_len < 1:
        msg = f"max_len must be >= 1, got {max_len}"
        raise InputError(msg)
    state = model.start(example)
    tokens: list[int] = []
    for _ in range(max_len):
        tok = int(np.argmax(model.next_log_probs(state, (bos, *tokens))))
        tokens.append(tok)
        if tok == eos:
            break
    return tokens
