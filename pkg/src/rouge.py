"""ROUGE-N and ROUGE-L on pre-tokenized text (no stemming, no stopword removal)."""

from __future__ import annotations

from collections import Counter
from typing import TYPE_CHECKING

from src.errors import InputError
from src.models import RougeScore

if TYPE_CHECKING:
    from collections.abc import Sequence


def ngrams(tokens: Sequence[str], n: int) -> Counter[tuple[str, ...]]:
    """Multiset of the n-grams of a token sequence."""
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> RougeScore:
    """Clipped n-gram overlap.

    Args:
        candidate: Generated tokens.
        reference: Gold tokens.
        n: N-gram order (1 or 2 for the reported metrics).

    Returns:
        Precision over candidate n-grams, recall over reference n-grams, F1.

    Raises:
        InputError: If n < 1.
    """
    if n < 1:
        msg = f"rouge_n needs n >= 1, got {n}"
        raise InputError(msg)
    cand = ngrams(candidate, n)
    ref = ngrams(reference, n)
    overlap = sum((cand & ref).values())
    return RougeScore.from_counts(overlap, sum(cand.values()), sum(ref.values()))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Length of the longest common subsequence."""
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> RougeScore:
    """LCS-based ROUGE-L; zero score for empty input."""
    return RougeScore.from_counts(lcs_length(candidate, reference), len(candidate), len(reference))
