"""Tests for the greedy extractive oracle and LEAD."""

import numpy as np
import pytest

from src.errors import InputError
from src.oracle import extractive_text, greedy_oracle, lead


def _lcs(a: list[str], b: list[str]) -> int:
    table = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    for i, x in enumerate(a, start=1):
        for j, y in enumerate(b, start=1):
            table[i, j] = table[i - 1, j - 1] + 1 if x == y else max(table[i - 1, j], table[i, j - 1])
    return int(table[-1, -1])


def _rouge_l_f1(cand: list[str], ref: list[str]) -> float:
    lcs = _lcs(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 2 * p * r / (p + r)


def _random_document(rng: np.random.Generator) -> tuple[list[list[str]], list[str]]:
    alphabet = list("abcdefgh")
    sentences = [
        list(rng.choice(alphabet, size=int(rng.integers(1, 6))))
        for _ in range(int(rng.integers(1, 7)))
    ]
    reference = list(rng.choice(alphabet, size=int(rng.integers(1, 9))))
    return sentences, reference


class TestGreedyOracle:
    """Tests for greedy_oracle."""

    def test_reference_equal_to_one_sentence(self) -> None:
        """A reference equal to sentence 2 selects exactly {2}."""
        sentences = [["a", "b"], ["c", "d"], ["e", "f", "g"]]
        oracle = greedy_oracle(sentences, ["e", "f", "g"])
        assert oracle.selected == [2]
        assert oracle.trace == [pytest.approx(1.0)]
        assert not oracle.degenerate

    def test_disjoint_reference_is_degenerate(self) -> None:
        """No overlap gives an empty, flagged selection."""
        oracle = greedy_oracle([["a"], ["b"]], ["z"])
        assert oracle.selected == []
        assert oracle.degenerate
        assert oracle.as_labels(2) == [0, 0]

    def test_ties_go_to_lowest_index(self) -> None:
        """Two equally good sentences: the first wins."""
        oracle = greedy_oracle([["x"], ["a"], ["a"]], ["a"])
        assert oracle.selected == [1]

    def test_no_sentences(self) -> None:
        """An empty document is an input error."""
        with pytest.raises(InputError):
            greedy_oracle([], ["a"])

    def test_matches_brute_force_steps(self) -> None:
        """Every greedy step is the best remaining sentence on 100 random documents."""
        rng = np.random.default_rng(0)
        for _ in range(100):
            sentences, reference = _random_document(rng)
            oracle = greedy_oracle(sentences, reference)
            best = 0.0
            for step, chosen in enumerate(oracle.selected):
                prefix = oracle.selected[:step]
                candidates = {
                    i: _rouge_l_f1(extractive_text(sentences, [*prefix, i]), reference)
                    for i in range(len(sentences))
                    if i not in prefix
                }
                top = max(candidates.values())
                assert top > best
                assert chosen == min(i for i, s in candidates.items() if s == top)
                assert oracle.trace[step] == pytest.approx(top, abs=1e-12)
                best = top
            rest = [i for i in range(len(sentences)) if i not in oracle.selected]
            for i in rest:
                text = extractive_text(sentences, [*oracle.selected, i])
                assert _rouge_l_f1(text, reference) <= best + 1e-12
            assert all(b > a for a, b in zip(oracle.trace, oracle.trace[1:], strict=False))
            singles = [_rouge_l_f1(s, reference) for s in sentences]
            assert best >= max(singles) - 1e-12

    def test_selection_read_in_document_order(self) -> None:
        """Concatenation ignores selection order."""
        sentences = [["a"], ["b"], ["c"]]
        assert extractive_text(sentences, [2, 0]) == ["a", "c"]


class TestLead:
    """Tests for the LEAD baseline."""

    def test_first_three(self) -> None:
        """LEAD-3 takes the first three sentences."""
        assert lead(5) == [0, 1, 2]

    def test_short_document(self) -> None:
        """Fewer sentences than k returns them all."""
        assert lead(2) == [0, 1]
