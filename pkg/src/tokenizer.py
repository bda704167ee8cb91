"""Whitespace/punctuation tokenizer and frequency-ranked vocabulary."""

from __future__ import annotations

import json
import re
from collections import Counter
from typing import TYPE_CHECKING

import structlog
from pydantic import BaseModel, PrivateAttr, field_validator

from src.errors import FormatError, InputError

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence
    from pathlib import Path

    from src.models import MultimodalDocument

logger = structlog.get_logger()

PAD, BOS, EOS, CLS, SEP, UNK = 0, 1, 2, 3, 4, 5
RESERVED = ("<pad>", "<s>", "</s>", "<cls>", "<sep>", "<unk>")

# Hyphens stay inside words ("2-1"); every other mark is its own token
_PUNCT = r".,!?;:\"'()\[\]{}"
_TOKEN_RE = re.compile(rf"[^\s{_PUNCT}]+|[{_PUNCT}]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and detach punctuation.

    Args:
        text: Raw UTF-8 text.

    Returns:
        Token list; empty for empty text.
    """
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    """Join tokens with single spaces (inverse of tokenize on its own output)."""
    return " ".join(tokens)


class Vocabulary(BaseModel, frozen=True):
    """Bijective token/id mapping with ids 0..5 reserved."""

    tokens: tuple[str, ...]
    _index: dict[str, int] = PrivateAttr(default_factory=dict)

    @field_validator("tokens")
    @classmethod
    def check_reserved(cls, v: tuple[str, ...]) -> tuple[str, ...]:
        """Validate the reserved prefix and uniqueness."""
        if v[: len(RESERVED)] != RESERVED:
            msg = "vocabulary must start with the reserved tokens"
            raise ValueError(msg)
        if len(set(v)) != len(v):
            msg = "vocabulary tokens must be unique"
            raise ValueError(msg)
        return v

    def model_post_init(self, context: object, /) -> None:
        self._index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        """Id of a token, UNK when out of vocabulary."""
        return self._index.get(token, UNK)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Sequence[int], strip_special: bool = True) -> list[str]:
        """Map ids back to tokens, dropping reserved ids except UNK by default."""
        out: list[str] = []
        for i in ids:
            if strip_special and i in (PAD, BOS, EOS, CLS, SEP):
                continue
            out.append(self.tokens[i] if 0 <= i < len(self.tokens) else RESERVED[UNK])
        return out

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"tokens": list(self.tokens)}, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> Vocabulary:
        """Read a vocabulary written by save().

        Raises:
            FormatError: If the file is not a vocabulary file.
        """
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
            return cls(tokens=tuple(raw["tokens"]))
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            msg = f"cannot read vocabulary {path}: {e}"
            raise FormatError(msg) from e


def document_tokens(doc: MultimodalDocument) -> Iterable[str]:
    """Every token a document contributes to the vocabulary."""
    yield from doc.source_tokens()
    yield from doc.summary
    for caption in doc.captions or []:
        yield from caption


def build_vocab(
    corpus: Iterable[MultimodalDocument],
    min_count: int = 1,
    max_size: int | None = None,
) -> Vocabulary:
    """Keep the most frequent tokens, ties broken lexicographically.

    Args:
        corpus: Documents to count.
        min_count: Drop tokens seen fewer times.
        max_size: Cap on non-reserved entries.

    Returns:
        Vocabulary of len(RESERVED) + kept tokens.

    Raises:
        InputError: If the corpus is empty.
    """
    counts: Counter[str] = Counter()
    n_docs = 0
    for doc in corpus:
        n_docs += 1
        counts.update(document_tokens(doc))
    if n_docs == 0:
        msg = "cannot build a vocabulary from an empty corpus"
        raise InputError(msg)

    ranked = sorted(
        (tok for tok, c in counts.items() if c >= min_count and tok not in RESERVED),
        key=lambda tok: (-counts[tok], tok),
    )
    if max_size is not None:
        ranked = ranked[:max_size]
    logger.info("vocab_built", documents=n_docs, distinct=len(counts), kept=len(ranked))
    return Vocabulary(tokens=RESERVED + tuple(ranked))
