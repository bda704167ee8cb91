"""Image relevance teachers.

A teacher scores every retained image of a document against a text summary.
The scores are the distillation target for the image-selection head and are
always plain numbers: nothing here ever touches the autodiff tape.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
import structlog

from src.dataset import prepare_images
from src.errors import FormatError, InputError, ScoreLookupError
from src.models import TeacherScores
from src.rouge import rouge_l

if TYPE_CHECKING:
    from collections.abc import Sequence

    from src.config import ModelConfig
    from src.models import MultimodalDocument
    from src.tokenizer import Vocabulary

logger = structlog.get_logger()

MOCK_EMBED_DIM = 64


class ImageScorer(ABC):
    """Interface for anything that rates images against a summary."""

    name: str = "teacher"

    @abstractmethod
    def score(
        self, doc: MultimodalDocument, summary: Sequence[str] | None = None
    ) -> TeacherScores:
        """Score the document's retained images.

        Args:
            doc: Document whose images are scored.
            summary: Tokens to score against; defaults to the reference summary.

        Returns:
            One score per retained image, in image order.
        """


class MockTeacher(ImageScorer):
    """Seeded stand-in for a contrastive vision-language model.

    The summary becomes a bag-of-words count vector and each image its
    mean-pooled, zero-centred patch vector; fixed random projections map both
    into a shared space where cosine similarity is the score.
    """

    name = "mock"

    def __init__(self, vocab: Vocabulary, config: ModelConfig, dim: int = MOCK_EMBED_DIM) -> None:
        self._vocab = vocab
        self._config = config
        rng = np.random.default_rng(config.seed)
        self._text_proj = rng.standard_normal((len(vocab), dim)) / np.sqrt(len(vocab))
        self._image_proj = rng.standard_normal((config.patch_dim, dim)) / np.sqrt(
            config.patch_dim
        )

    def embed_text(self, tokens: Sequence[str]) -> np.ndarray[Any, Any]:
        bow = np.bincount(self._vocab.encode(tokens), minlength=len(self._vocab))
        return bow.astype(np.float64) @ self._text_proj

    def embed_images(self, doc: MultimodalDocument) -> np.ndarray[Any, Any]:
        patches = prepare_images(doc.images, self._config)
        pooled = (patches - 0.5).mean(axis=1)
        return pooled @ self._image_proj

    def score(
        self, doc: MultimodalDocument, summary: Sequence[str] | None = None
    ) -> TeacherScores:
        text = self.embed_text(doc.summary if summary is None else summary)
        images = self.embed_images(doc)
        norms = np.linalg.norm(images, axis=1) * np.linalg.norm(text)
        dots = images @ text
        cos = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)
        return TeacherScores(doc_id=doc.id, scores=[float(s) for s in cos], source=self.name)


class FileTeacher(ImageScorer):
    """Scores read from a JSONL file of ``{"id": str, "scores": [float]}`` lines.

    The summary argument is ignored: the stored scores were computed offline.
    """

    name = "file"

    def __init__(self, path: Path, max_images: int | None = None) -> None:
        self._path = path
        self._max_images = max_images
        self._scores: dict[str, list[float]] = {}
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except (OSError, UnicodeDecodeError) as e:
            msg = f"cannot read teacher scores {path}: {e}"
            raise FormatError(msg) from e
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                self._scores[str(raw["id"])] = [float(s) for s in raw["scores"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                msg = f"{path}:{lineno}: bad score line: {e}"
                raise FormatError(msg) from e
        logger.info("teacher_scores_loaded", path=str(path), documents=len(self._scores))

    def score(
        self, doc: MultimodalDocument, summary: Sequence[str] | None = None
    ) -> TeacherScores:
        if doc.id not in self._scores:
            msg = f"no teacher scores for document {doc.id!r} in {self._path}"
            raise ScoreLookupError(msg)
        scores = self._scores[doc.id]
        n_images = len(doc.images)
        if self._max_images is not None:
            n_images = min(n_images, self._max_images)
        if len(scores) != n_images:
            msg = f"document {doc.id!r}: {len(scores)} scores for {n_images} images"
            raise FormatError(msg)
        return TeacherScores(doc_id=doc.id, scores=scores, source=self.name)


class RougeRankTeacher(ImageScorer):
    """Caption-based ranking: ROUGE-L F1 between each caption and the summary."""

    name = "rouge-rank"

    def __init__(self, max_images: int | None = None) -> None:
        self._max_images = max_images

    def score(
        self, doc: MultimodalDocument, summary: Sequence[str] | None = None
    ) -> TeacherScores:
        reference = doc.summary if summary is None else summary
        n_images = len(doc.images)
        if self._max_images is not None:
            n_images = min(n_images, self._max_images)
        captions = doc.captions or []
        scores: list[float] = []
        for i in range(n_images):
            if i >= len(captions) or not captions[i]:
                msg = f"document {doc.id!r}: image {i} has no caption"
                raise InputError(msg)
            scores.append(rouge_l(captions[i], reference).f1)
        return TeacherScores(doc_id=doc.id, scores=scores, source=self.name)


def rouge_rank_references(
    doc: MultimodalDocument, k: int = 1, max_images: int | None = None
) -> list[int]:
    """Top-k retained images by caption ROUGE-L, the pseudo reference of the caption baseline.

    Args:
        doc: Document with captions.
        k: Number of references.
        max_images: Image budget; images past it are never ranked.
    """
    scores = RougeRankTeacher(max_images).score(doc).scores
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:k]


def build_teacher(spec: str, vocab: Vocabulary, config: ModelConfig) -> ImageScorer:
    """Construct a teacher from ``mock``, ``file:<path>`` or ``rouge-rank``.

    Raises:
        InputError: On an unknown teacher name.
    """
    if spec == "mock":
        return MockTeacher(vocab, config)
    if spec == "rouge-rank":
        return RougeRankTeacher(config.max_images)
    if spec.startswith("file:"):
        return FileTeacher(Path(spec.removeprefix("file:")), config.max_images)
    msg = f"unknown teacher {spec!r} (expected mock, file:<path> or rouge-rank)"
    raise InputError(msg)


def score_corpus(
    teacher: ImageScorer,
    docs: Sequence[MultimodalDocument],
    threads: int = 1,
) -> dict[str, TeacherScores]:
    """Score every document, fanning out over a thread pool.

    Args:
        teacher: Scorer to apply.
        docs: Documents to score.
        threads: Maximum concurrent workers.

    Returns:
        Scores keyed by document id.
    """
    workers = max(1, min(threads, len(docs)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(teacher.score, docs))
    logger.info("teacher_scoring_complete", teacher=teacher.name, documents=len(results))
    return {r.doc_id: r for r in results}


def write_scores(scores: Sequence[TeacherScores], path: Path) -> None:
    """Write scores in the file-teacher JSONL format."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for s in scores:
            fh.write(json.dumps({"id": s.doc_id, "scores": s.scores}) + "\n")
