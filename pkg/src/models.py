"""Domain models for multimodal summarization.

All models are frozen (immutable) Pydantic models with strict validation.
Array-carrying records allow numpy fields.
"""

from __future__ import annotations

from datetime import datetime
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class ImageRaster(BaseModel):
    """Pixel grid with values in [0, 1], shape (height, width, channels)."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    pixels: np.ndarray[Any, Any]

    @field_validator("pixels", mode="before")
    @classmethod
    def check_pixels(cls, v: Any) -> np.ndarray[Any, Any]:  # noqa: ANN401
        """Validate layout and value range."""
        arr = np.asarray(v, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] not in (1, 3) or arr.shape[0] < 1 or arr.shape[1] < 1:
            msg = f"image must be (height, width, 1|3), got {arr.shape}"
            raise ValueError(msg)
        if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
            msg = "pixel values must be finite and within [0, 1]"
            raise ValueError(msg)
        return arr

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def channels(self) -> int:
        return int(self.pixels.shape[2])


class MultimodalDocument(BaseModel, frozen=True):
    """A tokenized article with its images and reference summary."""

    id: str
    sentences: list[list[str]]
    images: list[ImageRaster] = Field(default_factory=list)
    captions: list[list[str]] | None = None
    summary: list[str] = Field(default_factory=list)
    # Annotated reference images (test split only)
    image_refs: list[int] | None = None

    @model_validator(mode="after")
    def check_alignment(self) -> MultimodalDocument:
        """Validate captions and references point at existing images."""
        if self.captions is not None and len(self.captions) != len(self.images):
            msg = f"{len(self.captions)} captions for {len(self.images)} images"
            raise ValueError(msg)
        if self.image_refs is not None and any(
            not 0 <= i < len(self.images) for i in self.image_refs
        ):
            msg = f"image_refs {self.image_refs} out of range for {len(self.images)} images"
            raise ValueError(msg)
        return self

    def source_tokens(self) -> list[str]:
        """All sentence tokens in document order."""
        return [tok for sent in self.sentences for tok in sent]


class EncodedExample(BaseModel):
    """Model-ready example: id streams, patches, targets and padding extents.

    Text layout is ``[CLS] s1 [SEP] [CLS] s2 [SEP] ... PAD*``; the visual
    stream is one ``[v_CLS] + patches`` block per image slot, padded slots last.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    doc_id: str
    token_ids: list[int]
    text_valid: int
    sentence_cls: list[int]
    # Document index of each retained sentence
    sentence_index: list[int]
    # (slots, patches, patch_dim)
    patches: np.ndarray[Any, Any]
    image_valid: int
    summary_in: list[int]
    summary_out: list[int]
    image_refs: list[int] | None = None

    @property
    def text_length(self) -> int:
        return len(self.token_ids)

    @property
    def image_slots(self) -> int:
        return int(self.patches.shape[0])

    @property
    def patches_per_image(self) -> int:
        return int(self.patches.shape[1])

    @property
    def visual_length(self) -> int:
        return self.image_slots * (1 + self.patches_per_image)

    @property
    def sequence_length(self) -> int:
        return self.text_length + self.visual_length

    @property
    def image_cls(self) -> list[int]:
        """Joint-sequence positions of each real image's [v_CLS]."""
        block = 1 + self.patches_per_image
        return [self.text_length + i * block for i in range(self.image_valid)]

    def key_mask(self) -> np.ndarray[Any, Any]:
        """Boolean vector over the joint sequence, False on padding."""
        text = np.arange(self.text_length) < self.text_valid
        block = 1 + self.patches_per_image
        visual = np.repeat(np.arange(self.image_slots) < self.image_valid, block)
        return np.concatenate([text, visual])


class TrainingExample(BaseModel, frozen=True):
    """Encoded example with its extractive oracle and teacher image scores."""

    example: EncodedExample
    oracle_labels: list[int]
    teacher_scores: list[float]

    @model_validator(mode="after")
    def check_lengths(self) -> TrainingExample:
        """Validate supervision aligns with sentences and images."""
        if len(self.oracle_labels) != len(self.example.sentence_cls):
            msg = (
                f"{len(self.oracle_labels)} oracle labels for "
                f"{len(self.example.sentence_cls)} sentences"
            )
            raise ValueError(msg)
        if len(self.teacher_scores) != self.example.image_valid:
            msg = (
                f"{len(self.teacher_scores)} teacher scores for "
                f"{self.example.image_valid} images"
            )
            raise ValueError(msg)
        return self


class TeacherScores(BaseModel, frozen=True):
    """Per-image relevance scores from a teacher, index-aligned with the images."""

    doc_id: str
    scores: list[float]
    source: str = ""

    @field_validator("scores")
    @classmethod
    def scores_finite(cls, v: list[float]) -> list[float]:
        """Validate every score is finite."""
        if not all(np.isfinite(s) for s in v):
            msg = "teacher scores must be finite"
            raise ValueError(msg)
        return v


class RougeScore(BaseModel, frozen=True):
    """Precision, recall and F1 of one ROUGE variant."""

    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0

    @classmethod
    def from_counts(cls, overlap: float, cand_total: float, ref_total: float) -> RougeScore:
        """Build a score from overlap and length counts (0 when undefined)."""
        p = overlap / cand_total if cand_total > 0 else 0.0
        r = overlap / ref_total if ref_total > 0 else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(precision=p, recall=r, f1=f)


class OracleLabels(BaseModel, frozen=True):
    """Greedy oracle: selected sentence indices and the ROUGE-L F1 after each step."""

    selected: list[int]
    trace: list[float]
    degenerate: bool = False

    def as_labels(self, n_sentences: int) -> list[int]:
        """Binary label vector over n_sentences."""
        chosen = set(self.selected)
        return [1 if i in chosen else 0 for i in range(n_sentences)]


class NovelNgramStats(BaseModel, frozen=True):
    """Novel n-gram count of a summary and its recall of the reference's novel n-grams."""

    n: int
    count: int
    novel_recall: float


class ImportanceMaps(BaseModel, frozen=True):
    """Cross-modal importance: patches scored by the extraction head, tokens by the image head."""

    doc_id: str
    # One list per image, one value per patch
    patch_maps: list[list[float]]
    token_map: list[float]
    tokens: list[str] = Field(default_factory=list)


class Prediction(BaseModel, frozen=True):
    """Model output for one document."""

    id: str
    abstractive: list[str]
    extractive: list[int]
    images: list[int]
    sentence_scores: list[float] = Field(default_factory=list)
    image_scores: list[float] = Field(default_factory=list)


class RunManifest(BaseModel, frozen=True):
    """Self-description written first into every output directory."""

    command: str
    config: dict[str, Any]
    seed: int
    data: list[str] = Field(default_factory=list)
    teacher: str = ""
    ablation: str = "none"
    out_dir: str
    created_at: datetime


class RougeTriple(BaseModel, frozen=True):
    """ROUGE-1, ROUGE-2 and ROUGE-L F1 of one candidate."""

    r1: float = 0.0
    r2: float = 0.0
    rl: float = 0.0


class ExampleEvaluation(BaseModel, frozen=True):
    """Metrics of one document's prediction."""

    id: str
    extractive: RougeTriple
    abstractive: RougeTriple
    lead: RougeTriple
    oracle: RougeTriple
    # None when the document has no image annotation or no selected image
    image_precision: float | None = None
    msim: float | None = None


class NgramCurvePoint(BaseModel, frozen=True):
    """Corpus-mean novel n-gram statistics for one n."""

    n: int
    count: float
    novel_recall: float
    reference_count: float


class EvaluationReport(BaseModel, frozen=True):
    """Per-example and corpus-mean metrics for one predictions file."""

    source: str = ""
    examples: list[ExampleEvaluation] = Field(default_factory=list)
    extractive: RougeTriple = RougeTriple()
    abstractive: RougeTriple = RougeTriple()
    lead: RougeTriple = RougeTriple()
    oracle: RougeTriple = RougeTriple()
    image_precision: float | None = None
    ip_skipped: int = 0
    msim: float | None = None
    novel_ngrams: list[NgramCurvePoint] = Field(default_factory=list)
