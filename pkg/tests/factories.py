"""Small documents, configs and models shared by the test modules."""

from __future__ import annotations

from typing import Any

import numpy as np

from src.config import ModelConfig
from src.models import ImageRaster, MultimodalDocument, TrainingExample
from src.teacher import MockTeacher
from src.tokenizer import Vocabulary, build_vocab, tokenize
from src.training import build_training_example


def tiny_config(**overrides: Any) -> ModelConfig:
    """A model small enough for finite-difference checks."""
    fields: dict[str, Any] = {
        "d_model": 8,
        "n_enc_layers": 2,
        "n_dec_layers": 1,
        "n_heads": 2,
        "ffn_dim": 16,
        "vocab_size": 64,
        "patch_size": 4,
        "image_resolution": 8,
        "max_images": 3,
        "max_text_tokens": 40,
        "max_summary_tokens": 10,
        "max_decode_len": 6,
    }
    fields.update(overrides)
    return ModelConfig(**fields)


def noise_image(seed: int, size: int = 8, channels: int = 3) -> ImageRaster:
    return ImageRaster(pixels=np.random.default_rng(seed).random((size, size, channels)))


def make_doc(
    doc_id: str = "d1",
    sentences: list[str] | None = None,
    summary: str = "the cat sat on the mat .",
    n_images: int = 2,
    image_refs: list[int] | None = None,
    captions: list[str] | None = None,
) -> MultimodalDocument:
    sentences = sentences or [
        "the cat sat on the mat .",
        "a dog ran in the park .",
        "rain fell all day .",
    ]
    return MultimodalDocument(
        id=doc_id,
        sentences=[tokenize(s) for s in sentences],
        images=[noise_image(i + 100 * len(doc_id)) for i in range(n_images)],
        captions=[tokenize(c) for c in captions] if captions is not None else None,
        summary=tokenize(summary),
        image_refs=image_refs,
    )


def make_vocab(*docs: MultimodalDocument) -> Vocabulary:
    return build_vocab(docs or (make_doc(),))


def make_item(
    doc: MultimodalDocument | None = None,
    config: ModelConfig | None = None,
    vocab: Vocabulary | None = None,
) -> TrainingExample:
    """Encoded example with oracle labels and mock-teacher scores."""
    doc = doc or make_doc()
    config = config or tiny_config()
    vocab = vocab or make_vocab(doc)
    return build_training_example(doc, vocab, config, MockTeacher(vocab, config))
