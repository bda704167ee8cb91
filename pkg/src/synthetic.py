"""Seeded synthetic multimodal corpus used as a fixture and for overfit runs.

Words are pronounceable consonant-vowel strings. Each document has 3-6
sentences and 2-4 images; the summary restates one or two of its sentences,
and the image whose caption shares those words is the annotated reference.
"""

from __future__ import annotations

from itertools import product

import numpy as np
import structlog

from src.models import ImageRaster, MultimodalDocument

logger = structlog.get_logger()

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def word_list(size: int, rng: np.random.Generator) -> list[str]:
    """Distinct two-syllable pseudo-words."""
    syllables = [c + v for c, v in product(_CONSONANTS, _VOWELS)]
    pool = [a + b for a, b in product(syllables, syllables)]
    chosen = rng.choice(len(pool), size=size, replace=False)
    return [pool[int(i)] for i in chosen]


def _image(rng: np.random.Generator, resolution: int, tile: int) -> ImageRaster:
    template = rng.random((tile, tile, 3))
    reps = resolution // tile
    pixels = np.tile(template, (reps, reps, 1)) + rng.normal(0.0, 0.03, (resolution, resolution, 3))
    return ImageRaster(pixels=np.clip(pixels, 0.0, 1.0))


def synthetic_document(
    index: int,
    words: list[str],
    rng: np.random.Generator,
    resolution: int = 32,
    tile: int = 8,
) -> MultimodalDocument:
    n_sentences = int(rng.integers(3, 7))
    n_images = int(rng.integers(2, 5))
    sentences = [
        [*(words[int(i)] for i in rng.choice(len(words), size=int(rng.integers(5, 10)))), "."]
        for _ in range(n_sentences)
    ]
    key = sorted(int(i) for i in rng.choice(n_sentences, size=int(rng.integers(1, 3)), replace=False))
    summary = [tok for i in key for tok in sentences[i]]
    relevant = int(rng.integers(n_images))
    captions: list[list[str]] = []
    for j in range(n_images):
        if j == relevant:
            captions.append(summary[:4])
        else:
            captions.append([words[int(i)] for i in rng.choice(len(words), size=4)])
    return MultimodalDocument(
        id=f"doc-{index:04d}",
        sentences=sentences,
        images=[_image(rng, resolution, tile) for _ in range(n_images)],
        captions=captions,
        summary=summary,
        image_refs=[relevant],
    )


def synthetic_corpus(
    n_docs: int = 32,
    seed: int = 7,
    resolution: int = 32,
    tile: int = 8,
    vocab_words: int = 240,
) -> list[MultimodalDocument]:
    """Generate ``n_docs`` documents deterministically from ``seed``.

    Args:
        n_docs: Number of documents.
        seed: Generator seed.
        resolution: Square image side in pixels.
        tile: Side of the random template tiled across each image.
        vocab_words: Size of the word pool.

    Returns:
        The documents, ids ``doc-0000`` upward.
    """
    rng = np.random.default_rng(seed)
    words = word_list(vocab_words, rng)
    docs = [synthetic_document(i, words, rng, resolution, tile) for i in range(n_docs)]
    logger.info("synthetic_corpus", documents=n_docs, seed=seed, words=vocab_words)
    return docs
