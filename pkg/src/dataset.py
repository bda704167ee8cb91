"""JSONL dataset parsing and model-ready example construction.

One JSON object per line::

    {"id": str, "sentences": [str], "images": [path | {"height", "width",
     "channels", "pixels"}], "captions": [str]?, "summary": str | [str],
     "image_refs": [int]?}

Image paths are resolved relative to the dataset file.
"""

from __future__ import annotations

import json
from typing import TYPE_CHECKING, Any

import numpy as np
import structlog
from pydantic import ValidationError

from src.errors import FormatError, InputError
from src.images import load_image, patchify, resize_nearest
from src.models import EncodedExample, ImageRaster, MultimodalDocument, Prediction
from src.tokenizer import BOS, CLS, EOS, PAD, SEP, detokenize, tokenize

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence
    from pathlib import Path

    from src.config import ModelConfig
    from src.tokenizer import Vocabulary

logger = structlog.get_logger()


def _parse_image(raw: Any, base_dir: Path) -> ImageRaster:  # noqa: ANN401
    if isinstance(raw, str):
        return load_image(base_dir / raw)
    if isinstance(raw, dict):
        try:
            h, w, c = int(raw["height"]), int(raw["width"]), int(raw["channels"])
            pixels = np.asarray(raw["pixels"], dtype=np.float64).reshape(h, w, c)
            return ImageRaster(pixels=pixels)
        except (KeyError, TypeError, ValueError) as e:
            msg = f"bad inline image: {e}"
            raise FormatError(msg) from e
    msg = f"image entry must be a path or an inline object, got {type(raw).__name__}"
    raise FormatError(msg)


def _strings(value: Any, field: str) -> list[str]:  # noqa: ANN401
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        msg = f"field {field!r} must be a list of strings"
        raise FormatError(msg)
    return value


def parse_document(raw: Any, base_dir: Path) -> MultimodalDocument:  # noqa: ANN401
    """Build a document from one decoded JSONL object.

    Raises:
        FormatError: If the line is not an object or fields are missing or malformed.
    """
    if not isinstance(raw, dict):
        msg = f"expected a JSON object, got {type(raw).__name__}"
        raise FormatError(msg)
    try:
        summary = raw.get("summary", "")
        if isinstance(summary, list):
            summary_text = " ".join(_strings(summary, "summary"))
        elif isinstance(summary, str):
            summary_text = summary
        else:
            msg = "field 'summary' must be a string or a list of strings"
            raise FormatError(msg)
        captions = raw.get("captions")
        images = raw.get("images", [])
        if not isinstance(images, list):
            msg = "field 'images' must be a list"
            raise FormatError(msg)
        return MultimodalDocument(
            id=str(raw["id"]),
            sentences=[tokenize(s) for s in _strings(raw["sentences"], "sentences")],
            images=[_parse_image(img, base_dir) for img in images],
            captions=(
                [tokenize(c) for c in _strings(captions, "captions")]
                if captions is not None
                else None
            ),
            summary=tokenize(summary_text),
            image_refs=raw.get("image_refs"),
        )
    except KeyError as e:
        msg = f"missing field {e}"
        raise FormatError(msg) from e
    except ValidationError as e:
        msg = f"invalid document: {e.errors()[0]['msg']}"
        raise FormatError(msg) from e


def load_dataset(path: Path) -> list[MultimodalDocument]:
    """Read every document of a JSONL file.

    Raises:
        FormatError: On unreadable files or bad lines (the line number is reported).
    """
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as e:
        msg = f"cannot read dataset {path}: {e}"
        raise FormatError(msg) from e

    docs: list[MultimodalDocument] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            docs.append(parse_document(json.loads(line), path.parent))
        except json.JSONDecodeError as e:
            msg = f"{path}:{lineno}: invalid JSON: {e.msg}"
            raise FormatError(msg) from e
        except FormatError as e:
            msg = f"{path}:{lineno}: {e}"
            raise FormatError(msg) from e
    logger.info("dataset_loaded", path=str(path), documents=len(docs))
    return docs


def document_to_json(doc: MultimodalDocument) -> dict[str, Any]:
    """Serialize a document with inline images (inverse of parse_document on tokens)."""
    raw: dict[str, Any] = {
        "id": doc.id,
        "sentences": [detokenize(s) for s in doc.sentences],
        "images": [
            {
                "height": img.height,
                "width": img.width,
                "channels": img.channels,
                "pixels": [round(float(v), 6) for v in img.pixels.reshape(-1)],
            }
            for img in doc.images
        ],
        "summary": detokenize(doc.summary),
    }
    if doc.captions is not None:
        raw["captions"] = [detokenize(c) for c in doc.captions]
    if doc.image_refs is not None:
        raw["image_refs"] = doc.image_refs
    return raw


def write_dataset(docs: Iterable[MultimodalDocument], path: Path) -> int:
    """Write documents as JSONL; returns the count."""
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(document_to_json(doc)) + "\n")
            count += 1
    return count


def _to_channels(image: ImageRaster, channels: int) -> np.ndarray[Any, Any]:
    if image.channels == channels:
        return image.pixels
    if channels == 3:
        return np.repeat(image.pixels, 3, axis=2)
    return image.pixels.mean(axis=2, keepdims=True)


def prepare_images(images: Sequence[ImageRaster], config: ModelConfig) -> np.ndarray[Any, Any]:
    """Truncate, resize and patchify images.

    Returns:
        Array of shape (kept images, patches per image, patch dim).
    """
    kept = images[: config.max_images]
    if len(images) > len(kept):
        logger.debug("images_truncated", total=len(images), kept=len(kept))
    blocks = [
        patchify(
            ImageRaster(pixels=_to_channels(resize_nearest(img, config.image_resolution),
                                            config.channels)),
            config.patch_size,
        )
        for img in kept
    ]
    if not blocks:
        return np.zeros((0, config.patches_per_image, config.patch_dim))
    return np.stack(blocks)


def retained_sentences(doc: MultimodalDocument, max_text_tokens: int) -> list[int]:
    """Indices of the leading sentences that fit whole within the text budget."""
    kept: list[int] = []
    used = 0
    for i, sent in enumerate(doc.sentences):
        need = len(sent) + 2
        if need > max_text_tokens and not kept:
            kept.append(i)
            break
        if used + need > max_text_tokens:
            break
        kept.append(i)
        used += need
    return kept


def encode_document(
    doc: MultimodalDocument, vocab: Vocabulary, config: ModelConfig
) -> EncodedExample:
    """Lay out a document as id streams and patch blocks.

    Sentences are kept whole until the next one's tokens plus its [CLS]/[SEP]
    would overflow max_text_tokens; a first sentence that is too long on its
    own is hard-truncated.

    Args:
        doc: Source document.
        vocab: Vocabulary for token ids.
        config: Model configuration (budgets and image geometry).

    Returns:
        Unpadded EncodedExample.

    Raises:
        InputError: If the document has no sentences.
    """
    if not doc.sentences or not any(doc.sentences):
        msg = f"document {doc.id!r} has no text"
        raise InputError(msg)

    token_ids: list[int] = []
    sentence_cls: list[int] = []
    kept = retained_sentences(doc, config.max_text_tokens)
    for i in kept:
        ids = vocab.encode(doc.sentences[i])
        if len(ids) + 2 > config.max_text_tokens:
            logger.warning("sentence_truncated", doc_id=doc.id, sentence=i, tokens=len(ids))
            ids = ids[: config.max_text_tokens - 2]
        sentence_cls.append(len(token_ids))
        token_ids.extend([CLS, *ids, SEP])

    summary_ids = vocab.encode(doc.summary)[: config.max_summary_tokens]
    patches = prepare_images(doc.images, config)
    n_images = int(patches.shape[0])
    refs = None
    if doc.image_refs is not None:
        refs = [r for r in doc.image_refs if r < n_images]

    return EncodedExample(
        doc_id=doc.id,
        token_ids=token_ids,
        text_valid=len(token_ids),
        sentence_cls=sentence_cls,
        sentence_index=kept,
        patches=patches,
        image_valid=n_images,
        summary_in=[BOS, *summary_ids],
        summary_out=[*summary_ids, EOS],
        image_refs=refs,
    )


def pad_example(example: EncodedExample, text_length: int, image_slots: int) -> EncodedExample:
    """Pad the text stream with PAD and the visual stream with blank image slots.

    Raises:
        InputError: If the targets are shorter than the example.
    """
    if text_length < example.text_length or image_slots < example.image_slots:
        msg = (
            f"cannot pad {example.text_length} tokens / {example.image_slots} images "
            f"down to {text_length} / {image_slots}"
        )
        raise InputError(msg)
    blank = np.zeros(
        (image_slots - example.image_slots, example.patches_per_image, example.patches.shape[2])
    )
    return example.model_copy(
        update={
            "token_ids": example.token_ids + [PAD] * (text_length - example.text_length),
            "patches": np.concatenate([example.patches, blank], axis=0),
        }
    )


def collate(examples: Sequence[EncodedExample]) -> list[EncodedExample]:
    """Pad text and visual streams independently to the batch maxima."""
    if not examples:
        return []
    text_length = max(e.text_length for e in examples)
    image_slots = max(e.image_slots for e in examples)
    return [pad_example(e, text_length, image_slots) for e in examples]


def write_predictions(predictions: Iterable[Prediction], path: Path) -> int:
    """Write predictions as JSONL; returns the count."""
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as fh:
        for pred in predictions:
            fh.write(pred.model_dump_json() + "\n")
            count += 1
    return count


def load_predictions(path: Path) -> list[Prediction]:
    """Read a predictions JSONL file.

    Raises:
        FormatError: On unreadable files or invalid lines.
    """
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as e:
        msg = f"cannot read predictions {path}: {e}"
        raise FormatError(msg) from e
    predictions: list[Prediction] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            predictions.append(Prediction.model_validate_json(line))
        except ValidationError as e:
            msg = f"{path}:{lineno}: invalid prediction: {e.errors()[0]['msg']}"
            raise FormatError(msg) from e
    return predictions
