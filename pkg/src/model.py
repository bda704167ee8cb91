"""UniMSModel: parameters plus the training forward pass and inference entry points."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np
import structlog

from src.decoder import LossTerms, abs_loss, decode, init_decoder_params, total_loss
from src.decoding import beam_search
from src.encoder import (
    EncoderOutput,
    embed_multimodal,
    encode,
    ext_loss,
    image_select_scores,
    init_encoder_params,
    kd_loss,
    sentence_scores,
)
from src.errors import InputError
from src.layers import ParamStore
from src.models import Prediction
from src.tensor import Tensor

if TYPE_CHECKING:
    from collections.abc import Sequence

    from src.config import DecodeConfig, ModelConfig
    from src.models import EncodedExample, TrainingExample
    from src.tokenizer import Vocabulary

logger = structlog.get_logger()


def _log_softmax(logits: np.ndarray[Any, Any]) -> np.ndarray[Any, Any]:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


@dataclass(frozen=True)
class Scores:
    """Head outputs for one document as plain arrays."""

    sentences: np.ndarray[Any, Any]
    images: np.ndarray[Any, Any]


class UniMSModel:
    """Encoder, heads and visual-guided decoder over one parameter store.

    Inference methods record nothing on the tape, so a single model may serve
    several threads at once. Training mutates ``params`` and is single-writer.
    """

    def __init__(self, config: ModelConfig, params: ParamStore | None = None) -> None:
        self.config = config
        if params is None:
            params = ParamStore()
            rng = np.random.default_rng(config.seed)
            init_encoder_params(params, config, rng)
            init_decoder_params(params, config, rng)
            logger.debug("model_initialized", parameters=params.num_parameters())
        self.params = params

    def encode(self, example: EncodedExample, rng: np.random.Generator | None = None) -> EncoderOutput:
        embeddings = embed_multimodal(example, self.params, self.config, rng)
        return encode(embeddings, example, self.params, self.config, rng)

    def forward(self, item: TrainingExample, rng: np.random.Generator | None = None) -> LossTerms:
        """Compute the three objectives for one supervised example.

        The distillation term is zero for documents without images; the
        extractive term is zero when the ablation removes it.
        """
        enc_out = self.encode(item.example, rng)
        if enc_out.image_cls_idx:
            kd = kd_loss(
                image_select_scores(enc_out, self.params),
                item.teacher_scores,
                self.config.kd_temperature,
            )
        else:
            kd = Tensor(0.0)
        if self.config.use_ext_loss:
            ext = ext_loss(
                sentence_scores(enc_out, self.params), item.oracle_labels, self.config.ext_loss_mode
            ).loss
        else:
            ext = Tensor(0.0)
        logits = decode(enc_out, item.example.summary_in, self.params, self.config, rng)
        return total_loss(kd, ext, abs_loss(logits, item.example.summary_out))

    def scores(self, example: EncodedExample, enc_out: EncoderOutput | None = None) -> Scores:
        """Sentence and image head scores; images is empty when there are none."""
        enc_out = enc_out if enc_out is not None else self.encode(example)
        sentences = sentence_scores(enc_out, self.params).numpy()
        images = (
            image_select_scores(enc_out, self.params).numpy()
            if enc_out.image_cls_idx
            else np.zeros(0)
        )
        return Scores(sentences=sentences, images=images)

    # Sequence scorer interface used by beam search

    def start(self, example: EncodedExample) -> EncoderOutput:
        return self.encode(example)

    def next_log_probs(self, state: EncoderOutput, prefix: Sequence[int]) -> np.ndarray[Any, Any]:
        """Log-probabilities of the next token after a BOS-prefixed prefix."""
        if len(prefix) > self.config.max_target_positions:
            msg = f"prefix of {len(prefix)} exceeds {self.config.max_target_positions} positions"
            raise InputError(msg)
        logits = decode(state, prefix, self.params, self.config)
        return _log_softmax(logits.data[-1])

    def summarize(
        self, example: EncodedExample, vocab: Vocabulary, decode_config: DecodeConfig
    ) -> Prediction:
        """Abstractive summary by beam search, top-k sentences in document order, top-k images."""
        enc_out = self.encode(example)
        head = self.scores(example, enc_out)
        ranked = top_k(head.sentences, decode_config.top_k_sentences)
        generated = beam_search(
            _CachedEncoding(self, enc_out),
            example,
            decode_config.beam_size,
            decode_config.length_penalty_alpha,
            self.config.max_decode_len,
        )
        return Prediction(
            id=example.doc_id,
            abstractive=vocab.decode(generated),
            extractive=sorted(example.sentence_index[i] for i in ranked),
            images=top_k(head.images, decode_config.top_k_images),
            sentence_scores=[float(s) for s in head.sentences],
            image_scores=[float(s) for s in head.images],
        )


class _CachedEncoding:
    """Scorer that reuses an already computed encoder output."""

    def __init__(self, model: UniMSModel, enc_out: EncoderOutput) -> None:
        self._model = model
        self._enc_out = enc_out

    def start(self, example: EncodedExample) -> EncoderOutput:
        return self._enc_out

    def next_log_probs(self, state: EncoderOutput, prefix: Sequence[int]) -> np.ndarray[Any, Any]:
        return self._model.next_log_probs(state, prefix)


def top_k(scores: Sequence[float] | np.ndarray[Any, Any], k: int) -> list[int]:
    """Indices of the k highest scores, ties to the lower index."""
    values = [float(s) for s in scores]
    return sorted(range(len(values)), key=lambda i: (-values[i], i))[:k]


def summarize_corpus(
    model: UniMSModel,
    examples: Sequence[EncodedExample],
    vocab: Vocabulary,
    decode_config: DecodeConfig,
    threads: int = 1,
) -> list[Prediction]:
    """Summarize every example, fanning out over a thread pool.

    Returns:
        Predictions in input order.
    """
    workers = max(1, min(threads, len(examples)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        predictions = list(
            pool.map(lambda ex: model.summarize(ex, vocab, decode_config), examples)
        )
    logger.info("summarize_complete", documents=len(predictions), threads=workers)
    return predictions
