"""Multimodal encoder, its two scoring heads, and the encoder-side losses.

The joint sequence is the text stream followed by one ``[v_CLS] + patches``
block per image slot. Text tokens take joint positions ``0..T-1``; visual
tokens always start at ``max_text_tokens`` so text padding never shifts them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np
import structlog

from src.errors import DimensionError, InputError
from src.layers import (
    ParamStore,
    feed_forward,
    init_attention,
    init_ffn,
    init_layer_norm,
    linear,
    multi_head_attention,
    norm,
    residual_block,
    self_attention_mask,
)
from src.tensor import (
    KL_FLOOR,
    Tensor,
    bce_with_logits,
    concat,
    dropout,
    embedding,
    kl_divergence,
    log_softmax,
    matmul,
    reshape,
    softmax,
    take,
)

if TYPE_CHECKING:
    from collections.abc import Sequence

    from src.config import ExtLossMode, ModelConfig
    from src.models import EncodedExample

logger = structlog.get_logger()

TOKEN_EMBEDDING = "shared.tok_emb"


def init_encoder_params(store: ParamStore, config: ModelConfig, rng: np.random.Generator) -> None:
    """Allocate embeddings, encoder layers and both scoring heads."""
    d = config.d_model
    store.normal(TOKEN_EMBEDDING, (config.vocab_size, d), config.init_std, rng)
    store.normal("enc.patch_proj", (config.patch_dim, d), config.init_std, rng)
    store.normal("enc.v_cls", (1, d), config.init_std, rng)
    store.normal("enc.v_pos", (1 + config.patches_per_image, d), config.init_std, rng)
    store.normal("enc.e_pos", (config.max_positions, d), config.init_std, rng)
    init_layer_norm(store, "enc.emb_ln", d)
    for i in range(config.n_enc_layers):
        init_attention(store, f"enc.layer{i}.attn", config, rng)
        init_layer_norm(store, f"enc.layer{i}.attn_ln", d)
        init_ffn(store, f"enc.layer{i}.ffn", config, rng)
        init_layer_norm(store, f"enc.layer{i}.ffn_ln", d)
    store.normal("head.sel.w", (d, 1), config.init_std, rng)
    store.zeros("head.sel.b", (1,))
    store.normal("head.ext.w", (d, 1), config.init_std, rng)
    store.zeros("head.ext.b", (1,))


@dataclass(frozen=True)
class EncoderOutput:
    """Joint hidden states with the bookkeeping the heads and decoder need."""

    h: Tensor
    # States after the KD tap layer
    tapped: Tensor
    text_length: int
    sentence_cls_idx: list[int]
    image_cls_idx: list[int]
    key_mask: np.ndarray[Any, Any]

    @property
    def h_t(self) -> Tensor:
        return take(self.h, slice(0, self.text_length))

    @property
    def h_v(self) -> Tensor:
        return take(self.h, slice(self.text_length, self.h.shape[0]))

    @property
    def text_mask(self) -> np.ndarray[Any, Any]:
        return self.key_mask[: self.text_length]

    @property
    def visual_mask(self) -> np.ndarray[Any, Any]:
        return self.key_mask[self.text_length :]

    @property
    def has_images(self) -> bool:
        return bool(self.visual_mask.any())


def joint_positions(example: EncodedExample, config: ModelConfig) -> np.ndarray[Any, Any]:
    """Row of the joint position table used by each sequence element."""
    text = np.arange(example.text_length)
    visual = config.max_text_tokens + np.arange(example.visual_length)
    return np.concatenate([text, visual])


def _check_extents(example: EncodedExample, config: ModelConfig) -> None:
    if example.text_length > config.max_text_tokens:
        msg = f"text length {example.text_length} exceeds max_text_tokens {config.max_text_tokens}"
        raise DimensionError(msg)
    if example.image_slots > config.max_images:
        msg = f"{example.image_slots} image slots exceed max_images {config.max_images}"
        raise DimensionError(msg)
    if example.image_slots and example.patches.shape[1:] != (
        config.patches_per_image,
        config.patch_dim,
    ):
        msg = (
            f"patch block shape {example.patches.shape[1:]} does not match "
            f"({config.patches_per_image}, {config.patch_dim})"
        )
        raise DimensionError(msg)


def embed_multimodal(
    example: EncodedExample,
    params: ParamStore,
    config: ModelConfig,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Embed text ids and projected patches into one joint sequence.

    Each image slot becomes ``[v_CLS; patches @ W_v] + v_pos``; the joint
    position table and an embedding LayerNorm are applied on top.

    Raises:
        DimensionError: If the example exceeds the configured maxima.
        InputError: If a token id is outside the vocabulary.
    """
    _check_extents(example, config)
    parts = [embedding(params[TOKEN_EMBEDDING], example.token_ids)]
    slots = example.image_slots
    if slots:
        n_patches = example.patches_per_image
        flat = Tensor(example.patches.reshape(slots * n_patches, config.patch_dim))
        projected = reshape(matmul(flat, params["enc.patch_proj"]), (slots, n_patches, config.d_model))
        v_cls = reshape(params["enc.v_cls"], (1, 1, config.d_model)) * np.ones((slots, 1, 1))
        blocks = concat([v_cls, projected], axis=1) + params["enc.v_pos"]
        parts.append(reshape(blocks, (slots * (1 + n_patches), config.d_model)))
    joint = concat(parts, axis=0) if len(parts) > 1 else parts[0]
    joint = joint + embedding(params["enc.e_pos"], joint_positions(example, config))
    return dropout(norm(joint, params, "enc.emb_ln"), config.dropout, rng)


def encode(
    embeddings: Tensor,
    example: EncodedExample,
    params: ParamStore,
    config: ModelConfig,
    rng: np.random.Generator | None = None,
) -> EncoderOutput:
    """Run the bidirectional post-norm transformer stack over the joint sequence.

    Args:
        embeddings: Output of embed_multimodal, shape (L, d).
        example: The example the embeddings came from (masks and indices).
        params: Model parameters.
        config: Model configuration.
        rng: Dropout generator; None disables dropout.

    Returns:
        Final states, the tap-layer states and the sequence bookkeeping.
    """
    key_mask = example.key_mask()
    if embeddings.shape[0] != len(key_mask):
        msg = f"embeddings length {embeddings.shape[0]} != sequence length {len(key_mask)}"
        raise DimensionError(msg)
    mask = self_attention_mask(key_mask)
    x = embeddings
    tapped = x
    for i in range(config.n_enc_layers):
        prefix = f"enc.layer{i}"
        attended = multi_head_attention(x, x, params, f"{prefix}.attn", config.n_heads, mask)
        x = residual_block(x, attended, params, f"{prefix}.attn_ln", config.dropout, rng)
        x = residual_block(
            x, feed_forward(x, params, f"{prefix}.ffn"), params, f"{prefix}.ffn_ln",
            config.dropout, rng,
        )
        if i + 1 == config.tap_layer:
            tapped = x
    return EncoderOutput(
        h=x,
        tapped=tapped,
        text_length=example.text_length,
        sentence_cls_idx=list(example.sentence_cls),
        image_cls_idx=example.image_cls,
        key_mask=key_mask,
    )


def image_select_scores(enc_out: EncoderOutput, params: ParamStore) -> Tensor:
    """Image-selection head applied to each real image's [v_CLS] at the tap layer.

    Raises:
        InputError: If the example has no images.
    """
    if not enc_out.image_cls_idx:
        msg = "image_select_scores needs at least one image"
        raise InputError(msg)
    rows = take(enc_out.tapped, np.asarray(enc_out.image_cls_idx))
    scores = linear(rows, params["head.sel.w"], params["head.sel.b"])
    return reshape(scores, (len(enc_out.image_cls_idx),))


def sentence_scores(enc_out: EncoderOutput, params: ParamStore) -> Tensor:
    """Extraction head applied to each sentence's [CLS] in the final states."""
    rows = take(enc_out.h, np.asarray(enc_out.sentence_cls_idx))
    scores = linear(rows, params["head.ext.w"], params["head.ext.b"])
    return reshape(scores, (len(enc_out.sentence_cls_idx),))


def soften(scores: Sequence[float] | np.ndarray[Any, Any], temperature: float) -> np.ndarray[Any, Any]:
    """softmax(scores / temperature) as a plain array."""
    z = np.asarray(scores, dtype=np.float64) / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


def kd_loss(student: Tensor, teacher: Sequence[float], temperature: float) -> Tensor:
    """KL(p || q) between temperature-softened student and teacher score vectors.

    The teacher side is a constant; there is no temperature-squared rescaling.

    Raises:
        InputError: On length mismatch, an empty vector or a non-positive temperature.
    """
    if temperature <= 0:
        msg = f"kd temperature must be > 0, got {temperature}"
        raise InputError(msg)
    if student.ndim != 1 or student.shape[0] != len(teacher) or not len(teacher):
        msg = f"kd_loss needs equal non-empty lengths: student {student.shape}, teacher {len(teacher)}"
        raise InputError(msg)
    p = softmax(student * (1.0 / temperature), axis=-1)
    q = np.maximum(soften(teacher, temperature), KL_FLOOR)
    return kl_divergence(p, Tensor(q / q.sum()))


@dataclass(frozen=True)
class ExtLoss:
    loss: Tensor
    degenerate: bool = False


def ext_loss(scores: Tensor, labels: Sequence[int], mode: ExtLossMode = "bce") -> ExtLoss:
    """Extractive loss against oracle labels.

    ``bce`` is the mean sigmoid cross-entropy per sentence; ``softmax_nll``
    is the negative log-softmax summed over oracle-positive sentences.

    Returns:
        The loss and whether the labels were degenerate (no positive), in
        which case the loss is a constant zero.
    """
    if scores.shape != (len(labels),):
        msg = f"ext_loss shape mismatch: scores {scores.shape}, {len(labels)} labels"
        raise DimensionError(msg)
    y = np.asarray(labels, dtype=np.float64)
    if not y.any():
        logger.warning("degenerate_ext_labels", sentences=len(labels))
        return ExtLoss(Tensor(0.0), degenerate=True)
    if mode == "bce":
        return ExtLoss(bce_with_logits(scores, y))
    return ExtLoss(-(log_softmax(scores, axis=-1) * y).sum())
