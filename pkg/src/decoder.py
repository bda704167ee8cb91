"""Visual-guided decoder, the abstractive loss and the multitask total.

Each decoder layer runs causal self-attention, then cross-attention over the
visual states, then cross-attention over the textual states, then the FFN,
every sub-block followed by a post-norm residual. With the visual guide
switched off, the textual block attends over the concatenated text and
visual states instead and the visual block is never called.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np

from src.encoder import TOKEN_EMBEDDING
from src.layers import (
    ParamStore,
    feed_forward,
    init_attention,
    init_ffn,
    init_layer_norm,
    multi_head_attention,
    norm,
    residual_block,
)
from src.tensor import Tensor, attention_mask, concat, cross_entropy, dropout, embedding, matmul, transpose
from src.tokenizer import PAD

if TYPE_CHECKING:
    from collections.abc import Sequence

    from src.config import ModelConfig
    from src.encoder import EncoderOutput


def init_decoder_params(store: ParamStore, config: ModelConfig, rng: np.random.Generator) -> None:
    """Allocate decoder positions, layers and the output bias.

    Every layer owns two separate cross-attention blocks, ``cross_v`` and
    ``cross_t``. The output projection reuses the shared token embedding.
    """
    d = config.d_model
    store.normal("dec.pos", (config.max_target_positions, d), config.init_std, rng)
    init_layer_norm(store, "dec.emb_ln", d)
    for i in range(config.n_dec_layers):
        prefix = f"dec.layer{i}"
        for block in ("self", "cross_v", "cross_t"):
            init_attention(store, f"{prefix}.{block}", config, rng)
            init_layer_norm(store, f"{prefix}.{block}_ln", d)
        init_ffn(store, f"{prefix}.ffn", config, rng)
        init_layer_norm(store, f"{prefix}.ffn_ln", d)
    store.zeros("dec.out_bias", (config.vocab_size,))


def decoder_layer(
    y: Tensor,
    h_v: Tensor | None,
    h_t: Tensor,
    params: ParamStore,
    layer: int,
    config: ModelConfig,
    *,
    v_valid: np.ndarray[Any, Any] | None = None,
    t_valid: np.ndarray[Any, Any] | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """One visual-guided decoder layer.

    Args:
        y: Target-side states, shape (T, d).
        h_v: Visual encoder states, or None / empty when there are no images.
        h_t: Textual encoder states.
        params: Model parameters.
        layer: Layer index.
        config: Model configuration (heads, dropout, visual_guide switch).
        v_valid: Boolean mask over h_v, False on padded image slots.
        t_valid: Boolean mask over h_t, False on PAD tokens.
        rng: Dropout generator.

    Returns:
        Updated target-side states.
    """
    prefix = f"dec.layer{layer}"
    heads, rate = config.n_heads, config.dropout
    t_valid = np.ones(h_t.shape[0], dtype=bool) if t_valid is None else t_valid
    # Skip the visual stream entirely when no real image survives masking
    visual: tuple[Tensor, np.ndarray[Any, Any]] | None = None
    if h_v is not None and h_v.shape[0] > 0:
        keys = np.ones(h_v.shape[0], dtype=bool) if v_valid is None else v_valid
        if keys.any():
            visual = (h_v, keys)

    n = y.shape[0]
    causal = attention_mask(np.ones(n, dtype=bool), n, causal=True)
    y = residual_block(
        y, multi_head_attention(y, y, params, f"{prefix}.self", heads, causal),
        params, f"{prefix}.self_ln", rate, rng,
    )
    memory, valid = h_t, t_valid
    if visual is not None and config.visual_guide:
        v_states, v_keys = visual
        y = residual_block(
            y,
            multi_head_attention(
                y, v_states, params, f"{prefix}.cross_v", heads, attention_mask(v_keys, n)
            ),
            params, f"{prefix}.cross_v_ln", rate, rng,
        )
    elif visual is not None:
        memory = concat([h_t, visual[0]], axis=0)
        valid = np.concatenate([t_valid, visual[1]])
    y = residual_block(
        y,
        multi_head_attention(y, memory, params, f"{prefix}.cross_t", heads, attention_mask(valid, n)),
        params, f"{prefix}.cross_t_ln", rate, rng,
    )
    return residual_block(
        y, feed_forward(y, params, f"{prefix}.ffn"), params, f"{prefix}.ffn_ln", rate, rng
    )


def decode(
    enc_out: EncoderOutput,
    target_in: Sequence[int],
    params: ParamStore,
    config: ModelConfig,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Teacher-forced decoder pass.

    Args:
        enc_out: Encoder output for the source document.
        target_in: BOS-prefixed target ids.
        params: Model parameters.
        config: Model configuration.
        rng: Dropout generator.

    Returns:
        Logits of shape (len(target_in), vocab_size), tied to the token embedding.
    """
    table = params[TOKEN_EMBEDDING]
    positions = np.arange(len(target_in))
    y = embedding(table, target_in) + embedding(params["dec.pos"], positions)
    y = dropout(norm(y, params, "dec.emb_ln"), config.dropout, rng)
    h_v = enc_out.h_v if enc_out.has_images else None
    h_t = enc_out.h_t
    for i in range(config.n_dec_layers):
        y = decoder_layer(
            y, h_v, h_t, params, i, config,
            v_valid=enc_out.visual_mask, t_valid=enc_out.text_mask, rng=rng,
        )
    return matmul(y, transpose(table)) + params["dec.out_bias"]


def abs_loss(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood over non-PAD targets.

    Raises:
        InputError: If every target is PAD.
    """
    return cross_entropy(logits, targets, ignore_index=PAD)


@dataclass(frozen=True)
class LossTerms:
    """The three objectives and their unweighted sum (still on the tape)."""

    kd: float
    ext: float
    abs: float
    total_tensor: Tensor

    @property
    def total(self) -> float:
        return self.total_tensor.item()

    def as_dict(self) -> dict[str, float]:
        return {"kd": self.kd, "ext": self.ext, "abs": self.abs, "total": self.total}


def total_loss(kd: Tensor, ext: Tensor, abs_: Tensor) -> LossTerms:
    """L = L_KD + L_Ext + L_Abs, keeping each term for logging."""
    return LossTerms(kd=kd.item(), ext=ext.item(), abs=abs_.item(), total_tensor=kd + ext + abs_)
