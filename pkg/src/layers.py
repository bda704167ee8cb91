"""Named parameter storage and the transformer building blocks shared by encoder and decoder."""

from __future__ import annotations

from collections.abc import Iterator
from typing import TYPE_CHECKING, Any

import numpy as np

from src.errors import InputError
from src.tensor import (
    Tensor,
    attention_mask,
    dropout,
    gelu,
    layer_norm,
    matmul,
    reshape,
    softmax,
    transpose,
)

if TYPE_CHECKING:
    from src.config import ModelConfig


class ParamStore:
    """Ordered mapping of parameter names to trainable tensors."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def set(self, name: str, data: np.ndarray[Any, Any]) -> Tensor:
        """Insert or replace a parameter."""
        tensor = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def normal(self, name: str, shape: tuple[int, ...], std: float, rng: np.random.Generator) -> Tensor:
        """Truncated normal init: draws beyond two standard deviations are redrawn."""
        values = rng.standard_normal(shape)
        outside = np.abs(values) > 2.0
        while outside.any():
            values[outside] = rng.standard_normal(int(outside.sum()))
            outside = np.abs(values) > 2.0
        return self.set(name, values * std)

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.set(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.set(name, np.ones(shape))

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def snapshot(self) -> dict[str, np.ndarray[Any, Any]]:
        """Copies of every parameter array."""
        return {name: t.data.copy() for name, t in self._params.items()}


# ── Initializers ─────────────────────────────────────


def init_layer_norm(store: ParamStore, prefix: str, d: int) -> None:
    store.ones(f"{prefix}.g", (d,))
    store.zeros(f"{prefix}.b", (d,))


def init_attention(store: ParamStore, prefix: str, config: ModelConfig, rng: np.random.Generator) -> None:
    d = config.d_model
    for proj in ("q", "k", "v", "o"):
        store.normal(f"{prefix}.w{proj}", (d, d), config.init_std, rng)
        store.zeros(f"{prefix}.b{proj}", (d,))


def init_ffn(store: ParamStore, prefix: str, config: ModelConfig, rng: np.random.Generator) -> None:
    store.normal(f"{prefix}.w1", (config.d_model, config.ffn_dim), config.init_std, rng)
    store.zeros(f"{prefix}.b1", (config.ffn_dim,))
    store.normal(f"{prefix}.w2", (config.ffn_dim, config.d_model), config.init_std, rng)
    store.zeros(f"{prefix}.b2", (config.d_model,))


# ── Blocks ───────────────────────────────────────────


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return matmul(x, w) + b


def norm(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    return layer_norm(x, store[f"{prefix}.g"], store[f"{prefix}.b"])


def multi_head_attention(
    x: Tensor,
    memory: Tensor,
    store: ParamStore,
    prefix: str,
    n_heads: int,
    mask: np.ndarray[Any, Any],
) -> Tensor:
    """Scaled dot-product attention of x (queries) over memory (keys/values).

    Args:
        x: Queries, shape (Lq, d).
        memory: Keys and values, shape (Lk, d).
        store: Parameter store holding ``{prefix}.w{q,k,v,o}`` and biases.
        prefix: Parameter name prefix.
        n_heads: Number of heads; d must divide evenly.
        mask: Additive mask of shape (Lq, Lk).

    Returns:
        Attended values projected back to (Lq, d).
    """
    lq, d = x.shape
    lk = memory.shape[0]
    if lk == 0:
        msg = f"{prefix}: attention over an empty memory"
        raise InputError(msg)
    dh = d // n_heads

    def heads(t: Tensor, length: int) -> Tensor:
        return transpose(reshape(t, (length, n_heads, dh)), (1, 0, 2))

    q = heads(linear(x, store[f"{prefix}.wq"], store[f"{prefix}.bq"]), lq)
    k = heads(linear(memory, store[f"{prefix}.wk"], store[f"{prefix}.bk"]), lk)
    v = heads(linear(memory, store[f"{prefix}.wv"], store[f"{prefix}.bv"]), lk)
    scores = matmul(q, transpose(k)) * (1.0 / np.sqrt(dh)) + mask
    attended = matmul(softmax(scores, axis=-1), v)
    merged = reshape(transpose(attended, (1, 0, 2)), (lq, d))
    return linear(merged, store[f"{prefix}.wo"], store[f"{prefix}.bo"])


def feed_forward(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    hidden = gelu(linear(x, store[f"{prefix}.w1"], store[f"{prefix}.b1"]))
    return linear(hidden, store[f"{prefix}.w2"], store[f"{prefix}.b2"])


def residual_block(
    x: Tensor,
    update: Tensor,
    store: ParamStore,
    ln_prefix: str,
    rate: float,
    rng: np.random.Generator | None,
) -> Tensor:
    """Post-norm residual: LN(x + dropout(update))."""
    return norm(x + dropout(update, rate, rng), store, ln_prefix)


def self_attention_mask(valid: np.ndarray[Any, Any], causal: bool = False) -> np.ndarray[Any, Any]:
    return attention_mask(valid, len(valid), causal=causal)
