"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` only when a tape is
open on the current thread and at least one input requires a gradient. Outside
a tape nothing is recorded, so inference can share parameters across threads.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, TypeAlias

import numpy as np
import structlog

from src.errors import DimensionError, InputError, NumericError

if TYPE_CHECKING:
    from types import TracebackType

logger = structlog.get_logger()

Array: TypeAlias = np.ndarray[Any, np.dtype[np.float64]]
BackwardRule: TypeAlias = Callable[[Array], tuple[Array | None, ...]]

GELU_C = float(np.sqrt(2.0 / np.pi))
KL_FLOOR = 1e-12
_MASKED = -1e9

_local = threading.local()


class Tensor:
    """A row-major float64 array with an optional gradient."""

    __slots__ = ("data", "grad", "name", "requires_grad")

    def __init__(
        self,
        data: Any,  # noqa: ANN401
        requires_grad: bool = False,
        name: str = "",
    ) -> None:
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        """Return the value of a one-element tensor."""
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        """Return a copy of the data."""
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operators delegate to the module-level ops
    def __add__(self, other: Tensor | float | Array) -> Tensor:
        return add(self, other)

    def __radd__(self, other: float | Array) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Tensor | float | Array) -> Tensor:
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other: float | Array) -> Tensor:
        return add(other, neg(self))

    def __mul__(self, other: Tensor | float | Array) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: float | Array) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: float) -> Tensor:
        return mul(self, 1.0 / other)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:  # noqa: ANN401
        return take(self, index)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis, keepdims)

    def mean(self) -> Tensor:
        return reduce_sum(self) * (1.0 / max(self.size, 1))

    def reshape(self, *shape: int) -> Tensor:
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes)


@dataclass
class TapeEntry:
    """One recorded operation."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


@dataclass
class Tape:
    """Ordered record of operations applied while the tape is open.

    Entries are appended as operations run, so every entry's inputs were
    produced by earlier entries (or are leaves).
    """

    entries: list[TapeEntry] = field(default_factory=list)

    def __enter__(self) -> Tape:
        stack: list[Tape] = getattr(_local, "stack", [])
        stack.append(self)
        _local.stack = stack
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        tb: TracebackType | None,
    ) -> None:
        _local.stack.pop()

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(x) to every leaf tensor that requires a gradient.

        Gradients accumulate into ``leaf.grad``.

        Args:
            loss: Scalar output recorded on this tape.

        Raises:
            DimensionError: If loss is not a scalar.
            NumericError: If loss is not finite.
        """
        if loss.size != 1:
            msg = f"backward needs a scalar loss, got shape {loss.shape}"
            raise DimensionError(msg)
        if not np.isfinite(loss.data).all():
            msg = f"non-finite loss {loss.item()}"
            raise NumericError(msg)

        grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
        produced = {id(e.output) for e in self.entries}
        leaves: dict[int, Tensor] = {}

        for entry in reversed(self.entries):
            g_out = grads.pop(id(entry.output), None)
            if g_out is None:
                continue
            for tensor, g in zip(entry.inputs, entry.backward(g_out), strict=True):
                if g is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in produced:
                    leaves[key] = tensor

        for key, tensor in leaves.items():
            g = grads[key]
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def current_tape() -> Tape | None:
    """Return the innermost open tape on this thread, if any."""
    stack: list[Tape] = getattr(_local, "stack", [])
    return stack[-1] if stack else None


def as_tensor(x: Tensor | float | Array) -> Tensor:
    """Wrap a constant as a tensor that never receives gradients."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: Array, inputs: tuple[Tensor, ...], backward: BackwardRule) -> Tensor:
    tape = current_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad and tape is not None:
        tape.record(TapeEntry(op, inputs, out, backward))
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ── Elementwise ──────────────────────────────────────


def add(a: Tensor | float | Array, b: Tensor | float | Array) -> Tensor:
    """Broadcasting elementwise sum."""
    ta, tb = as_tensor(a), as_tensor(b)
    try:
        data = ta.data + tb.data
    except ValueError as e:
        msg = f"add shape mismatch: {ta.shape} + {tb.shape}"
        raise DimensionError(msg) from e

    def backward(g: Array) -> tuple[Array | None, ...]:
        return _unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)

    return _make("add", data, (ta, tb), backward)


def mul(a: Tensor | float | Array, b: Tensor | float | Array) -> Tensor:
    """Broadcasting elementwise product."""
    ta, tb = as_tensor(a), as_tensor(b)
    try:
        data = ta.data * tb.data
    except ValueError as e:
        msg = f"mul shape mismatch: {ta.shape} * {tb.shape}"
        raise DimensionError(msg) from e

    def backward(g: Array) -> tuple[Array | None, ...]:
        return _unbroadcast(g * tb.data, ta.shape), _unbroadcast(g * ta.data, tb.shape)

    return _make("mul", data, (ta, tb), backward)


def neg(x: Tensor) -> Tensor:
    def backward(g: Array) -> tuple[Array | None, ...]:
        return (-g,)

    return _make("neg", -x.data, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def backward(g: Array) -> tuple[Array | None, ...]:
        return (g * out_data,)

    return _make("exp", out_data, (x,), backward)


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        msg = "log of a non-positive value"
        raise NumericError(msg)

    def backward(g: Array) -> tuple[Array | None, ...]:
        return (g / x.data,)

    return _make("log", np.log(x.data), (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU activation, tanh approximation."""
    u = GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def backward(g: Array) -> tuple[Array | None, ...]:
        du = GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _make("gelu", data, (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no generator is given."""
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return mul(x, keep)


# ── Shape ────────────────────────────────────────────


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape

    def backward(g: Array) -> tuple[Array | None, ...]:
        return (g.reshape(original),)

    return _make("reshape", x.data.reshape(tuple(shape)), (x,), backward)


def transpose(x: Tensor, axes: Sequence[int] = ()) -> Tensor:
    """Permute axes; with no axes, swap the last two."""
    if not axes:
        order = list(range(x.ndim))
        order[-2], order[-1] = order[-1], order[-2]
        axes = order
    perm = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(perm))

    def backward(g: Array) -> tuple[Array | None, ...]:
        return (g.transpose(inverse),)

    return _make("transpose", x.data.transpose(perm), (x,), backward)


def take(x: Tensor, index: Any) -> Tensor:  # noqa: ANN401
    """Basic or fancy indexing with scatter-add backward."""
    data = np.asarray(x.data[index])

    def backward(g: Array) -> tuple[Array | None, ...]:
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make("take", data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an existing axis."""
    if not tensors:
        msg = "concat needs at least one tensor"
        raise InputError(msg)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        shapes = [t.shape for t in tensors]
        msg = f"concat shape mismatch along axis {axis}: {shapes}"
        raise DimensionError(msg) from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: Array) -> tuple[Array | None, ...]:
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", data, tuple(tensors), backward)


def reduce_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g: Array) -> tuple[Array | None, ...]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", data, (x,), backward)


# ── Linear algebra ───────────────────────────────────


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes.

    Raises:
        DimensionError: If the inner dimensions disagree.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        msg = f"matmul shape mismatch: {a.shape} @ {b.shape}"
        raise DimensionError(msg)
    data = np.matmul(a.data, b.data)

    def backward(g: Array) -> tuple[Array | None, ...]:
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", data, (a, b), backward)


def embedding(table: Tensor, ids: Sequence[int] | np.ndarray[Any, Any]) -> Tensor:
    """Row lookup; backward scatter-adds into the table."""
    index = np.asarray(ids, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        msg = f"embedding id out of range for table of {table.shape[0]} rows"
        raise InputError(msg)
    return take(table, index)


# ── Normalization and probabilities ──────────────────


def _check_finite(x: Tensor, op: str) -> None:
    if np.isnan(x.data).any():
        msg = f"{op} received NaN input"
        raise NumericError(msg)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax.

    Raises:
        NumericError: On NaN input.
    """
    _check_finite(x, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g: Array) -> tuple[Array | None, ...]:
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g: Array) -> tuple[Array | None, ...]:
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then apply gain and bias."""
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        msg = f"layer_norm shape mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}"
        raise DimensionError(msg)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    data = xhat * gain.data + bias.data

    def backward(g: Array) -> tuple[Array | None, ...]:
        dxhat = g * gain.data
        dx = (
            inv_std
            / d
            * (
                d * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make("layer_norm", data, (x, gain, bias), backward)


def cross_entropy(logits: Tensor, targets: Sequence[int], ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood of integer targets over rows of logits.

    Raises:
        InputError: If every target is ignored.
    """
    if logits.ndim != 2 or logits.shape[0] != len(targets):
        msg = f"cross_entropy shape mismatch: logits {logits.shape}, targets {len(targets)}"
        raise DimensionError(msg)
    _check_finite(logits, "cross_entropy")
    tgt = np.asarray(targets, dtype=np.int64)
    valid = np.ones(len(tgt), dtype=bool) if ignore_index is None else tgt != ignore_index
    count = int(valid.sum())
    if count == 0:
        msg = "cross_entropy target contains only ignored positions"
        raise InputError(msg)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, tgt[rows]].sum() / count

    def backward(g: Array) -> tuple[Array | None, ...]:
        grad = np.exp(logp)
        grad[rows, tgt[rows]] -= 1.0
        grad[~valid] = 0.0
        return (grad * (g / count),)

    return _make("cross_entropy", np.asarray(loss), (logits,), backward)


def bce_with_logits(logits: Tensor, labels: Sequence[float]) -> Tensor:
    """Mean sigmoid binary cross-entropy, stable for large |logit|."""
    y = np.asarray(labels, dtype=np.float64)
    if logits.shape != y.shape:
        msg = f"bce shape mismatch: logits {logits.shape}, labels {y.shape}"
        raise DimensionError(msg)
    _check_finite(logits, "bce_with_logits")
    x = logits.data
    n = max(x.size, 1)
    loss = (np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))).sum() / n

    def backward(g: Array) -> tuple[Array | None, ...]:
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return ((sig - y) * (g / n),)

    return _make("bce", np.asarray(loss), (logits,), backward)


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) = sum p * ln(p / q) for probability vectors.

    Zero-mass entries of p contribute nothing. Gradients reach q only if q
    requires them; teacher distributions are passed as constants.

    Raises:
        InputError: If p or q is not a probability vector of equal length.
        NumericError: If q has zero mass where p does not.
    """
    if p.shape != q.shape or p.ndim != 1:
        msg = f"kl_divergence needs equal-length vectors: {p.shape} vs {q.shape}"
        raise InputError(msg)
    for name, t in (("p", p), ("q", q)):
        if (t.data < 0).any() or abs(t.data.sum() - 1.0) > 1e-6:
            msg = f"kl_divergence: {name} is not a probability vector"
            raise InputError(msg)
    if ((q.data <= 0) & (p.data > 0)).any():
        msg = "kl_divergence: q has zero mass where p is positive; clamp q first"
        raise NumericError(msg)
    log_p = np.log(np.maximum(p.data, KL_FLOOR))
    log_q = np.log(np.maximum(q.data, KL_FLOOR))
    value = float(np.where(p.data > 0, p.data * (log_p - log_q), 0.0).sum())

    def backward(g: Array) -> tuple[Array | None, ...]:
        gp = g * (log_p - log_q + 1.0)
        gq = g * (-p.data / np.maximum(q.data, KL_FLOOR))
        return gp, gq

    return _make("kl_divergence", np.asarray(value), (p, q), backward)


def attention_mask(valid_keys: np.ndarray[Any, Any], n_queries: int, causal: bool = False) -> Array:
    """Additive mask of shape (n_queries, n_keys): 0 where visible, -1e9 elsewhere.

    Args:
        valid_keys: Boolean vector, True for real (non-padding) keys.
        n_queries: Number of query positions.
        causal: Also hide keys after the query position.
    """
    n_keys = len(valid_keys)
    visible = np.broadcast_to(np.asarray(valid_keys, dtype=bool), (n_queries, n_keys)).copy()
    if causal:
        visible &= np.tril(np.ones((n_queries, n_keys), dtype=bool))
    return np.where(visible, 0.0, _MASKED)


# ── Gradient checking ────────────────────────────────


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    The relative error per entry is |analytic - numeric| / max(|analytic|, |numeric|, 1e-4);
    the floor keeps near-zero gradients from amplifying round-off.

    Args:
        f: Scalar-valued function of x. It must not mutate x.
        x: Point of evaluation; its requires_grad flag is restored afterwards.
        step: Finite-difference step.
        max_entries: Check a seeded random subset of this many entries.
        seed: Seed for the subset.

    Returns:
        The maximum relative error over checked entries.
    """
    x.data = np.ascontiguousarray(x.data)
    was_required = x.requires_grad
    x.requires_grad = True
    saved_grad = x.grad
    x.grad = None
    try:
        with Tape() as tape:
            out = f(x)
            tape.backward(out)
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    finally:
        x.requires_grad = was_required
        x.grad = saved_grad

    flat = x.data.reshape(-1)
    indices = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        indices = np.sort(np.random.default_rng(seed).choice(flat.size, max_entries, replace=False))

    worst = 0.0
    for i in indices:
        original = flat[i]
        flat[i] = original + step
        up = f(x).item()
        flat[i] = original - step
        down = f(x).item()
        flat[i] = original
        numeric = (up - down) / (2 * step)
        a = float(analytic.reshape(-1)[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-4)
        worst = max(worst, err)
    logger.debug("grad_check", entries=len(indices), max_rel_err=worst)
    return worst
