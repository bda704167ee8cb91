"""Multitask training: supervision assembly, schedule, Adam, the step, and the run loop."""

from __future__ import annotations

import json
import math
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, TypeAlias

import numpy as np
import structlog
from pydantic import BaseModel

from src.checkpoint import load_checkpoint, save_checkpoint
from src.dataset import collate, encode_document
from src.errors import ConfigError, InputError, NumericError
from src.models import TrainingExample
from src.oracle import greedy_oracle
from src.tensor import Tape

if TYPE_CHECKING:
    from collections.abc import Sequence
    from pathlib import Path

    from src.config import ModelConfig, TrainConfig
    from src.layers import ParamStore
    from src.model import UniMSModel
    from src.models import MultimodalDocument
    from src.teacher import ImageScorer
    from src.tokenizer import Vocabulary

logger = structlog.get_logger()

LOG_FILE = "train_log.jsonl"
REGISTRY_FILE = "registry.json"
LAST_CHECKPOINT = "last"


class StepLosses(BaseModel, frozen=True):
    """Batch-mean loss terms and optimizer diagnostics of one step."""

    step: int
    kd: float
    ext: float
    abs: float
    total: float
    lr: float
    grad_norm: float


class CheckpointRecord(BaseModel, frozen=True):
    """One entry of the best-checkpoint registry."""

    step: int
    val_loss: float
    path: str


Moments: TypeAlias = dict[str, tuple[np.ndarray[Any, Any], np.ndarray[Any, Any]]]


@dataclass
class TrainState:
    """Optimizer step, Adam moments and the best-k registry (lowest validation loss first)."""

    step: int = 0
    moments: Moments = field(default_factory=dict)
    registry: list[CheckpointRecord] = field(default_factory=list)


# ── Supervision ──────────────────────────────────────


def build_training_example(
    doc: MultimodalDocument,
    vocab: Vocabulary,
    config: ModelConfig,
    teacher: ImageScorer,
) -> TrainingExample:
    """Encode a document and attach its oracle labels and teacher image scores.

    The oracle runs over the sentences that survive truncation.
    """
    example = encode_document(doc, vocab, config)
    visible = [doc.sentences[i] for i in example.sentence_index]
    oracle = greedy_oracle(visible, doc.summary)
    scores = teacher.score(doc).scores if example.image_valid else []
    return TrainingExample(
        example=example,
        oracle_labels=oracle.as_labels(len(visible)),
        teacher_scores=scores,
    )


def build_training_examples(
    docs: Sequence[MultimodalDocument],
    vocab: Vocabulary,
    config: ModelConfig,
    teacher: ImageScorer,
    threads: int = 1,
) -> list[TrainingExample]:
    """Supervise every document, fanning out over a thread pool (order preserved)."""
    workers = max(1, min(threads, len(docs)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        items = list(pool.map(lambda d: build_training_example(d, vocab, config, teacher), docs))
    logger.info("training_examples_built", documents=len(items), teacher=teacher.name)
    return items


# ── Optimization ─────────────────────────────────────


def lr_schedule(step: int, warmup: int, total: int, peak: float) -> float:
    """Linear warmup to ``peak`` over ``warmup`` steps, then linear decay to 0 at ``total``.

    Raises:
        ConfigError: If warmup >= total.
        InputError: If step is outside 1..total.
    """
    if warmup >= total:
        msg = f"warmup ({warmup}) must be < total ({total})"
        raise ConfigError(msg)
    if not 1 <= step <= total:
        msg = f"step {step} outside 1..{total}"
        raise InputError(msg)
    if step <= warmup:
        return peak * step / warmup
    return peak * (total - step) / (total - warmup)


def clip_gradients(params: ParamStore, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most max_norm.

    Returns:
        The norm before clipping.
    """
    grads = [t.grad for _, t in params.items() if t.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if not math.isfinite(norm):
        msg = f"non-finite gradient norm {norm}"
        raise NumericError(msg)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for _, t in params.items():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


class Adam:
    """Adam with bias correction; parameters without a gradient are left untouched."""

    def __init__(self, config: TrainConfig) -> None:
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.eps = config.eps

    def update(self, params: ParamStore, state: TrainState, lr: float) -> None:
        t = state.step
        for name, param in params.items():
            if param.grad is None:
                continue
            m, v = state.moments.get(name, (np.zeros_like(param.data), np.zeros_like(param.data)))
            m = self.beta1 * m + (1.0 - self.beta1) * param.grad
            v = self.beta2 * v + (1.0 - self.beta2) * param.grad * param.grad
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            state.moments[name] = (m, v)


def train_step(
    batch: Sequence[TrainingExample],
    model: UniMSModel,
    state: TrainState,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> StepLosses:
    """One optimizer step on a padded batch.

    Forward every example, back-propagate the batch-mean total, clip the
    global gradient norm and apply Adam at the scheduled learning rate.

    Raises:
        InputError: On an empty batch.
        NumericError: If the loss or the gradients are not finite.
    """
    if not batch:
        msg = "train_step needs a non-empty batch"
        raise InputError(msg)
    step = state.step + 1
    padded = collate([item.example for item in batch])
    items = [item.model_copy(update={"example": ex}) for item, ex in zip(batch, padded, strict=True)]

    model.params.zero_grad()
    with Tape() as tape:
        terms = [model.forward(item, rng) for item in items]
        total = terms[0].total_tensor
        for t in terms[1:]:
            total = total + t.total_tensor
        total = total * (1.0 / len(terms))
        if not math.isfinite(total.item()):
            diag = ", ".join(
                f"{item.example.doc_id}: kd={t.kd:.4g} ext={t.ext:.4g} abs={t.abs:.4g}"
                for item, t in zip(items, terms, strict=True)
            )
            msg = f"non-finite loss at step {step} ({diag})"
            raise NumericError(msg)
        tape.backward(total)

    grad_norm = clip_gradients(model.params, config.grad_clip)
    lr = lr_schedule(step, config.warmup_steps, config.total_steps, config.peak_lr)
    state.step = step
    Adam(config).update(model.params, state, lr)
    return StepLosses(
        step=step,
        kd=float(np.mean([t.kd for t in terms])),
        ext=float(np.mean([t.ext for t in terms])),
        abs=float(np.mean([t.abs for t in terms])),
        total=total.item(),
        lr=lr,
        grad_norm=grad_norm,
    )


def validation_loss(model: UniMSModel, items: Sequence[TrainingExample]) -> float:
    """Mean total loss over items, dropout off and nothing recorded."""
    if not items:
        msg = "validation needs at least one example"
        raise InputError(msg)
    return float(np.mean([model.forward(item).total for item in items]))


# ── Run loop ─────────────────────────────────────────


class Trainer:
    """Drives training with a step-determined batch order, validation and a top-k registry.

    The batch for step s depends only on (seed, s), so a run resumed from a
    checkpoint sees exactly the batches the unbroken run would have.
    """

    def __init__(
        self,
        model: UniMSModel,
        train_items: Sequence[TrainingExample],
        config: TrainConfig,
        *,
        val_items: Sequence[TrainingExample] | None = None,
        out_dir: Path | None = None,
        seed: int = 7,
        state: TrainState | None = None,
    ) -> None:
        if not train_items:
            msg = "Trainer needs at least one training example"
            raise InputError(msg)
        self.model = model
        self.train_items = list(train_items)
        self.val_items = list(val_items) if val_items else self.train_items
        self.config = config
        self.out_dir = out_dir
        self.seed = seed
        self.state = state or TrainState()

    @classmethod
    def resume(
        cls,
        model: UniMSModel,
        checkpoint_dir: Path,
        train_items: Sequence[TrainingExample],
        config: TrainConfig,
        **kwargs: Any,  # noqa: ANN401
    ) -> Trainer:
        """Continue from a saved checkpoint; the model's config must match the stored one."""
        ckpt = load_checkpoint(checkpoint_dir, expected=model.config)
        model.params = ckpt.params
        state = TrainState(
            step=ckpt.step,
            moments=ckpt.moments,
            registry=[CheckpointRecord.model_validate(r) for r in ckpt.registry],
        )
        logger.info("training_resumed", step=ckpt.step, path=str(checkpoint_dir))
        return cls(model, train_items, config, state=state, **kwargs)

    def batch_for_step(self, step: int) -> list[TrainingExample]:
        n = len(self.train_items)
        size = min(self.config.batch_size, n)
        per_epoch = math.ceil(n / size)
        epoch, pos = divmod(step - 1, per_epoch)
        order = np.random.default_rng([self.seed, epoch]).permutation(n)
        return [self.train_items[int(i)] for i in order[pos * size : (pos + 1) * size]]

    def _dropout_rng(self, step: int) -> np.random.Generator | None:
        if self.model.config.dropout <= 0:
            return None
        return np.random.default_rng([self.seed, step, 1])

    def _log(self, record: dict[str, Any]) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with (self.out_dir / LOG_FILE).open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")

    def fit(self, steps: int | None = None) -> list[StepLosses]:
        """Train until total_steps, or for ``steps`` more steps.

        Returns:
            Loss terms of every step run by this call.
        """
        target = self.config.total_steps
        if steps is not None:
            target = min(self.state.step + steps, target)
        history: list[StepLosses] = []
        while self.state.step < target:
            step = self.state.step + 1
            losses = train_step(
                self.batch_for_step(step), self.model, self.state, self.config,
                self._dropout_rng(step),
            )
            history.append(losses)
            self._log({"event": "step", **losses.model_dump()})
            if step % 50 == 0 or step == 1:
                logger.info("train_step", step=step, total=round(losses.total, 4), lr=losses.lr)
            if step % self.config.eval_every == 0 or step == self.config.total_steps:
                self.evaluate_and_checkpoint()
        return history

    def evaluate_and_checkpoint(self) -> float:
        """Compute the validation loss, update the registry and save checkpoints."""
        step = self.state.step
        val = validation_loss(self.model, self.val_items)
        self._log({"event": "validation", "step": step, "val_loss": val})
        logger.info("validation", step=step, val_loss=round(val, 4))
        if self.out_dir is None:
            self._register(CheckpointRecord(step=step, val_loss=val, path=""))
            return val

        keep = self._register(
            CheckpointRecord(
                step=step, val_loss=val, path=str(self.out_dir / "checkpoints" / f"step-{step:06d}")
            )
        )
        if keep is not None:
            self._save(self.out_dir / "checkpoints" / f"step-{step:06d}")
        self._save(self.out_dir / LAST_CHECKPOINT)
        (self.out_dir / REGISTRY_FILE).write_text(
            json.dumps([r.model_dump() for r in self.state.registry], indent=2) + "\n"
        )
        return val

    def _register(self, record: CheckpointRecord) -> CheckpointRecord | None:
        """Insert record if it ranks in the top k; returns it when kept."""
        ranked = sorted([*self.state.registry, record], key=lambda r: (r.val_loss, r.step))
        kept, evicted = ranked[: self.config.keep_top_k], ranked[self.config.keep_top_k :]
        for old in evicted:
            if old is not record and old.path:
                shutil.rmtree(old.path, ignore_errors=True)
                logger.warning("checkpoint_evicted", step=old.step, val_loss=old.val_loss)
        self.state.registry = kept
        return record if record in kept else None

    def _save(self, path: Path) -> None:
        save_checkpoint(
            path,
            self.model.params,
            self.model.config,
            self.state.step,
            moments=self.state.moments,
            registry=[r.model_dump() for r in self.state.registry],
        )
