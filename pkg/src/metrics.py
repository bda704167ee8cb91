"""Image precision, the teacher-based M_sim proxy, novel n-grams, importance maps,
and the evaluation report that combines them with ROUGE."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from statistics import fmean
from typing import TYPE_CHECKING, Any

import numpy as np
import structlog

from src.dataset import retained_sentences
from src.errors import InputError
from src.models import (
    EvaluationReport,
    ExampleEvaluation,
    ImportanceMaps,
    NgramCurvePoint,
    NovelNgramStats,
    RougeTriple,
)
from src.oracle import extractive_text, greedy_oracle, lead
from src.rouge import ngrams, rouge_l, rouge_n

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

    from src.config import ModelConfig
    from src.encoder import EncoderOutput
    from src.layers import ParamStore
    from src.models import EncodedExample, MultimodalDocument, Prediction
    from src.teacher import ImageScorer
    from src.tokenizer import Vocabulary

logger = structlog.get_logger()

NGRAM_ORDERS = (1, 2, 3, 4)


def image_precision(selected: Iterable[int], annotated: Iterable[int]) -> float:
    """Fraction of selected images that are annotated as relevant.

    Raises:
        InputError: If nothing is selected.
    """
    chosen = set(selected)
    if not chosen:
        msg = "image_precision needs at least one selected image"
        raise InputError(msg)
    return len(chosen & set(annotated)) / len(chosen)


def msim_proxy(
    selected: Iterable[int],
    summary: Sequence[str],
    doc: MultimodalDocument,
    teacher: ImageScorer,
) -> float:
    """Highest teacher score among the selected images against the generated summary.

    Raises:
        InputError: If nothing is selected.
    """
    chosen = sorted(set(selected))
    if not chosen:
        msg = "msim_proxy needs at least one selected image"
        raise InputError(msg)
    scores = teacher.score(doc, summary).scores
    return max(scores[i] for i in chosen)


def novel_ngrams(
    summary: Sequence[str], source: Sequence[str], reference: Sequence[str], n: int
) -> NovelNgramStats:
    """Distinct summary n-grams absent from the source, and their recall of the reference's.

    Raises:
        InputError: If n is outside 1..4.
    """
    if n not in NGRAM_ORDERS:
        msg = f"novel_ngrams supports n in 1..4, got {n}"
        raise InputError(msg)
    seen = set(ngrams(source, n))
    novel_summary = set(ngrams(summary, n)) - seen
    novel_reference = set(ngrams(reference, n)) - seen
    recall = (
        len(novel_summary & novel_reference) / len(novel_reference) if novel_reference else 0.0
    )
    return NovelNgramStats(n=n, count=len(novel_summary), novel_recall=recall)


def _min_max(values: np.ndarray[Any, Any]) -> np.ndarray[Any, Any]:
    if values.size == 0:
        return values
    span = values.max() - values.min()
    if span <= 0:
        return np.zeros_like(values)
    return (values - values.min()) / span


def cross_modal_importance(
    enc_out: EncoderOutput,
    params: ParamStore,
    example: EncodedExample,
    vocab: Vocabulary | None = None,
) -> ImportanceMaps:
    """Class-activation maps across modalities.

    The extraction head scores every patch state of each real image and the
    image-selection head scores every real text token at the tap layer. Each
    map is min-max normalized over the whole example; a constant map becomes
    all zeros.
    """
    block = 1 + example.patches_per_image
    patch_rows = [
        example.text_length + i * block + 1 + j
        for i in range(example.image_valid)
        for j in range(example.patches_per_image)
    ]
    patch_scores = np.zeros(0)
    if patch_rows:
        states = enc_out.h.data[patch_rows]
        patch_scores = (states @ params["head.ext.w"].data + params["head.ext.b"].data).reshape(-1)
    patch_scores = _min_max(patch_scores).reshape(example.image_valid, example.patches_per_image)

    text_states = enc_out.tapped.data[: example.text_valid]
    token_scores = (text_states @ params["head.sel.w"].data + params["head.sel.b"].data).reshape(-1)
    ids = example.token_ids[: example.text_valid]
    return ImportanceMaps(
        doc_id=example.doc_id,
        patch_maps=[[float(v) for v in row] for row in patch_scores],
        token_map=[float(v) for v in _min_max(token_scores)],
        tokens=vocab.decode(ids, strip_special=False) if vocab is not None else [],
    )


# ── Evaluation report ────────────────────────────────


def rouge_triple(candidate: Sequence[str], reference: Sequence[str]) -> RougeTriple:
    return RougeTriple(
        r1=rouge_n(candidate, reference, 1).f1,
        r2=rouge_n(candidate, reference, 2).f1,
        rl=rouge_l(candidate, reference).f1,
    )


def _mean_triple(triples: Sequence[RougeTriple]) -> RougeTriple:
    if not triples:
        return RougeTriple()
    return RougeTriple(
        r1=fmean(t.r1 for t in triples),
        r2=fmean(t.r2 for t in triples),
        rl=fmean(t.rl for t in triples),
    )


def evaluate_example(
    prediction: Prediction,
    doc: MultimodalDocument,
    config: ModelConfig,
    teacher: ImageScorer | None = None,
) -> ExampleEvaluation:
    """Score one prediction against its document.

    LEAD-3 and the greedy oracle are computed on the sentences the model saw.
    """
    kept = retained_sentences(doc, config.max_text_tokens)
    visible = [doc.sentences[i] for i in kept]
    oracle = greedy_oracle(visible, doc.summary)

    ip = None
    if doc.image_refs is not None and prediction.images:
        ip = image_precision(prediction.images, doc.image_refs)
    msim = None
    if teacher is not None and prediction.images:
        msim = msim_proxy(prediction.images, prediction.abstractive, doc, teacher)

    return ExampleEvaluation(
        id=prediction.id,
        extractive=rouge_triple(extractive_text(doc.sentences, prediction.extractive), doc.summary),
        abstractive=rouge_triple(prediction.abstractive, doc.summary),
        lead=rouge_triple(extractive_text(visible, lead(len(visible))), doc.summary),
        oracle=rouge_triple(extractive_text(visible, oracle.selected), doc.summary),
        image_precision=ip,
        msim=msim,
    )


def _ngram_curve(
    predictions: Sequence[Prediction], docs: dict[str, MultimodalDocument]
) -> list[NgramCurvePoint]:
    curve: list[NgramCurvePoint] = []
    for n in NGRAM_ORDERS:
        stats: list[NovelNgramStats] = []
        reference_counts: list[int] = []
        for pred in predictions:
            doc = docs[pred.id]
            source = doc.source_tokens()
            stats.append(novel_ngrams(pred.abstractive, source, doc.summary, n))
            reference_counts.append(novel_ngrams(doc.summary, source, doc.summary, n).count)
        curve.append(
            NgramCurvePoint(
                n=n,
                count=fmean(s.count for s in stats) if stats else 0.0,
                novel_recall=fmean(s.novel_recall for s in stats) if stats else 0.0,
                reference_count=fmean(reference_counts) if reference_counts else 0.0,
            )
        )
    return curve


def evaluate_predictions(
    predictions: Sequence[Prediction],
    docs: Sequence[MultimodalDocument],
    config: ModelConfig,
    teacher: ImageScorer | None = None,
    threads: int = 1,
    source: str = "",
) -> EvaluationReport:
    """Per-example and corpus-mean metrics for one set of predictions.

    Documents without image annotations are skipped for image precision and
    counted in ``ip_skipped``.

    Raises:
        InputError: If a prediction names an unknown document.
    """
    by_id = {doc.id: doc for doc in docs}
    missing = [p.id for p in predictions if p.id not in by_id]
    if missing:
        msg = f"predictions for unknown documents: {', '.join(missing[:5])}"
        raise InputError(msg)

    workers = max(1, min(threads, len(predictions)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        examples = list(
            pool.map(lambda p: evaluate_example(p, by_id[p.id], config, teacher), predictions)
        )

    ips = [e.image_precision for e in examples if e.image_precision is not None]
    msims = [e.msim for e in examples if e.msim is not None]
    skipped = len(examples) - len(ips)
    if skipped:
        logger.warning("image_precision_skipped", documents=skipped)
    report = EvaluationReport(
        source=source,
        examples=examples,
        extractive=_mean_triple([e.extractive for e in examples]),
        abstractive=_mean_triple([e.abstractive for e in examples]),
        lead=_mean_triple([e.lead for e in examples]),
        oracle=_mean_triple([e.oracle for e in examples]),
        image_precision=fmean(ips) if ips else None,
        ip_skipped=skipped,
        msim=fmean(msims) if msims else None,
        novel_ngrams=_ngram_curve(predictions, by_id),
    )
    logger.info(
        "evaluation_complete",
        source=source,
        documents=len(examples),
        abs_rl=round(report.abstractive.rl, 4),
        ip=report.image_precision,
    )
    return report


def _mean_optional(values: Iterable[float | None]) -> float | None:
    present = [v for v in values if v is not None]
    return fmean(present) if present else None


def average_reports(reports: Sequence[EvaluationReport]) -> EvaluationReport:
    """Metric-average several reports (one per checkpoint); per-example rows are dropped.

    Raises:
        InputError: If no reports are given.
    """
    if not reports:
        msg = "average_reports needs at least one report"
        raise InputError(msg)
    curve = [
        NgramCurvePoint(
            n=points[0].n,
            count=fmean(p.count for p in points),
            novel_recall=fmean(p.novel_recall for p in points),
            reference_count=fmean(p.reference_count for p in points),
        )
        for points in zip(*(r.novel_ngrams for r in reports), strict=True)
    ]
    return EvaluationReport(
        source="mean",
        extractive=_mean_triple([r.extractive for r in reports]),
        abstractive=_mean_triple([r.abstractive for r in reports]),
        lead=_mean_triple([r.lead for r in reports]),
        oracle=_mean_triple([r.oracle for r in reports]),
        image_precision=_mean_optional(r.image_precision for r in reports),
        ip_skipped=max(r.ip_skipped for r in reports),
        msim=_mean_optional(r.msim for r in reports),
        novel_ngrams=curve,
    )
