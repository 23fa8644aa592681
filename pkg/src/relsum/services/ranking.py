"""Offline ranking evaluation: NDCG@k, recall at a precision target, gains over a baseline."""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..config import EvalConfig
from ..core.corpus import GoldenSplit, JudgedPair, Product, Query
from ..core.reward import CrossEncoderReward, ProductContext, build_context

logger = logging.getLogger(__name__)

__all__ = [
    "CANDIDATE_TAGS",
    "Candidate",
    "OperatingPoint",
    "SplitMetrics",
    "MetricReport",
    "ndcg_at_k",
    "operating_point",
    "recall_at_precision",
    "make_candidates",
    "rank_pool",
    "evaluate",
]

CANDIDATE_TAGS = ("None", "Desc", "SumRef", "RelsumGrpo", "RelsumDpo")
SPLITS = ("full", "tail")


def _gain(label: float, kind: str) -> float:
    return label if kind == "linear" else 2.0**label - 1.0


def ndcg_at_k(ranked_labels: Sequence[float], k: int = 5, gain: str = "linear") -> float | None:
    """NDCG of labels listed in model-score order; None when every label is zero."""

    labels = [float(label) for label in ranked_labels]
    for label in labels:
        if not 0.0 <= label <= 1.0:
            raise ValueError(f"labels must lie in [0, 1], got {label}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    discounts = [1.0 / math.log2(position + 1) for position in range(1, min(k, len(labels)) + 1)]
    dcg = sum(_gain(label, gain) * d for label, d in zip(labels, discounts))
    ideal = sorted(labels, reverse=True)
    idcg = sum(_gain(label, gain) * d for label, d in zip(ideal, discounts))
    if idcg == 0.0:
        return None
    return dcg / idcg


@dataclass(frozen=True, slots=True)
class OperatingPoint:
    recall: float
    threshold: float | None
    precision: float | None

    @property
    def qualified(self) -> bool:
        return self.threshold is not None


def operating_point(scores: Sequence[float], positives: Sequence[bool], target: float = 0.90) -> OperatingPoint:
    """Best recall over global score thresholds whose precision reaches ``target``.

    Items with ``score >= threshold`` count as retrieved. Among thresholds
    with the best recall the highest one is reported.
    """

    values = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(positives, dtype=bool)
    if values.shape != flags.shape:
        raise ValueError("scores and positives must have the same length")
    n_positive = int(flags.sum())
    if n_positive == 0:
        raise ValueError("recall is undefined without positives")
    order = np.argsort(-values, kind="stable")
    sorted_scores = values[order]
    hits = np.cumsum(flags[order])
    best = OperatingPoint(recall=0.0, threshold=None, precision=None)
    # the last index of each run of equal scores closes a threshold
    for idx in range(len(sorted_scores)):
        if idx + 1 < len(sorted_scores) and sorted_scores[idx + 1] == sorted_scores[idx]:
            continue
        retrieved = idx + 1
        precision = hits[idx] / retrieved
        recall = hits[idx] / n_positive
        if precision >= target and recall > best.recall:
            best = OperatingPoint(recall=float(recall), threshold=float(sorted_scores[idx]), precision=float(precision))
    return best


def recall_at_precision(scores: Sequence[float], positives: Sequence[bool], target: float = 0.90) -> float:
    return operating_point(scores, positives, target).recall


@dataclass(frozen=True, slots=True)
class Candidate:
    """A way of building the product context the reranker sees."""

    tag: str
    context_for: Callable[[Product], ProductContext]


def make_candidates(
    budget: int,
    summaries: Mapping[str, Mapping[str, Sequence[str]]],
) -> list[Candidate]:
    """``None`` and ``Desc`` plus one ``[t; s]`` candidate per summary table."""

    candidates = [
        Candidate("None", lambda product: build_context(product.title, None, budget)),
        Candidate("Desc", lambda product: build_context(product.title, product.description, budget)),
    ]
    for tag, table in summaries.items():
        candidates.append(
            Candidate(tag, lambda product, table=table: build_context(product.title, table[product.id], budget))
        )
    return candidates


@dataclass(slots=True)
class SplitMetrics:
    r_at_90p: float
    ndcg_at_5: float
    threshold: float | None
    n_queries: int
    n_ndcg_queries: int
    mean_context_length: float
    mean_abs_err: float
    gain_r: float | None = None
    gain_ndcg: float | None = None
    flags: list[str] = field(default_factory=list)

    def to_payload(self) -> dict[str, object]:
        return {
            "r_at_90p": self.r_at_90p,
            "ndcg_at_5": self.ndcg_at_5,
            "gain_r": self.gain_r,
            "gain_ndcg": self.gain_ndcg,
            "threshold": self.threshold,
            "n_queries": self.n_queries,
            "n_ndcg_queries": self.n_ndcg_queries,
            "mean_context_length": self.mean_context_length,
            "mean_abs_err": self.mean_abs_err,
            "flags": list(self.flags),
        }


@dataclass(slots=True)
class MetricReport:
    """Metrics per candidate and split, in candidate order."""

    metrics: dict[str, dict[str, SplitMetrics]] = field(default_factory=dict)
    baseline: str = "None"

    def to_payload(self) -> dict[str, dict[str, dict[str, object]]]:
        return {
            tag: {split: values.to_payload() for split, values in splits.items()}
            for tag, splits in self.metrics.items()
        }

    def rows(self) -> list[tuple[str, str, SplitMetrics]]:
        return [(tag, split, values) for tag, splits in self.metrics.items() for split, values in splits.items()]


def rank_pool(pairs: Sequence[JudgedPair], scores: Sequence[float]) -> list[tuple[JudgedPair, float]]:
    """Pool sorted by descending score, ties by product id."""

    return sorted(zip(pairs, scores), key=lambda item: (-item[1], item[0].product_id))


def _percent_gain(value: float, baseline: float) -> float | None:
    if baseline == 0.0:
        return None
    return (value - baseline) / baseline * 100.0


def _split_metrics(
    queries: Sequence[Query],
    pairs: Sequence[JudgedPair],
    scores: Mapping[tuple[str, str], float],
    proxy: Mapping[tuple[str, str], float],
    lengths: Mapping[str, int],
    config: EvalConfig,
) -> SplitMetrics:
    by_query: dict[str, list[JudgedPair]] = defaultdict(list)
    for pair in pairs:
        by_query[pair.query_id].append(pair)

    ndcgs: list[float] = []
    for query in sorted(queries, key=lambda q: q.id):
        pool = by_query.get(query.id, [])
        if not pool:
            continue
        ranked = rank_pool(pool, [scores[(p.query_id, p.product_id)] for p in pool])
        value = ndcg_at_k([pair.label for pair, _ in ranked], config.ndcg_k, config.gain)
        if value is not None:
            ndcgs.append(value)

    flags: list[str] = []
    ordered = sorted(pairs, key=lambda p: (p.query_id, p.product_id))
    pooled = [scores[(p.query_id, p.product_id)] for p in ordered]
    positives = [p.rating == 4 for p in ordered]
    if any(positives):
        point = operating_point(pooled, positives, config.precision_target)
        if not point.qualified:
            flags.append("no_threshold_reaches_precision")
    else:
        point = OperatingPoint(0.0, None, None)
        flags.append("no_positives")
    if not ndcgs:
        flags.append("no_ndcg_queries")

    errors = [abs(scores[(p.query_id, p.product_id)] - proxy[(p.query_id, p.product_id)]) for p in ordered]
    return SplitMetrics(
        r_at_90p=point.recall,
        ndcg_at_5=float(np.mean(ndcgs)) if ndcgs else 0.0,
        threshold=point.threshold,
        n_queries=len(queries),
        n_ndcg_queries=len(ndcgs),
        mean_context_length=float(np.mean([lengths[p.product_id] for p in ordered])) if ordered else 0.0,
        mean_abs_err=float(np.mean(errors)) if errors else 0.0,
        flags=flags,
    )


def evaluate(
    candidates: Sequence[Candidate],
    golden: GoldenSplit,
    reward: CrossEncoderReward,
    products: Mapping[str, Product],
    config: EvalConfig | None = None,
) -> MetricReport:
    """Score every golden pair under each candidate context and report gains over ``None``.

    ``mean_abs_err`` compares each candidate's score to the full-description
    score ``r(q, [t; d])`` of the same pair.
    """

    config = config or EvalConfig()
    tags = [c.tag for c in candidates]
    if "None" not in tags:
        raise ValueError("evaluation needs the title-only 'None' candidate as the baseline")
    pairs = sorted(golden.full_pairs, key=lambda p: (p.query_id, p.product_id))
    query_tokens = {q.id: q.tokens for q in golden.full_queries}
    budget = reward.config.context_budget
    queries = [query_tokens[p.query_id] for p in pairs]

    desc_contexts = [build_context(products[p.product_id].title, products[p.product_id].description, budget) for p in pairs]
    proxy_scores = reward.score_batch(queries, desc_contexts)
    proxy = {(p.query_id, p.product_id): float(s) for p, s in zip(pairs, proxy_scores)}

    report = MetricReport()
    for candidate in candidates:
        contexts = {pid: candidate.context_for(products[pid]) for pid in sorted({p.product_id for p in pairs})}
        raw = reward.score_batch(queries, [contexts[p.product_id] for p in pairs])
        scores = {(p.query_id, p.product_id): float(s) for p, s in zip(pairs, raw)}
        lengths = {pid: len(context) for pid, context in contexts.items()}
        report.metrics[candidate.tag] = {
            split: _split_metrics(*golden.split(split), scores, proxy, lengths, config) for split in SPLITS
        }
        logger.info(
            "%s: NDCG@%d full %.4f tail %.4f",
            candidate.tag,
            config.ndcg_k,
            report.metrics[candidate.tag]["full"].ndcg_at_5,
            report.metrics[candidate.tag]["tail"].ndcg_at_5,
        )

    for tag, splits in report.metrics.items():
        for split, values in splits.items():
            base = report.metrics["None"][split]
            values.gain_r = _percent_gain(values.r_at_90p, base.r_at_90p)
            values.gain_ndcg = _percent_gain(values.ndcg_at_5, base.ndcg_at_5)
            if values.gain_r is None or values.gain_ndcg is None:
                values.flags.append("baseline_metric_is_zero")
    return report
