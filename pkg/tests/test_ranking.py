import itertools
import math

import numpy as np
import pytest

from relsum.config import EvalConfig
from relsum.core.corpus import split_golden
from relsum.core.policy import heuristic_summary
from relsum.services.ranking import (
    evaluate,
    make_candidates,
    ndcg_at_k,
    operating_point,
    rank_pool,
    recall_at_precision,
)

from .conftest import TINY_CORPUS

TINY_EVAL_QUERIES = TINY_CORPUS["n_eval_queries"]


def _dcg(labels, k):
    return sum(label / math.log2(position + 2) for position, label in enumerate(labels[:k]))


def _brute_ndcg(labels, k):
    best = max(_dcg(list(order), k) for order in itertools.permutations(labels))
    return None if best == 0 else _dcg(list(labels), k) / best


def _brute_recall(scores, positives, target):
    best = 0.0
    n_positive = sum(positives)
    for threshold in set(scores):
        retrieved = [p for s, p in zip(scores, positives) if s >= threshold]
        precision = sum(retrieved) / len(retrieved)
        if precision >= target:
            best = max(best, sum(retrieved) / n_positive)
    return best


def test_ndcg_of_a_known_ranking():
    assert ndcg_at_k([1.0, 0.0, 0.5, 0.0, 0.0], k=5) == pytest.approx(0.9503, abs=1e-4)
    assert ndcg_at_k([1.0, 0.5, 0.0], k=5) == pytest.approx(1.0)
    assert ndcg_at_k([0.0, 0.0, 0.0], k=5) is None


def test_ndcg_validates_labels_and_cutoff():
    with pytest.raises(ValueError):
        ndcg_at_k([1.2, 0.0])
    with pytest.raises(ValueError):
        ndcg_at_k([1.0], k=0)


def test_exponential_gain_weights_perfect_matches_more():
    linear = ndcg_at_k([0.5, 1.0], k=2)
    exponential = ndcg_at_k([0.5, 1.0], k=2, gain="exponential")

    assert exponential < linear


def test_ndcg_agrees_with_exhaustive_ideal_ordering():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        labels = [float(x) for x in rng.choice([0.0, 0.5, 1.0], size=n)]
        k = int(rng.integers(1, 6))
        expected = _brute_ndcg(labels, k)
        value = ndcg_at_k(labels, k)
        if expected is None:
            assert value is None
        else:
            assert value == pytest.approx(expected, abs=1e-12)


def test_recall_at_precision_of_a_known_pool():
    point = operating_point([0.9, 0.8, 0.7, 0.6], [True, True, False, True], 0.90)

    assert point.recall == pytest.approx(2 / 3)
    assert point.threshold == pytest.approx(0.8)
    assert point.precision == 1.0
    assert recall_at_precision([0.9, 0.8, 0.7], [True, True, True]) == 1.0


def test_recall_is_zero_when_no_threshold_is_precise_enough():
    point = operating_point([0.9, 0.8], [False, True], 0.90)

    assert point.recall == 0.0
    assert not point.qualified
    with pytest.raises(ValueError):
        operating_point([0.9, 0.8], [False, False])


def test_recall_agrees_with_exhaustive_threshold_search():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        scores = [float(s) for s in np.round(rng.random(n), 1)]
        positives = [bool(p) for p in rng.random(n) < 0.6]
        if not any(positives):
            continue
        target = float(rng.choice([0.5, 0.75, 0.9, 1.0]))
        assert recall_at_precision(scores, positives, target) == pytest.approx(_brute_recall(scores, positives, target))


def test_recall_never_grows_with_a_stricter_target():
    rng = np.random.default_rng(2)
    scores = list(rng.random(40))
    positives = list(rng.random(40) < 0.5)

    recalls = [recall_at_precision(scores, positives, t) for t in (0.3, 0.5, 0.7, 0.9, 1.0)]

    assert recalls == sorted(recalls, reverse=True)


def test_pool_ties_break_by_product_id(tiny_corpus):
    pairs = tiny_corpus.pairs[:3]

    ranked = rank_pool(pairs, [0.5, 0.5, 0.9])

    assert ranked[0][0] is pairs[2]
    assert [p.product_id for p, _ in ranked[1:]] == sorted(p.product_id for p in pairs[:2])


def _golden(corpus):
    return split_golden(corpus.queries_in("eval"), corpus.pairs_in("eval"))


def test_evaluation_reports_every_candidate_against_the_title_baseline(frozen_reward, tiny_corpus):
    budget = frozen_reward.config.context_budget
    products = {p.id: p for p in tiny_corpus.products}
    table = {p.id: heuristic_summary(p.title, p.description, 3) for p in tiny_corpus.products}

    report = evaluate(make_candidates(budget, {"SumRef": table}), _golden(tiny_corpus), frozen_reward, products, EvalConfig())

    assert list(report.metrics) == ["None", "Desc", "SumRef"]
    baseline = report.metrics["None"]["full"]
    assert baseline.gain_ndcg == 0.0
    assert baseline.n_queries == TINY_EVAL_QUERIES
    assert report.metrics["Desc"]["full"].mean_abs_err == 0.0
    assert report.metrics["None"]["tail"].n_queries == TINY_EVAL_QUERIES // 3
    assert report.metrics["None"]["full"].mean_context_length < report.metrics["Desc"]["full"].mean_context_length
    assert set(report.to_payload()["SumRef"]["tail"]) >= {"r_at_90p", "ndcg_at_5", "gain_r", "gain_ndcg", "flags"}
    assert len(report.rows()) == 6


def test_evaluation_needs_the_title_baseline(frozen_reward, tiny_corpus):
    budget = frozen_reward.config.context_budget
    products = {p.id: p for p in tiny_corpus.products}
    desc_only = [c for c in make_candidates(budget, {}) if c.tag == "Desc"]

    with pytest.raises(ValueError):
        evaluate(desc_only, _golden(tiny_corpus), frozen_reward, products)
