import pytest

from relsum.config import CorpusConfig
from relsum.core.corpus import (
    TokenVocab,
    Product,
    Query,
    JudgedPair,
    gen_catalog,
    generate_corpus,
    judge,
    rating_to_label,
    split_golden,
    validate_product,
)
from relsum.errors import CorpusError

from .conftest import TINY_CORPUS


def _query(targets, weight=1.0, qid="q0"):
    return Query(id=qid, tokens=tuple(targets), targets=tuple(targets), weight=weight)


def _product(attributes):
    return Product(id="p0", attributes=tuple(attributes), title=(attributes[0],), description=tuple(attributes))


def test_vocab_puts_control_tokens_first():
    vocab = TokenVocab(n_attributes=3, n_filler=2)

    assert vocab.pad_id == 0
    assert vocab.tokens[vocab.n_control:] == ("attr000", "attr001", "attr002", "w000", "w001")
    assert vocab.is_attribute("attr001")
    assert not vocab.is_attribute("w000")
    assert vocab.decode(vocab.encode(["[EOS]", "w001"])) == ["[EOS]", "w001"]
    with pytest.raises(CorpusError):
        vocab.id_of("attr999")


def test_judge_counts_missing_target_attributes():
    product = _product(["attr000", "attr001", "attr002"])

    assert judge(_query(["attr000", "attr001"]), product) == 4
    assert judge(_query(["attr000", "attr005"]), product) == 3
    assert judge(_query(["attr000", "attr005", "attr006"]), product) == 2
    assert judge(_query(["attr007"]), product) == 1


def test_ratings_map_to_graded_labels():
    assert rating_to_label(4) == 1.0
    assert rating_to_label(3) == 0.5
    assert rating_to_label(2) == 0.0
    with pytest.raises(CorpusError):
        rating_to_label(5)
    with pytest.raises(CorpusError):
        rating_to_label(True)


def test_pair_payload_must_agree_with_its_rating():
    with pytest.raises(CorpusError):
        JudgedPair.from_payload({"query_id": "q0", "product_id": "p0", "rating": 3, "label": 1.0})


def test_catalog_hides_attributes_from_titles():
    config = CorpusConfig(**TINY_CORPUS)
    vocab = TokenVocab(config.n_attributes, config.n_filler)

    products = gen_catalog(config, seed=4, vocab=vocab)

    assert len(products) == config.n_products
    for product in products:
        validate_product(product, vocab, config)
        hidden = set(product.attributes) - set(product.title)
        assert hidden


def test_generation_is_deterministic_per_seed():
    config = CorpusConfig(**TINY_CORPUS)

    first = generate_corpus(config, seed=9)
    second = generate_corpus(config, seed=9)
    other = generate_corpus(config, seed=10)

    assert [p.to_payload() for p in first.products] == [p.to_payload() for p in second.products]
    assert [q.to_payload() for q in first.queries] == [q.to_payload() for q in second.queries]
    assert [p.to_payload() for p in first.pairs] == [p.to_payload() for p in second.pairs]
    assert [p.to_payload() for p in first.products] != [p.to_payload() for p in other.products]


def test_every_query_is_judged_against_its_source_product(tiny_corpus):
    by_query = tiny_corpus.pairs_by_query()

    assert len(tiny_corpus.queries_in("eval")) == TINY_CORPUS["n_eval_queries"]
    for query in tiny_corpus.queries:
        pairs = by_query[query.id]
        assert len(pairs) == TINY_CORPUS["pairs_per_query"]
        source = [p for p in pairs if p.product_id == query.source_product]
        assert source and source[0].rating == 4
        assert set(query.targets) <= set(query.tokens)


def test_golden_tail_is_the_lowest_traffic_tertile(tiny_corpus):
    queries = tiny_corpus.queries_in("eval")
    golden = split_golden(queries, tiny_corpus.pairs_in("eval"))

    assert len(golden.tail_queries) == len(queries) // 3
    lowest_head = min(q.weight for q in golden.full_queries[: -len(golden.tail_queries)])
    assert all(q.weight <= lowest_head for q in golden.tail_queries)
    tail_ids = {q.id for q in golden.tail_queries}
    assert {p.query_id for p in golden.tail_pairs} == tail_ids
    assert golden.split("tail") == (golden.tail_queries, golden.tail_pairs)


def test_golden_split_needs_three_queries():
    queries = [_query(["attr000"], qid="q0"), _query(["attr001"], qid="q1")]

    with pytest.raises(CorpusError):
        split_golden(queries, [])
