"""Synthetic e-commerce world: vocabulary, catalog, queries, judgments, golden splits.

Every product carries a hidden attribute set. Titles reveal a strict,
nonempty subset of it while descriptions list all of it among filler tokens,
so a query asking for a hidden attribute can only be matched once the
description (or a summary of it) is in the product context.
"""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..config import CorpusConfig
from ..errors import CorpusError
from .seeding import derive_rng

logger = logging.getLogger(__name__)

__all__ = [
    "SPECIAL_TOKENS",
    "INSTRUCTION_TOKENS",
    "TokenVocab",
    "Product",
    "Query",
    "JudgedPair",
    "GoldenSplit",
    "Corpus",
    "RATING_LABELS",
    "rating_to_label",
    "judge",
    "gen_catalog",
    "gen_queries",
    "gen_pairs",
    "generate_corpus",
    "split_golden",
    "validate_product",
]

PAD, CLS, SEP, DESCRIPTION, TITLE, EOS = "[PAD]", "[CLS]", "[SEP]", "[DESCRIPTION]:", "[TITLE]:", "[EOS]"
SPECIAL_TOKENS: tuple[str, ...] = (PAD, CLS, SEP, DESCRIPTION, TITLE, EOS)
# "Product attributes appearing in [DESCRIPTION] but not in [TITLE] are:"
INSTRUCTION_TOKENS: tuple[str, ...] = (
    "product", "attributes", "appearing", "in", "[DESCRIPTION]", "but", "not", "in", "[TITLE]", "are:",
)

RATING_LABELS: dict[int, float] = {4: 1.0, 3: 0.5, 2: 0.0, 1: 0.0, 0: 0.0}


@dataclass(slots=True, frozen=True)
class TokenVocab:
    """Closed vocabulary shared by the policy and the reward model."""

    n_attributes: int = 200
    n_filler: int = 300
    tokens: tuple[str, ...] = field(init=False)
    _index: Mapping[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        control = tuple(dict.fromkeys(SPECIAL_TOKENS + INSTRUCTION_TOKENS))
        attributes = tuple(f"attr{i:03d}" for i in range(self.n_attributes))
        filler = tuple(f"w{i:03d}" for i in range(self.n_filler))
        tokens = control + attributes + filler
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "_index", {token: idx for idx, token in enumerate(tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def n_control(self) -> int:
        return self.size - self.n_attributes - self.n_filler

    @property
    def attribute_tokens(self) -> tuple[str, ...]:
        start = self.n_control
        return self.tokens[start:start + self.n_attributes]

    @property
    def filler_tokens(self) -> tuple[str, ...]:
        return self.tokens[self.n_control + self.n_attributes:]

    def is_attribute(self, token: str) -> bool:
        idx = self._index.get(token)
        return idx is not None and self.n_control <= idx < self.n_control + self.n_attributes

    def id_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError as exc:
            raise CorpusError(f"token {token!r} is not in the vocabulary") from exc

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id_of(token) for token in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def cls_id(self) -> int:
        return self._index[CLS]

    @property
    def sep_id(self) -> int:
        return self._index[SEP]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]


@dataclass(slots=True)
class Product:
    id: str
    attributes: tuple[str, ...]
    title: tuple[str, ...]
    description: tuple[str, ...]

    def to_payload(self) -> dict[str, object]:
        return {
            "id": self.id,
            "title": list(self.title),
            "description": list(self.description),
            "attributes": list(self.attributes),
        }

    @classmethod
    def from_payload(cls, payload: Mapping[str, object]) -> "Product":
        return cls(
            id=str(payload["id"]),
            attributes=tuple(payload["attributes"]),
            title=tuple(payload["title"]),
            description=tuple(payload["description"]),
        )


@dataclass(slots=True)
class Query:
    id: str
    tokens: tuple[str, ...]
    targets: tuple[str, ...]
    weight: float
    source_product: str = ""
    split: str = "train"

    def to_payload(self) -> dict[str, object]:
        return {
            "id": self.id,
            "tokens": list(self.tokens),
            "targets": list(self.targets),
            "weight": self.weight,
            "source_product": self.source_product,
            "split": self.split,
        }

    @classmethod
    def from_payload(cls, payload: Mapping[str, object]) -> "Query":
        return cls(
            id=str(payload["id"]),
            tokens=tuple(payload["tokens"]),
            targets=tuple(payload["targets"]),
            weight=float(payload["weight"]),
            source_product=str(payload.get("source_product", "")),
            split=str(payload.get("split", "train")),
        )


@dataclass(slots=True)
class JudgedPair:
    query_id: str
    product_id: str
    rating: int
    label: float

    def to_payload(self) -> dict[str, object]:
        return {"query_id": self.query_id, "product_id": self.product_id, "rating": self.rating, "label": self.label}

    @classmethod
    def from_payload(cls, payload: Mapping[str, object]) -> "JudgedPair":
        rating = int(payload["rating"])
        label = float(payload["label"])
        if rating_to_label(rating) != label:
            raise CorpusError(f"label {label} does not match rating {rating}")
        return cls(query_id=str(payload["query_id"]), product_id=str(payload["product_id"]), rating=rating, label=label)


@dataclass(slots=True)
class GoldenSplit:
    """Evaluation queries and pairs; ``tail`` is the lowest-traffic tertile."""

    full_queries: list[Query]
    full_pairs: list[JudgedPair]
    tail_queries: list[Query]
    tail_pairs: list[JudgedPair]

    def split(self, name: str) -> tuple[list[Query], list[JudgedPair]]:
        if name == "full":
            return self.full_queries, self.full_pairs
        if name == "tail":
            return self.tail_queries, self.tail_pairs
        raise KeyError(f"unknown split '{name}'")


@dataclass(slots=True)
class Corpus:
    vocab: TokenVocab
    products: list[Product]
    queries: list[Query]
    pairs: list[JudgedPair]
    _products_by_id: dict[str, Product] = field(default_factory=dict, repr=False, compare=False)
    _queries_by_id: dict[str, Query] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self._products_by_id = {p.id: p for p in self.products}
        self._queries_by_id = {q.id: q for q in self.queries}

    def product(self, product_id: str) -> Product:
        try:
            return self._products_by_id[product_id]
        except KeyError as exc:
            raise CorpusError(f"unknown product '{product_id}'") from exc

    def query(self, query_id: str) -> Query:
        try:
            return self._queries_by_id[query_id]
        except KeyError as exc:
            raise CorpusError(f"unknown query '{query_id}'") from exc

    def queries_in(self, split: str) -> list[Query]:
        return [q for q in self.queries if q.split == split]

    def pairs_in(self, split: str) -> list[JudgedPair]:
        wanted = {q.id for q in self.queries_in(split)}
        return [p for p in self.pairs if p.query_id in wanted]

    def pairs_by_query(self) -> dict[str, list[JudgedPair]]:
        grouped: dict[str, list[JudgedPair]] = defaultdict(list)
        for pair in self.pairs:
            grouped[pair.query_id].append(pair)
        return dict(grouped)


# -- Judging -------------------------------------------------------------
def rating_to_label(rating: int) -> float:
    """Rating 4 is a perfect match (1), 3 has one attribute mismatched (0.5), the rest 0."""

    if isinstance(rating, bool) or int(rating) != rating or rating not in RATING_LABELS:
        raise CorpusError(f"rating must be an integer in 0..4, got {rating!r}")
    return RATING_LABELS[int(rating)]


def judge(query: Query, product: Product) -> int:
    """Simulated human rating from target-attribute membership only."""

    if not query.targets:
        raise CorpusError(f"query '{query.id}' has no target attributes")
    owned = set(product.attributes)
    matched = sum(1 for target in query.targets if target in owned)
    missing = len(query.targets) - matched
    if missing == 0:
        return 4
    if missing == 1 and matched >= 1:
        return 3
    if matched >= 1:
        return 2
    return 1


# -- Generation ----------------------------------------------------------
def validate_product(product: Product, vocab: TokenVocab, config: CorpusConfig) -> None:
    attributes = set(product.attributes)
    title_attrs = {t for t in product.title if vocab.is_attribute(t)}
    desc_attrs = {t for t in product.description if vocab.is_attribute(t)}
    if not title_attrs or not title_attrs < attributes:
        raise CorpusError(f"product '{product.id}': title must reveal a strict nonempty attribute subset")
    if desc_attrs != attributes:
        raise CorpusError(f"product '{product.id}': description must contain exactly its attributes")
    if len(product.title) > config.title_max:
        raise CorpusError(f"product '{product.id}': title longer than {config.title_max}")
    if not config.desc_min <= len(product.description) <= config.desc_max:
        raise CorpusError(f"product '{product.id}': description length {len(product.description)} out of range")


def _reveal_mask(rng: np.random.Generator, k: int, reveal_prob: float) -> np.ndarray:
    while True:
        mask = rng.random(k) < reveal_prob
        if 0 < mask.sum() < k:
            return mask


def gen_catalog(config: CorpusConfig, seed: int, vocab: TokenVocab | None = None) -> list[Product]:
    """Deterministic catalog; every product satisfies :func:`validate_product`."""

    config.validate()
    vocab = vocab or TokenVocab(config.n_attributes, config.n_filler)
    attributes = np.array(vocab.attribute_tokens)
    filler = np.array(vocab.filler_tokens)
    rng = derive_rng(seed, "catalog")
    products: list[Product] = []

    for index in range(config.n_products):
        k = int(rng.integers(config.attrs_min, config.attrs_max + 1))
        owned = [str(a) for a in rng.choice(attributes, size=k, replace=False)]
        revealed = [a for a, keep in zip(owned, _reveal_mask(rng, k, config.reveal_prob)) if keep]

        n_title_filler = int(rng.integers(config.title_filler_min, config.title_filler_max + 1))
        n_title_filler = min(n_title_filler, config.title_max - len(revealed))
        title = revealed + [str(w) for w in rng.choice(filler, size=n_title_filler)]
        title = [title[i] for i in rng.permutation(len(title))]

        length = int(rng.integers(max(config.desc_min, k), config.desc_max + 1))
        slots = set(int(i) for i in rng.choice(length, size=k, replace=False))
        order = iter(owned[i] for i in rng.permutation(k))
        description = [next(order) if pos in slots else str(rng.choice(filler)) for pos in range(length)]

        products.append(
            Product(
                id=f"p{index:05d}",
                attributes=tuple(owned),
                title=tuple(title),
                description=tuple(description),
            )
        )
    logger.info("generated %d products over %d attributes", len(products), config.n_attributes)
    return products


def gen_queries(
    products: Sequence[Product],
    config: CorpusConfig,
    seed: int,
    vocab: TokenVocab | None = None,
) -> list[Query]:
    """Queries with Zipf traffic; lower-traffic queries ask for more attributes.

    A query's rank percentile ``u`` (0 = head, 1 = tail) sets its target
    count to ``1 + Binomial(max_targets - 1, u)``: head queries are short,
    tail queries are specific and more often name an attribute the title hides.
    """

    vocab = vocab or TokenVocab(config.n_attributes, config.n_filler)
    filler = vocab.filler_tokens
    total = config.n_train_queries + config.n_eval_queries
    if total == 0:
        return []
    if not products:
        raise CorpusError("cannot generate queries without products")
    rng = derive_rng(seed, "queries")
    ranks = rng.permutation(total)
    eval_ids = set(int(i) for i in rng.choice(total, size=config.n_eval_queries, replace=False))
    queries: list[Query] = []

    for index in range(total):
        rank = int(ranks[index])
        percentile = rank / max(total - 1, 1)
        source = products[int(rng.integers(len(products)))]
        n_targets = 1 + int(rng.binomial(config.max_targets - 1, percentile))
        n_targets = min(n_targets, len(source.attributes))
        targets = [str(t) for t in rng.choice(np.array(source.attributes), size=n_targets, replace=False)]
        n_filler = int(rng.integers(0, config.query_filler_max + 1))
        words = targets + [filler[int(i)] for i in rng.integers(len(filler), size=n_filler)]
        words = [words[i] for i in rng.permutation(len(words))]
        queries.append(
            Query(
                id=f"q{index:05d}",
                tokens=tuple(words),
                targets=tuple(targets),
                weight=float((rank + 1) ** -config.zipf_s),
                source_product=source.id,
                split="eval" if index in eval_ids else "train",
            )
        )
    return queries


def gen_pairs(
    queries: Sequence[Query],
    products: Sequence[Product],
    config: CorpusConfig,
    seed: int,
) -> list[JudgedPair]:
    """Judge each query against its source product plus sampled distractors.

    Distractors are drawn partly from products sharing a target attribute
    and partly uniformly, so every rating level occurs.
    """

    index_of = {p.id: idx for idx, p in enumerate(products)}
    holders: dict[str, list[int]] = defaultdict(list)
    for idx, product in enumerate(products):
        for attribute in product.attributes:
            holders[attribute].append(idx)

    rng = derive_rng(seed, "pairs")
    n_pool = min(config.pairs_per_query, len(products))
    everything = np.arange(len(products))
    pairs: list[JudgedPair] = []
    for query in queries:
        chosen: list[int] = []
        source_idx = index_of.get(query.source_product)
        if source_idx is not None:
            chosen.append(source_idx)
        n_shared = int(round((n_pool - len(chosen)) * config.share_fraction))
        sharing = sorted({i for target in query.targets for i in holders.get(target, ())} - set(chosen))
        if sharing and n_shared:
            picks = rng.choice(np.array(sharing), size=min(n_shared, len(sharing)), replace=False)
            chosen.extend(int(i) for i in picks)
        missing = n_pool - len(chosen)
        if missing > 0:
            rest = np.setdiff1d(everything, np.array(chosen, dtype=np.int64))
            chosen.extend(int(i) for i in rng.choice(rest, size=missing, replace=False))
        for idx in chosen:
            rating = judge(query, products[idx])
            pairs.append(JudgedPair(query.id, products[idx].id, rating, rating_to_label(rating)))
    return pairs


def generate_corpus(config: CorpusConfig, seed: int) -> Corpus:
    vocab = TokenVocab(config.n_attributes, config.n_filler)
    products = gen_catalog(config, seed, vocab)
    queries = gen_queries(products, config, seed, vocab)
    pairs = gen_pairs(queries, products, config, seed)
    counts = defaultdict(int)
    for pair in pairs:
        counts[pair.rating] += 1
    logger.info(
        "corpus: %d products, %d queries, %d judged pairs, ratings %s",
        len(products),
        len(queries),
        len(pairs),
        dict(sorted(counts.items())),
    )
    return Corpus(vocab=vocab, products=products, queries=queries, pairs=pairs)


def split_golden(
    queries: Sequence[Query],
    pairs: Sequence[JudgedPair],
    tail_fraction: float = 1.0 / 3.0,
) -> GoldenSplit:
    """Sort by traffic (descending, ties by id); the tail is the last tertile."""

    if len(queries) < 3:
        raise CorpusError(f"need at least 3 queries for a tertile split, got {len(queries)}")
    known = {q.id for q in queries}
    for pair in pairs:
        if pair.query_id not in known:
            raise CorpusError(f"pair references unknown query '{pair.query_id}'")
    ordered = sorted(queries, key=lambda q: (-q.weight, q.id))
    tail_count = max(1, math.floor(len(ordered) * tail_fraction + 1e-9))
    tail_queries = ordered[len(ordered) - tail_count:]
    tail_ids = {q.id for q in tail_queries}
    return GoldenSplit(
        full_queries=ordered,
        full_pairs=list(pairs),
        tail_queries=tail_queries,
        tail_pairs=[p for p in pairs if p.query_id in tail_ids],
    )
