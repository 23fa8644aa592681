"""RL training set: proxy labels from the frozen reward and the description-gap filter."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from ..core.corpus import Corpus
from ..core.reward import CrossEncoderReward, build_context
from ..core.seeding import derive_rng
from ..errors import ConfigError, EmptyDatasetError
from .persistence import read_jsonl, write_json, write_jsonl

logger = logging.getLogger(__name__)

__all__ = [
    "TrainRow",
    "DatasetStats",
    "proxy_label",
    "filter_gap",
    "score_rows",
    "build",
    "save_dataset",
    "load_dataset",
]


@dataclass(frozen=True, slots=True)
class TrainRow:
    query: tuple[str, ...]
    title: tuple[str, ...]
    description: tuple[str, ...]
    proxy_label: float
    gap: float
    query_id: str = ""
    product_id: str = ""

    def to_payload(self) -> dict[str, object]:
        return {
            "query": list(self.query),
            "title": list(self.title),
            "description": list(self.description),
            "proxy_label": self.proxy_label,
            "gap": self.gap,
            "query_id": self.query_id,
            "product_id": self.product_id,
        }

    @classmethod
    def from_payload(cls, payload: Mapping[str, Any]) -> "TrainRow":
        return cls(
            query=tuple(payload["query"]),
            title=tuple(payload["title"]),
            description=tuple(payload["description"]),
            proxy_label=float(payload["proxy_label"]),
            gap=float(payload["gap"]),
            query_id=str(payload.get("query_id", "")),
            product_id=str(payload.get("product_id", "")),
        )


@dataclass(frozen=True, slots=True)
class DatasetStats:
    total: int
    kept: int
    dropped: int
    tau: float
    mean_gap: float

    @property
    def kept_fraction(self) -> float:
        return self.kept / self.total if self.total else 0.0

    def to_payload(self) -> dict[str, object]:
        return {"total": self.total, "kept": self.kept, "dropped": self.dropped, "tau": self.tau, "mean_gap": self.mean_gap}


def proxy_label(model: CrossEncoderReward, query: Sequence[str], title: Sequence[str], description: Sequence[str]) -> float:
    """``r(q, [t; d])``, the stand-in relevance label used during RL."""

    return model.score(query, build_context(title, description, model.config.context_budget))


def score_rows(model: CrossEncoderReward, corpus: Corpus, split: str = "train") -> list[TrainRow]:
    """Score every judged pair of ``split`` with and without the description."""

    pairs = corpus.pairs_in(split)
    budget = model.config.context_budget
    queries = [corpus.query(p.query_id).tokens for p in pairs]
    products = [corpus.product(p.product_id) for p in pairs]
    with_desc = model.score_batch(queries, [build_context(p.title, p.description, budget) for p in products])
    title_only = model.score_batch(queries, [build_context(p.title, None, budget) for p in products])
    return [
        TrainRow(
            query=query,
            title=product.title,
            description=product.description,
            proxy_label=float(full),
            gap=float(abs(full - bare)),
            query_id=pair.query_id,
            product_id=pair.product_id,
        )
        for pair, query, product, full, bare in zip(pairs, queries, products, with_desc, title_only)
    ]


def filter_gap(rows: Sequence[TrainRow], tau: float) -> list[TrainRow]:
    """Keep rows where the description moves the score by at least ``tau``."""

    if tau < 0:
        raise ConfigError(f"tau must be non-negative, got {tau}")
    kept = [row for row in rows if row.gap >= tau]
    if not kept:
        raise EmptyDatasetError(f"no row has a description gap >= {tau}; lower dataset.tau")
    logger.info("gap filter kept %d of %d rows (%.1f%%) at tau=%.3f", len(kept), len(rows), 100.0 * len(kept) / len(rows), tau)
    return kept


def build(corpus: Corpus, model: CrossEncoderReward, tau: float, seed: int) -> tuple[list[TrainRow], DatasetStats]:
    rows = score_rows(model, corpus, "train")
    kept = filter_gap(rows, tau)
    order = derive_rng(seed, "dataset-shuffle").permutation(len(kept))
    shuffled = [kept[int(i)] for i in order]
    stats = DatasetStats(
        total=len(rows),
        kept=len(kept),
        dropped=len(rows) - len(kept),
        tau=tau,
        mean_gap=float(np.mean([row.gap for row in kept])),
    )
    return shuffled, stats


def save_dataset(directory: str | Path, rows: Sequence[TrainRow], stats: DatasetStats, header: Mapping[str, Any]) -> None:
    root = Path(directory)
    write_jsonl(root / "train.jsonl", {**header, "kind": "train"}, (row.to_payload() for row in rows))
    write_json(root / "stats.json", {**stats.to_payload(), "header": dict(header)})


def load_dataset(directory: str | Path) -> tuple[list[TrainRow], dict[str, Any]]:
    header, rows = read_jsonl(Path(directory) / "train.jsonl", TrainRow.from_payload)
    return rows, header
