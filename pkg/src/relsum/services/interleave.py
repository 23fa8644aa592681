"""Simulated online comparison of two rankers by team-draft interleaving.

A session draws a query, merges the control and variation rankings of its
candidate pool, and lets a position-biased synthetic user add products to the
cart within the top ``k`` positions. Each add-to-cart is credited to the team
that placed the product; the session winner feeds an exact sign test.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np
from tqdm import tqdm

from ..config import InterleaveConfig
from ..core.seeding import derive_rng
from ..errors import ConfigError

logger = logging.getLogger(__name__)

__all__ = [
    "CONTROL",
    "VARIATION",
    "TIE",
    "InterleavedItem",
    "InterleavedList",
    "UserModel",
    "SessionResult",
    "InterleaveQuery",
    "InterleaveReport",
    "Ranker",
    "team_draft",
    "simulate_session",
    "sign_test_p",
    "ranker_from_scores",
    "run_interleaving",
]

CONTROL = "control"
VARIATION = "variation"
TIE = "tie"


def _rng(seed: int | np.random.Generator) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass(frozen=True, slots=True)
class InterleavedItem:
    product_id: str
    team: str
    position: int


@dataclass(slots=True)
class InterleavedList:
    items: list[InterleavedItem] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def product_ids(self) -> list[str]:
        return [item.product_id for item in self.items]

    def team_counts(self, prefix: int | None = None) -> dict[str, int]:
        counts = {CONTROL: 0, VARIATION: 0}
        for item in self.items[:prefix]:
            counts[item.team] += 1
        return counts


def team_draft(
    list_a: Sequence[str],
    list_b: Sequence[str],
    seed: int | np.random.Generator,
) -> InterleavedList:
    """Team-draft merge of ``list_a`` (control) and ``list_b`` (variation).

    Every round a coin decides which team picks first; each team then places
    its highest-ranked product not yet placed. A team whose list is used up
    stops picking and the other team drafts alone.
    """

    if not list_a or not list_b:
        raise ValueError("team draft needs two non-empty rankings")
    rng = _rng(seed)
    rankings = {CONTROL: list(list_a), VARIATION: list(list_b)}
    cursors = {CONTROL: 0, VARIATION: 0}
    placed: set[str] = set()
    merged = InterleavedList()

    def next_pick(team: str) -> str | None:
        ranking = rankings[team]
        while cursors[team] < len(ranking) and ranking[cursors[team]] in placed:
            cursors[team] += 1
        if cursors[team] == len(ranking):
            return None
        return ranking[cursors[team]]

    while True:
        order = (CONTROL, VARIATION) if rng.random() < 0.5 else (VARIATION, CONTROL)
        picked = 0
        for team in order:
            product_id = next_pick(team)
            if product_id is None:
                continue
            placed.add(product_id)
            merged.items.append(InterleavedItem(product_id, team, len(merged.items) + 1))
            picked += 1
        if picked == 0:
            return merged


def _inverse_log_position(position: int) -> float:
    return 1.0 / math.log2(position + 1)


@dataclass(frozen=True, slots=True)
class UserModel:
    """Examination by position times add-to-cart probability by rating."""

    atc_by_rating: Mapping[int, float]
    top_k: int = 40
    examination: Callable[[int], float] = _inverse_log_position

    def __post_init__(self) -> None:
        ratings = sorted(self.atc_by_rating)
        probs = [self.atc_by_rating[r] for r in ratings]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ConfigError("add-to-cart probabilities must lie in [0, 1]")
        if probs != sorted(probs):
            raise ConfigError("add-to-cart probabilities must not decrease with the rating")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")

    @classmethod
    def from_config(cls, config: InterleaveConfig) -> "UserModel":
        return cls(
            atc_by_rating={
                0: config.atc_other,
                1: config.atc_other,
                2: config.atc_other,
                3: config.atc_good,
                4: config.atc_excellent,
            },
            top_k=config.top_k,
        )

    def atc_probability(self, rating: int) -> float:
        return self.atc_by_rating.get(rating, 0.0)


@dataclass(frozen=True, slots=True)
class SessionResult:
    control_atc: int
    variation_atc: int

    @property
    def total(self) -> int:
        return self.control_atc + self.variation_atc

    @property
    def winner(self) -> str:
        if self.control_atc == self.variation_atc:
            return TIE
        return VARIATION if self.variation_atc > self.control_atc else CONTROL


def simulate_session(
    interleaved: InterleavedList,
    true_ratings: Mapping[str, int],
    user_model: UserModel,
    seed: int | np.random.Generator,
) -> SessionResult:
    """One user pass over the top ``k`` positions with independent draws per position."""

    rng = _rng(seed)
    counts = {CONTROL: 0, VARIATION: 0}
    for item in interleaved.items[: user_model.top_k]:
        examined, added = rng.random(2)
        if examined >= user_model.examination(item.position):
            continue
        if added < user_model.atc_probability(true_ratings[item.product_id]):
            counts[item.team] += 1
    return SessionResult(control_atc=counts[CONTROL], variation_atc=counts[VARIATION])


def sign_test_p(wins: int, losses: int) -> float | None:
    """Two-sided exact binomial sign test; None when there are no decided sessions."""

    if wins < 0 or losses < 0:
        raise ValueError("win and loss counts must be non-negative")
    n = wins + losses
    if n == 0:
        return None
    k = min(wins, losses)
    tail = sum(math.comb(n, i) for i in range(k + 1))
    return min(1.0, float(Fraction(2 * tail, 2**n)))


@dataclass(frozen=True, slots=True)
class InterleaveQuery:
    """A query's candidate pool and the judged rating of every candidate."""

    query_id: str
    candidates: tuple[str, ...]
    ratings: Mapping[str, int]
    traffic_weight: float = 1.0


Ranker = Callable[[InterleaveQuery], Sequence[str]]


def ranker_from_scores(scores: Mapping[tuple[str, str], float]) -> Ranker:
    """Ranks a pool by descending ``scores[(query_id, product_id)]``, ties by product id."""

    def rank(query: InterleaveQuery) -> list[str]:
        return sorted(query.candidates, key=lambda pid: (-scores[(query.query_id, pid)], pid))

    return rank


@dataclass(slots=True)
class InterleaveReport:
    n_sessions: int
    atc_control: int
    atc_variation: int
    wins: int
    losses: int
    ties: int
    lift_pct: float | None
    p_value: float | None
    flags: list[str] = field(default_factory=list)

    @property
    def win_rate(self) -> float | None:
        decided = self.wins + self.losses
        return self.wins / decided if decided else None

    def to_payload(self) -> dict[str, object]:
        return {
            "n_sessions": self.n_sessions,
            "atc_control": self.atc_control,
            "atc_variation": self.atc_variation,
            "lift_pct": self.lift_pct,
            "wins": self.wins,
            "losses": self.losses,
            "ties": self.ties,
            "p_value": self.p_value,
            "flags": list(self.flags),
        }


def run_interleaving(
    control_ranker: Ranker,
    variation_ranker: Ranker,
    queries: Sequence[InterleaveQuery],
    user_model: UserModel,
    n_sessions: int,
    seed: int,
    *,
    traffic_weighted: bool = True,
    progress: bool = False,
) -> InterleaveReport:
    """Simulate ``n_sessions`` sessions; ``wins`` counts sessions the variation won."""

    if n_sessions < 1:
        raise ConfigError(f"n_sessions must be >= 1, got {n_sessions}")
    if not queries:
        raise ValueError("interleaving needs at least one query")
    ordered = sorted(queries, key=lambda q: q.query_id)
    weights = np.array([q.traffic_weight if traffic_weighted else 1.0 for q in ordered], dtype=np.float64)
    weights /= weights.sum()
    rankings = {q.query_id: (list(control_ranker(q)), list(variation_ranker(q))) for q in ordered}

    pick = derive_rng(seed, "interleave-queries").choice(len(ordered), size=n_sessions, p=weights)
    atc = {CONTROL: 0, VARIATION: 0}
    outcomes = {CONTROL: 0, VARIATION: 0, TIE: 0}
    for session in tqdm(range(n_sessions), desc="interleaving", disable=not progress, leave=False):
        query = ordered[int(pick[session])]
        rng = derive_rng(seed, "interleave-session", session)
        merged = team_draft(*rankings[query.query_id], rng)
        result = simulate_session(merged, query.ratings, user_model, rng)
        atc[CONTROL] += result.control_atc
        atc[VARIATION] += result.variation_atc
        outcomes[result.winner] += 1

    flags: list[str] = []
    p_value = sign_test_p(outcomes[VARIATION], outcomes[CONTROL])
    if p_value is None:
        flags.append("all_sessions_tied")
    lift = None
    if atc[CONTROL] > 0:
        lift = (atc[VARIATION] - atc[CONTROL]) / atc[CONTROL] * 100.0
    else:
        flags.append("control_has_no_atc")
    report = InterleaveReport(
        n_sessions=n_sessions,
        atc_control=atc[CONTROL],
        atc_variation=atc[VARIATION],
        wins=outcomes[VARIATION],
        losses=outcomes[CONTROL],
        ties=outcomes[TIE],
        lift_pct=lift,
        p_value=p_value,
        flags=flags,
    )
    logger.info(
        "interleaving over %d sessions: ATC control %d, variation %d, wins/losses/ties %d/%d/%d",
        n_sessions, report.atc_control, report.atc_variation, report.wins, report.losses, report.ties,
    )
    return report
