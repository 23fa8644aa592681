import math

import numpy as np
import pytest

from relsum.config import InterleaveConfig
from relsum.services.interleave import (
    CONTROL,
    TIE,
    VARIATION,
    InterleaveQuery,
    InterleavedItem,
    InterleavedList,
    UserModel,
    run_interleaving,
    sign_test_p,
    simulate_session,
    team_draft,
)
from relsum.errors import ConfigError


def _queries(n_queries=20, pool=10, seed=0):
    rng = np.random.default_rng(seed)
    queries = []
    for q in range(n_queries):
        candidates = tuple(f"p{q:02d}_{i:02d}" for i in range(pool))
        ratings = {pid: int(rng.integers(1, 5)) for pid in candidates}
        queries.append(InterleaveQuery(f"q{q:02d}", candidates, ratings, traffic_weight=1.0 / (q + 1)))
    return queries


def _by_rating(query):
    return sorted(query.candidates, key=lambda pid: (-query.ratings[pid], pid))


def _shuffled(query):
    order = np.random.default_rng(int(query.query_id[1:])).permutation(len(query.candidates))
    return [query.candidates[int(i)] for i in order]


def _stable(query):
    return sorted(query.candidates)


def _user(config=None):
    return UserModel.from_config(config or InterleaveConfig())


def test_identical_rankings_interleave_to_the_shared_order():
    ranking = ["a", "b", "c", "d", "e"]

    merged = team_draft(ranking, ranking, seed=3)

    assert merged.product_ids() == ranking
    assert [item.position for item in merged.items] == [1, 2, 3, 4, 5]


def test_disjoint_rankings_split_evenly():
    merged = team_draft(["a1", "a2", "a3"], ["b1", "b2", "b3"], seed=0)

    assert len(merged) == 6
    assert merged.team_counts() == {CONTROL: 3, VARIATION: 3}
    assert [i.product_id for i in merged.items if i.team == CONTROL] == ["a1", "a2", "a3"]


def test_team_counts_stay_balanced_on_every_prefix():
    rng = np.random.default_rng(7)
    items = [f"p{i}" for i in range(9)]
    for _ in range(200):
        a = [items[int(i)] for i in rng.permutation(9)]
        b = [items[int(i)] for i in rng.permutation(9)]
        merged = team_draft(a, b, rng)
        assert sorted(merged.product_ids()) == sorted(items)
        for prefix in range(len(merged) + 1):
            counts = merged.team_counts(prefix)
            assert abs(counts[CONTROL] - counts[VARIATION]) <= 1


def test_team_draft_needs_two_rankings():
    with pytest.raises(ValueError):
        team_draft([], ["a"], seed=0)


def test_user_model_follows_the_configured_probabilities():
    model = _user()

    assert model.atc_probability(4) == pytest.approx(0.30)
    assert model.atc_probability(3) == pytest.approx(0.12)
    assert model.atc_probability(1) == pytest.approx(0.02)
    assert model.examination(1) == 1.0
    assert model.examination(3) == pytest.approx(0.5)
    with pytest.raises(ConfigError):
        UserModel({1: 0.5, 4: 0.1})


def test_user_who_never_buys_ties_every_session():
    never = UserModel({1: 0.0, 2: 0.0, 3: 0.0, 4: 0.0})
    merged = InterleavedList([InterleavedItem("a", CONTROL, 1), InterleavedItem("b", VARIATION, 2)])

    result = simulate_session(merged, {"a": 4, "b": 4}, never, seed=0)

    assert result.total == 0
    assert result.winner == TIE


def test_clicks_beyond_top_k_are_ignored():
    eager = UserModel({4: 1.0}, top_k=1, examination=lambda position: 1.0)
    merged = InterleavedList([InterleavedItem("a", CONTROL, 1), InterleavedItem("b", VARIATION, 2)])

    result = simulate_session(merged, {"a": 4, "b": 4}, eager, seed=0)

    assert (result.control_atc, result.variation_atc) == (1, 0)
    assert result.winner == CONTROL


def test_sign_test_matches_the_binomial_distribution():
    for n in range(1, 21):
        for wins in range(n + 1):
            k = min(wins, n - wins)
            expected = min(1.0, 2 * sum(math.comb(n, i) for i in range(k + 1)) / 2**n)
            assert sign_test_p(wins, n - wins) == pytest.approx(expected, rel=1e-12)
    assert sign_test_p(0, 0) is None
    assert sign_test_p(5, 5) == 1.0


def test_all_ties_are_flagged():
    never = UserModel({1: 0.0, 2: 0.0, 3: 0.0, 4: 0.0})

    report = run_interleaving(_stable, _by_rating, _queries(), never, 50, seed=0)

    assert report.ties == 50
    assert report.p_value is None
    assert report.lift_pct is None
    assert report.win_rate is None
    assert report.flags == ["all_sessions_tied", "control_has_no_atc"]


def test_interleaving_is_reproducible_per_seed():
    first = run_interleaving(_shuffled, _by_rating, _queries(), _user(), 300, seed=4)
    again = run_interleaving(_shuffled, _by_rating, _queries(), _user(), 300, seed=4)

    assert first.to_payload() == again.to_payload()
    assert first.wins + first.losses + first.ties == 300


def test_identical_rankers_show_no_preference():
    outcomes = [run_interleaving(_stable, _stable, _queries(), _user(), 10000, seed=s) for s in range(3)]

    assert all(0.45 <= report.win_rate <= 0.55 for report in outcomes)
    assert sum(report.p_value > 0.05 for report in outcomes) >= 2


def test_rating_order_beats_a_random_order():
    report = run_interleaving(_shuffled, _by_rating, _queries(), _user(), 10000, seed=0)

    assert report.p_value < 0.01
    assert report.wins > report.losses
    assert report.lift_pct > 0.0
