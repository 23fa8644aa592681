import numpy as np
import pytest

from relsum.config import RewardConfig
from relsum.core import tensor as T
from relsum.core.corpus import Product, Query, TokenVocab
from relsum.core.optim import grad_check
from relsum.core.reward import (
    CrossEncoderReward,
    RewardScore,
    build_context,
    oracle_score,
    reward_of,
)
from relsum.errors import ConfigError, FrozenModelError

from .conftest import MICRO_REWARD


def test_context_is_title_then_separator_then_extra():
    assert build_context(["t1", "t2"]).tokens == ("t1", "t2")
    assert build_context(["t1"], ["d1", "d2", "d3"], budget=3).tokens == ("t1", "[SEP]", "d1")
    assert build_context(["t1"], [], budget=3).tokens == ("t1", "[SEP]")
    with pytest.raises(ConfigError):
        build_context(["t1", "t2", "t3"], ["d1"], budget=2)


def test_reward_is_negative_absolute_error():
    score = RewardScore.from_score(0.8, 0.5)

    assert score.reward == pytest.approx(-0.3)
    assert RewardScore.from_score(0.5, 0.5).reward == 0.0
    with pytest.raises(ValueError):
        RewardScore.from_score(0.5, 1.5)


def test_oracle_score_is_fraction_of_targets_owned():
    product = Product(id="p", attributes=("attr000", "attr001"), title=("attr000",), description=("attr000", "attr001"))
    query = Query(id="q", tokens=("attr000", "attr002"), targets=("attr000", "attr002"), weight=1.0)

    assert oracle_score(query, product) == 0.5


def test_scores_are_probabilities_independent_of_batch_composition(frozen_reward, tiny_corpus):
    product = tiny_corpus.products[0]
    query = tiny_corpus.queries[0]
    context = build_context(product.title, product.description, frozen_reward.config.context_budget)
    other = build_context(tiny_corpus.products[1].title, None, frozen_reward.config.context_budget)

    alone = frozen_reward.score(query.tokens, context)
    batched = frozen_reward.score_batch([tiny_corpus.queries[3].tokens, query.tokens], [other, context])

    assert 0.0 < alone < 1.0
    assert batched[1] == pytest.approx(alone, abs=1e-12)


def test_frozen_scores_are_bit_identical_across_repeats(frozen_reward, tiny_corpus):
    product = tiny_corpus.products[5]
    query = tiny_corpus.queries[2]
    context = build_context(product.title, product.description, frozen_reward.config.context_budget)

    first = frozen_reward.score(query.tokens, context)

    assert all(frozen_reward.score(query.tokens, context) == first for _ in range(1000))


def test_unfrozen_model_refuses_to_score(tiny_corpus):
    model = CrossEncoderReward.initialize(tiny_corpus.vocab, RewardConfig(**MICRO_REWARD), seed=1)

    with pytest.raises(FrozenModelError):
        model.score(("attr000",), build_context(["w000"]))


def test_frozen_model_refuses_new_parameters(frozen_reward):
    with pytest.raises(FrozenModelError):
        frozen_reward.with_params(frozen_reward.params)


def test_frozen_checkpoint_only_loads_frozen(frozen_reward, tmp_path):
    path = tmp_path / "model.ckpt"
    frozen_reward.save(path)

    loaded, header = CrossEncoderReward.load(path)

    assert loaded.frozen and header["frozen"]
    assert loaded.params.digest() == frozen_reward.params.digest()
    with pytest.raises(FrozenModelError):
        CrossEncoderReward.load(path, for_training=True)


def test_encode_truncates_query_and_context_to_budgets(frozen_reward):
    long_query = ["attr000"] * 10
    context = build_context(["w000"], ["w001"] * 40, budget=40)

    ids, segments, lengths = frozen_reward.encode([long_query], [context])

    budget = frozen_reward.config
    assert ids.shape == (1, budget.query_budget + budget.context_budget + 2)
    assert lengths[0] == ids.shape[1]
    assert segments[0, : budget.query_budget + 2].sum() == 0
    assert np.all(segments[0, budget.query_budget + 2 :] == 1)


def test_reward_of_scores_title_plus_summary(frozen_reward, tiny_corpus):
    product = tiny_corpus.products[2]
    query = tiny_corpus.queries[0]
    context = build_context(product.title, ["attr001"], frozen_reward.config.context_budget)

    score = reward_of(frozen_reward, query.tokens, product.title, ["attr001"], 1.0)

    assert score.r == pytest.approx(frozen_reward.score(query.tokens, context))
    assert score.reward == pytest.approx(score.r - 1.0)


@pytest.mark.parametrize("seed", range(20))
def test_reward_gradients_hold_across_seeds(seed):
    vocab = TokenVocab(n_attributes=2, n_filler=2)
    config = RewardConfig(d_model=4, n_layers=1, n_heads=2, d_ff=8, head_hidden=4, query_budget=2, context_budget=4, init_std=0.5)
    model = CrossEncoderReward.initialize(vocab, config, seed=seed)
    contexts = [build_context(["w001"], ["attr000"], budget=4), build_context(["attr001"], None, budget=4)]
    ids, segments, lengths = model.encode([("attr000",), ("attr001", "w000")], contexts)
    labels = np.array([1.0, 0.0])

    def loss(params):
        error = T.sub(model.forward(ids, segments, lengths, params), labels)
        return T.sum_(T.mul(error, error))

    assert grad_check(loss, model.params, h=1e-5, floor=1e-6) < 1e-4
