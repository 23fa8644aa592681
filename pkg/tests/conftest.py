from __future__ import annotations

import numpy as np
import pytest

from relsum.config import CorpusConfig, PolicyConfig, RewardConfig
from relsum.core.corpus import generate_corpus
from relsum.core.policy import CausalPolicy
from relsum.core.reward import CrossEncoderReward

TINY_CORPUS = dict(
    n_products=30,
    n_attributes=12,
    n_filler=20,
    attrs_min=3,
    attrs_max=4,
    title_max=6,
    title_filler_min=1,
    title_filler_max=2,
    desc_min=6,
    desc_max=10,
    n_train_queries=12,
    n_eval_queries=9,
    max_targets=2,
    pairs_per_query=4,
)
MICRO_POLICY = dict(
    d_model=8,
    n_layers=1,
    n_heads=2,
    d_ff=16,
    context_window=40,
    title_budget=6,
    description_budget=10,
    summary_budget=3,
)
MICRO_REWARD = dict(
    d_model=8,
    n_layers=1,
    n_heads=2,
    d_ff=16,
    head_hidden=8,
    query_budget=4,
    context_budget=14,
    max_epochs=1,
    batch_size=16,
)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(CorpusConfig(**TINY_CORPUS), seed=0)


@pytest.fixture(scope="session")
def micro_policy(tiny_corpus):
    return CausalPolicy.initialize(tiny_corpus.vocab, PolicyConfig(**MICRO_POLICY), seed=0)


@pytest.fixture(scope="session")
def frozen_reward(tiny_corpus):
    return CrossEncoderReward.initialize(tiny_corpus.vocab, RewardConfig(**MICRO_REWARD), seed=0).freeze()


def perturbed(policy, scale=0.05):
    """Copy of ``policy`` with noisy embeddings and output bias."""

    rng = np.random.default_rng(11)
    return policy.with_params(
        policy.params.replace(
            {
                "head.b": policy.params["head.b"].data + rng.normal(0.0, scale, size=policy.vocab.size),
                "tok_emb": policy.params["tok_emb"].data + rng.normal(0.0, scale, size=policy.params["tok_emb"].shape),
            }
        )
    )
