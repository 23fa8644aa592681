import math

import numpy as np
import pytest

from relsum.config import GrpoConfig, RewardConfig
from relsum.core.optim import grad_check
from relsum.core.policy import sample, token_logprobs
from relsum.core.reward import CrossEncoderReward
from relsum.services.dataset import build
from relsum.services.grpo import (
    GroupSample,
    batch_objective,
    grpo_train,
    kl_token,
    mca,
    normalize_advantages,
    sample_group,
)
from relsum.services.persistence import TrainingLog
from relsum.errors import ConfigError, EmptyDatasetError, FrozenModelError

from .conftest import MICRO_REWARD, perturbed


def _group(policy, product, rewards, seed=0):
    prompt = policy.encode_prompt(product)
    rollouts = sample(policy, prompt, len(rewards), 1.0, seed=seed)
    rewards = np.asarray(rewards, dtype=float)
    return GroupSample(
        prompt=tuple(prompt),
        rollouts=rollouts,
        scores=np.zeros(len(rewards)),
        rewards=rewards,
        advantages=normalize_advantages(rewards),
        proxy_label=0.5,
    )


def _scalar_objective(groups, policy, old, ref, epsilon, beta):
    totals = []
    for group in groups:
        per_rollout = []
        for rollout, advantage in zip(group.rollouts, group.advantages):
            new = token_logprobs(policy, group.prompt, rollout.completion).data
            before = token_logprobs(old, group.prompt, rollout.completion).data
            initial = token_logprobs(ref, group.prompt, rollout.completion).data
            tokens = [
                mca(math.exp(n - b), advantage, epsilon) - beta * kl_token(n, r)
                for n, b, r in zip(new, before, initial)
            ]
            per_rollout.append(sum(tokens) / len(tokens))
        totals.append(sum(per_rollout) / len(per_rollout))
    return sum(totals) / len(totals)


def test_advantages_are_standardised_within_the_group():
    advantages = normalize_advantages([1.0, 2.0, 3.0, 4.0])

    assert advantages == pytest.approx([-1.3416, -0.4472, 0.4472, 1.3416], abs=1e-4)
    assert advantages.mean() == pytest.approx(0.0, abs=1e-12)
    assert advantages.std() == pytest.approx(1.0, abs=1e-6)


def test_identical_rewards_give_zero_advantages():
    assert np.array_equal(normalize_advantages([-0.3, -0.3, -0.3]), np.zeros(3))
    with pytest.raises(ConfigError):
        normalize_advantages([1.0])


def test_min_clipped_advantage_caps_the_incentive():
    assert mca(1.5, 1.0, 0.2) == pytest.approx(1.2)
    assert mca(0.8, -1.0, 0.2) == pytest.approx(-0.8)
    assert mca(0.5, -1.0, 0.2) == pytest.approx(-0.8)
    assert mca(1.1, 1.0, 0.2) == pytest.approx(1.1)
    assert mca(1.0, 0.0, 0.2) == 0.0


def test_random_groups_have_zero_mean_and_unit_spread():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        rewards = -rng.random(int(rng.integers(2, 9)))
        advantages = normalize_advantages(rewards)
        assert abs(advantages.sum()) < 1e-9
        if rewards.std() > 1e-3:
            assert advantages.std() == pytest.approx(1.0, abs=1e-6)


def test_mca_matches_the_piecewise_form():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        ratio = float(rng.uniform(0.0, 3.0))
        advantage = float(rng.normal())
        epsilon = float(rng.uniform(0.01, 0.5))
        if advantage >= 0:
            expected = advantage * min(ratio, 1.0 + epsilon)
        else:
            expected = advantage * max(ratio, 1.0 - epsilon)
        assert mca(ratio, advantage, epsilon) == expected


def test_k3_is_zero_only_when_policies_agree():
    assert kl_token(-1.2, -1.2) == 0.0
    assert kl_token(-1.0, -2.0) > 0.0
    assert kl_token(-2.0, -1.0) > 0.0
    assert np.all(kl_token(np.array([-1.0, -0.5]), np.array([-0.5, -1.0])) > 0.0)


def test_objective_is_zero_on_policy(micro_policy, tiny_corpus):
    groups = [
        _group(micro_policy, tiny_corpus.products[0], [-0.1, -0.4, -0.2, -0.9]),
        _group(micro_policy, tiny_corpus.products[1], [-0.5, -0.3, -0.3, -0.6], seed=1),
    ]
    old = micro_policy.snapshot("old")

    loss, stats = batch_objective(groups, micro_policy, old, micro_policy.snapshot("ref"), 0.2, 0.0)

    assert stats.objective == pytest.approx(0.0, abs=1e-9)
    assert loss.item() == pytest.approx(0.0, abs=1e-9)
    assert stats.kl == pytest.approx(0.0, abs=1e-12)
    assert stats.clip_fraction == 0.0


@pytest.mark.parametrize("beta", [0.0, 0.1])
def test_objective_matches_per_token_reference(micro_policy, tiny_corpus, beta):
    old = micro_policy.snapshot("old")
    ref = micro_policy.snapshot("ref")
    moved = perturbed(micro_policy, scale=0.5)
    groups = [
        _group(micro_policy, tiny_corpus.products[2], [-0.1, -0.4, -0.2]),
        _group(micro_policy, tiny_corpus.products[3], [-0.7, -0.1, -0.3], seed=4),
    ]

    _, stats = batch_objective(groups, moved, old, ref, 0.2, beta)

    expected = _scalar_objective(groups, moved, old.policy, ref.policy, 0.2, beta)
    assert stats.objective == pytest.approx(expected, abs=1e-9)
    assert stats.kl > 0.0


def test_objective_gradients_match_finite_differences(micro_policy, tiny_corpus):
    old = micro_policy.snapshot("old")
    ref = micro_policy.snapshot("ref")
    moved = perturbed(micro_policy)
    groups = [_group(micro_policy, tiny_corpus.products[4], [-0.2, -0.6, -0.1])]

    def loss(params):
        return batch_objective(groups, moved, old, ref, 0.2, 0.1, params)[0]

    assert grad_check(loss, moved.params, h=1e-5, floor=1e-6) < 1e-4


def test_group_rewards_follow_the_frozen_scorer(micro_policy, frozen_reward, tiny_corpus):
    rows, _ = build(tiny_corpus, frozen_reward, tau=0.0, seed=0)

    group = sample_group(micro_policy, frozen_reward, rows[0], 3, 0.9, seed=2, indices=(0, 0))

    assert np.allclose(group.rewards, -np.abs(group.scores - rows[0].proxy_label))
    assert np.all(group.abs_errors >= 0.0)
    assert len(group.rollouts) == 3


def test_training_updates_the_policy_and_leaves_reference_and_reward_alone(micro_policy, frozen_reward, tiny_corpus, tmp_path):
    rows, _ = build(tiny_corpus, frozen_reward, tau=0.0, seed=0)
    config = GrpoConfig(G=2, batch_size=2, lr=1e-3, checkpoint_every=1)
    before = micro_policy.params.digest()
    reward_digest = frozen_reward.params.digest()

    with TrainingLog(None, {}) as log:
        trained, records = grpo_train(
            rows[:4], micro_policy, frozen_reward, config, seed=0, log=log, checkpoint_dir=tmp_path, progress=False
        )

    assert len(records) == 2
    assert log.records == records
    assert {"mean_reward", "mean_abs_err", "kl", "clip_fraction", "lr", "loss"} <= set(records[0])
    assert trained.params.digest() != before
    assert micro_policy.params.digest() == before
    assert frozen_reward.params.digest() == reward_digest
    assert sorted(p.name for p in tmp_path.iterdir()) == ["step_00001.ckpt", "step_00002.ckpt"]


def test_same_seed_gives_the_same_checkpoint(micro_policy, frozen_reward, tiny_corpus, tmp_path):
    rows, _ = build(tiny_corpus, frozen_reward, tau=0.0, seed=0)
    config = GrpoConfig(G=2, batch_size=2, lr=1e-3)

    first, _ = grpo_train(rows[:4], micro_policy, frozen_reward, config, seed=3, progress=False)
    again, _ = grpo_train(rows[:4], micro_policy, frozen_reward, config, seed=3, progress=False)
    first.save(tmp_path / "first.ckpt")
    again.save(tmp_path / "again.ckpt")

    assert (tmp_path / "first.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    assert first.params.digest() == again.params.digest()


def test_training_refuses_unfrozen_reward_and_empty_data(micro_policy, frozen_reward, tiny_corpus):
    live = CrossEncoderReward.initialize(tiny_corpus.vocab, RewardConfig(**MICRO_REWARD), seed=0)
    rows, _ = build(tiny_corpus, frozen_reward, tau=0.0, seed=0)

    with pytest.raises(FrozenModelError):
        grpo_train(rows[:2], micro_policy, live, GrpoConfig(), seed=0, progress=False)
    with pytest.raises(EmptyDatasetError):
        grpo_train([], micro_policy, frozen_reward, GrpoConfig(), seed=0, progress=False)
