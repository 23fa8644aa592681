import numpy as np
import pytest

from relsum.config import PolicyConfig
from relsum.core import tensor as T
from relsum.core.corpus import TokenVocab
from relsum.core.optim import grad_check
from relsum.core.policy import (
    CausalPolicy,
    batch_logprobs,
    build_prompt,
    greedy_summaries,
    heuristic_summary,
    sample,
    token_logprobs,
)
from relsum.errors import CorpusError, FrozenModelError, ShapeError


def test_prompt_puts_description_before_title_and_instruction():
    prompt = build_prompt(["t1", "t2", "t3"], ["d1", "d2"], description_budget=1, title_budget=2)

    assert prompt[:5] == ["[DESCRIPTION]:", "d1", "[TITLE]:", "t1", "t2"]
    assert prompt[5:] == ["product", "attributes", "appearing", "in", "[DESCRIPTION]", "but", "not", "in", "[TITLE]", "are:"]
    with pytest.raises(CorpusError):
        build_prompt([], ["d1"])


def test_heuristic_summary_keeps_new_description_tokens_in_order():
    summary = heuristic_summary(["a", "b"], ["b", "c", "a", "d", "c", "e"], budget=2)

    assert summary == ("c", "d")


def test_sampling_is_reproducible_and_records_untempered_logprobs(micro_policy, tiny_corpus):
    prompt = micro_policy.encode_prompt(tiny_corpus.products[0])

    first = sample(micro_policy, prompt, 3, 0.7, seed=5, indices=(2,))
    again = sample(micro_policy, prompt, 3, 0.7, seed=5, indices=(2,))

    assert [r.completion for r in first] == [r.completion for r in again]
    for rollout in first:
        assert 1 <= len(rollout) <= micro_policy.config.summary_budget
        recomputed = token_logprobs(micro_policy, rollout.prompt, rollout.completion).data
        assert np.allclose(recomputed, rollout.logprobs, atol=1e-12)


def test_summary_ids_drop_the_end_token(micro_policy, tiny_corpus):
    prompt = micro_policy.encode_prompt(tiny_corpus.products[1])

    for rollout in sample(micro_policy, prompt, 4, 1.0, seed=1):
        if rollout.ended:
            assert rollout.summary_ids == rollout.completion[:-1]
        else:
            assert rollout.summary_ids == rollout.completion


def test_batch_logprobs_masks_only_completion_positions(micro_policy):
    logp, mask = batch_logprobs(micro_policy, [[1, 2, 3], [1, 2]], [[4, 5], [6]])

    assert logp.shape == (2, 4)
    assert mask.tolist() == [[False, False, True, True], [False, True, False, False]]


def test_prompt_longer_than_context_window_is_rejected(micro_policy):
    with pytest.raises(ShapeError):
        sample(micro_policy, [1] * micro_policy.config.context_window, 1, 1.0, seed=0)


def test_greedy_summaries_decode_each_product_once(micro_policy, tiny_corpus):
    products = tiny_corpus.products[:5]

    summaries = greedy_summaries(micro_policy, products)

    assert set(summaries) == {p.id for p in products}
    assert summaries == greedy_summaries(micro_policy, products, batch_size=2)
    assert all("[EOS]" not in s for s in summaries.values())


def test_language_model_gradients_match_finite_differences(micro_policy, tiny_corpus):
    prompt = micro_policy.encode_prompt(tiny_corpus.products[0])[:8]
    completion = [tiny_corpus.vocab.id_of("attr000"), tiny_corpus.vocab.eos_id]

    def loss(params):
        return T.neg(T.sum_(token_logprobs(micro_policy, prompt, completion, params)))

    assert grad_check(loss, micro_policy.params, h=1e-5, floor=1e-6) < 1e-4


def test_logits_ignore_future_tokens(micro_policy, tiny_corpus):
    vocab = tiny_corpus.vocab
    prompt = micro_policy.encode_prompt(tiny_corpus.products[1])[:6]
    first = [vocab.id_of("attr000"), vocab.id_of("attr001"), vocab.id_of("w000")]
    second = first[:2] + [vocab.id_of("w001")]

    a = token_logprobs(micro_policy, prompt, first).data
    b = token_logprobs(micro_policy, prompt, second).data

    assert a[:2] == pytest.approx(b[:2], abs=1e-12)
    assert a[2] != b[2]

    ids = np.array([prompt + first])
    changed = ids.copy()
    changed[0, -1] = second[-1]
    before = micro_policy.logits(ids).data
    after = micro_policy.logits(changed).data
    assert np.allclose(before[0, :-1], after[0, :-1], rtol=0.0, atol=1e-12)
    assert not np.allclose(before[0, -1], after[0, -1])


@pytest.mark.parametrize("seed", range(20))
def test_language_model_gradients_hold_across_seeds(seed):
    vocab = TokenVocab(n_attributes=2, n_filler=2)
    config = PolicyConfig(d_model=4, n_layers=1, n_heads=2, d_ff=8, context_window=8, init_std=0.5)
    policy = CausalPolicy.initialize(vocab, config, seed=seed)
    rng = np.random.default_rng(seed)
    prompt = [int(i) for i in rng.integers(0, vocab.size, size=3)]
    completion = [int(i) for i in rng.integers(0, vocab.size, size=3)]

    def loss(params):
        return T.neg(T.sum_(token_logprobs(policy, prompt, completion, params)))

    assert grad_check(loss, policy.params, h=1e-5, floor=1e-6) < 1e-4


def test_snapshots_are_frozen_copies(micro_policy):
    ref = micro_policy.snapshot("ref")

    ref.verify()
    assert ref.policy.params.is_frozen
    assert ref.digest == micro_policy.params.digest()
    changed = ref.policy.params.replace({"head.b": np.ones(micro_policy.vocab.size)})
    tampered = type(ref)(role="ref", policy=micro_policy.with_params(changed), digest=ref.digest)
    with pytest.raises(FrozenModelError):
        tampered.verify()
    with pytest.raises(ValueError):
        micro_policy.snapshot("target")


def test_policy_checkpoint_round_trip(micro_policy, tmp_path):
    path = tmp_path / "policy.ckpt"
    micro_policy.save(path, {"stage": "pretrain-policy"})

    loaded, header = CausalPolicy.load(path)

    assert loaded.params.digest() == micro_policy.params.digest()
    assert loaded.config == micro_policy.config
    assert header["stage"] == "pretrain-policy"
