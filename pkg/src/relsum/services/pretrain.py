"""Behaviour cloning of heuristic summaries to initialise the reference policy."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from tqdm import tqdm

from ..config import PolicyConfig, PretrainConfig
from ..core import tensor as T
from ..core.corpus import Corpus, Product
from ..core.optim import OptimizerState, adamw_step, cosine_lr
from ..core.policy import CausalPolicy, batch_logprobs, greedy_summaries, heuristic_summary
from ..core.seeding import derive_rng
from ..core.tensor import Tape
from ..errors import EmptyDatasetError, NonFiniteError, TrainingDivergedError

logger = logging.getLogger(__name__)

__all__ = ["PretrainReport", "pretrain_reference", "perplexity", "target_recall"]


@dataclass(slots=True)
class PretrainReport:
    initial_perplexity: float = math.nan
    epochs: list[dict[str, float]] = field(default_factory=list)
    heldout_token_recall: float = 0.0
    heldout_products: list[str] = field(default_factory=list)

    def to_payload(self) -> dict[str, object]:
        return {
            "initial_perplexity": self.initial_perplexity,
            "epochs": self.epochs,
            "heldout_token_recall": self.heldout_token_recall,
            "heldout_products": self.heldout_products,
        }


def _examples(policy: CausalPolicy, products: Sequence[Product]) -> tuple[list[list[int]], list[list[int]]]:
    prompts: list[list[int]] = []
    targets: list[list[int]] = []
    budget = policy.config.summary_budget
    for product in products:
        prompts.append(policy.encode_prompt(product))
        summary = heuristic_summary(product.title, product.description[: policy.config.description_budget], budget)
        targets.append(policy.vocab.encode(summary) + [policy.vocab.eos_id])
    return prompts, targets


def perplexity(policy: CausalPolicy, prompts: Sequence[Sequence[int]], targets: Sequence[Sequence[int]], batch_size: int = 64) -> float:
    """exp of the mean per-token negative log-likelihood of ``targets``."""

    total, count = 0.0, 0
    for start in range(0, len(prompts), batch_size):
        logp, mask = batch_logprobs(policy, prompts[start : start + batch_size], targets[start : start + batch_size])
        total -= float(logp.data[mask].sum())
        count += int(mask.sum())
    return math.exp(total / max(count, 1))


def target_recall(summaries: dict[str, tuple[str, ...]], products: Sequence[Product], budget: int, description_budget: int) -> float:
    """Share of heuristic-target tokens that the greedy summaries reproduce."""

    hit, total = 0, 0
    for product in products:
        target = heuristic_summary(product.title, product.description[:description_budget], budget)
        produced = set(summaries.get(product.id, ()))
        hit += sum(1 for token in target if token in produced)
        total += len(target)
    return hit / total if total else 1.0


def pretrain_reference(
    corpus: Corpus,
    policy_config: PolicyConfig,
    config: PretrainConfig,
    seed: int,
    *,
    progress: bool = True,
) -> tuple[CausalPolicy, PretrainReport]:
    """Cross-entropy cloning of :func:`heuristic_summary` targets.

    Runs up to ``config.epochs`` epochs and stops early once held-out
    perplexity improves by less than ``plateau_tolerance`` (relative).
    """

    config.validate()
    if not corpus.products:
        raise EmptyDatasetError("cannot pretrain a policy on an empty catalog")
    policy = CausalPolicy.initialize(corpus.vocab, policy_config, seed)
    order = derive_rng(seed, "pretrain-split").permutation(len(corpus.products))
    n_heldout = max(1, int(round(len(order) * config.heldout_fraction)))
    heldout = [corpus.products[int(i)] for i in order[:n_heldout]]
    train = [corpus.products[int(i)] for i in order[n_heldout:]] or heldout
    train_prompts, train_targets = _examples(policy, train)
    held_prompts, held_targets = _examples(policy, heldout)

    report = PretrainReport(heldout_products=[p.id for p in heldout])
    report.initial_perplexity = perplexity(policy, held_prompts, held_targets)
    logger.info("untrained held-out perplexity %.1f (vocabulary %d)", report.initial_perplexity, corpus.vocab.size)

    state = OptimizerState.create(policy.params, weight_decay=config.weight_decay)
    total_steps = math.ceil(len(train) / config.batch_size) * config.epochs
    step = 0
    previous = report.initial_perplexity
    for epoch in range(config.epochs):
        shuffle = derive_rng(seed, "pretrain-order", epoch).permutation(len(train))
        losses: list[float] = []
        for start in tqdm(range(0, len(shuffle), config.batch_size), desc=f"pretrain epoch {epoch + 1}", disable=not progress, leave=False):
            rows = shuffle[start : start + config.batch_size]
            try:
                with Tape() as tape:
                    logp, mask = batch_logprobs(
                        policy, [train_prompts[i] for i in rows], [train_targets[i] for i in rows], policy.params
                    )
                    loss = T.neg(T.div(T.sum_(T.mul(logp, mask.astype(np.float64))), float(mask.sum())))
                    grads = tape.backward(loss, policy.params)
                params, state = adamw_step(policy.params, grads, state, cosine_lr(step, total_steps, config.lr))
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"pretraining diverged at step {step}: {exc}") from exc
            policy = policy.with_params(params)
            losses.append(loss.item())
            step += 1

        current = perplexity(policy, held_prompts, held_targets)
        report.epochs.append({"epoch": epoch + 1, "train_loss": float(np.mean(losses)), "heldout_perplexity": current})
        logger.info("pretrain epoch %d: loss %.4f, held-out perplexity %.2f", epoch + 1, np.mean(losses), current)
        if (previous - current) / previous < config.plateau_tolerance:
            logger.info("held-out perplexity plateaued; stopping after epoch %d", epoch + 1)
            break
        previous = current

    summaries = greedy_summaries(policy, heldout)
    report.heldout_token_recall = target_recall(
        summaries, heldout, policy_config.summary_budget, policy_config.description_budget
    )
    logger.info("greedy summaries reproduce %.1f%% of held-out target tokens", 100 * report.heldout_token_recall)
    return policy, report
