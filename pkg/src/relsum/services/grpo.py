"""Group-relative policy optimisation of the summarization policy.

Each training row is turned into a group of ``G`` sampled summaries. Their
rewards ``-|r(q, [t; s]) - l_hat|`` are standardised within the group to
advantages, and the policy maximises the token-averaged min-clipped
advantage minus an optional ``k3`` KL penalty to the reference policy.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from tqdm import tqdm

from ..config import GrpoConfig
from ..core import tensor as T
from ..core.optim import OptimizerState, adamw_step, cosine_lr
from ..core.policy import CausalPolicy, PolicySnapshot, Rollout, batch_logprobs, sample
from ..core.reward import CrossEncoderReward, build_context
from ..core.seeding import derive_rng
from ..core.tensor import Tape, Tensor
from ..errors import ConfigError, EmptyDatasetError, FrozenModelError, NonFiniteError, TrainingDivergedError
from .dataset import TrainRow
from .persistence import TrainingLog

logger = logging.getLogger(__name__)

__all__ = [
    "GroupSample",
    "ObjectiveStats",
    "normalize_advantages",
    "mca",
    "kl_token",
    "grpo_objective",
    "batch_objective",
    "sample_group",
    "grpo_train",
]

ON_POLICY_TOLERANCE = 1e-9


def normalize_advantages(rewards: Sequence[float], std_floor: float = 1e-8) -> np.ndarray:
    """``(r - mean) / (population std + floor)``; all zeros when the std is below the floor."""

    values = np.asarray(rewards, dtype=np.float64)
    if values.ndim != 1 or values.size < 2:
        raise ConfigError(f"advantages need a group of at least 2 rewards, got {values.size}")
    centered = values - values.mean()
    std = float(values.std())
    if std < std_floor:
        return np.zeros_like(values)
    return centered / (std + std_floor)


def mca(ratio: float, advantage: float, epsilon: float) -> float:
    """Min-clipped advantage for one token."""

    clipped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon)
    return min(ratio * advantage, clipped * advantage)


def kl_token(logp_theta: float | np.ndarray, logp_ref: float | np.ndarray) -> float | np.ndarray:
    """``k3`` estimator of KL(theta || ref) from per-token log-probs; never negative."""

    delta = np.asarray(logp_ref, dtype=np.float64) - np.asarray(logp_theta, dtype=np.float64)
    value = np.exp(delta) - delta - 1.0
    return float(value) if value.ndim == 0 else value


@dataclass(slots=True)
class GroupSample:
    prompt: tuple[int, ...]
    rollouts: list[Rollout]
    scores: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray
    proxy_label: float

    @property
    def abs_errors(self) -> np.ndarray:
        return -self.rewards


@dataclass(slots=True)
class ObjectiveStats:
    objective: float = 0.0
    kl: float = 0.0
    clip_fraction: float = 0.0
    dropped_empty: int = 0
    tokens: int = 0


def sample_group(
    policy: CausalPolicy,
    reward: CrossEncoderReward,
    row: TrainRow,
    G: int,
    temperature: float,
    seed: int,
    indices: Sequence[int],
    *,
    std_floor: float = 1e-8,
    stage: str = "grpo",
) -> GroupSample:
    """Sample ``G`` summaries for a row and score them against its proxy label."""

    prompt = policy.encode_prompt_tokens(row.title, row.description)
    rollouts = sample(policy, prompt, G, temperature, seed, indices=indices, stage=stage)
    budget = reward.config.context_budget
    contexts = [build_context(row.title, policy.vocab.decode(r.summary_ids), budget) for r in rollouts]
    scores = reward.score_batch([row.query] * G, contexts)
    rewards = -np.abs(scores - row.proxy_label)
    return GroupSample(
        prompt=tuple(prompt),
        rollouts=rollouts,
        scores=scores,
        rewards=rewards,
        advantages=normalize_advantages(rewards, std_floor),
        proxy_label=row.proxy_label,
    )


def batch_objective(
    groups: Sequence[GroupSample],
    policy: CausalPolicy,
    old: PolicySnapshot,
    ref: PolicySnapshot,
    epsilon: float,
    beta: float,
    params=None,
) -> tuple[Tensor, ObjectiveStats]:
    """Negated objective averaged over groups, plus diagnostics.

    Within a group the objective is ``(1/G) sum_i (1/|s_i|) sum_j (MCA - beta * k3)``.
    Empty completions are left out of their group.
    """

    prompts: list[tuple[int, ...]] = []
    completions: list[tuple[int, ...]] = []
    advantages: list[float] = []
    weights: list[float] = []
    stats = ObjectiveStats()
    live_groups = 0
    for group in groups:
        kept = [i for i, rollout in enumerate(group.rollouts) if len(rollout) > 0]
        stats.dropped_empty += len(group.rollouts) - len(kept)
        if not kept:
            continue
        live_groups += 1
        for i in kept:
            prompts.append(group.prompt)
            completions.append(group.rollouts[i].completion)
            advantages.append(float(group.advantages[i]))
            weights.append(1.0 / (len(kept) * len(group.rollouts[i])))
    if stats.dropped_empty:
        logger.warning("left %d empty completions out of the objective", stats.dropped_empty)
    if not prompts:
        raise EmptyDatasetError("every completion in the batch is empty")

    logp, mask = batch_logprobs(policy, prompts, completions, params)
    mask_f = mask.astype(np.float64)
    old_logp, _ = batch_logprobs(old.policy, prompts, completions)
    ref_logp, _ = batch_logprobs(ref.policy, prompts, completions)

    log_ratio = T.mul(T.sub(logp, old_logp.data), mask_f)
    ratio = T.exp(log_ratio)
    adv = np.asarray(advantages)[:, None]
    unclipped = T.mul(ratio, adv)
    clipped = T.mul(T.clip(ratio, 1.0 - epsilon, 1.0 + epsilon), adv)
    per_token = T.minimum(unclipped, clipped)

    delta_ref = (ref_logp.data - logp.data) * mask_f
    k3 = np.exp(delta_ref) - delta_ref - 1.0
    if beta > 0:
        d = T.mul(T.sub(ref_logp.data, logp), mask_f)
        per_token = T.sub(per_token, T.mul(T.sub(T.sub(T.exp(d), d), 1.0), beta))

    row_weights = np.asarray(weights)[:, None] / live_groups
    objective = T.sum_(T.mul(per_token, mask_f * row_weights))

    n_tokens = float(mask_f.sum())
    binds = (clipped.data < unclipped.data) & mask
    stats.objective = objective.item()
    stats.kl = float((k3 * mask_f).sum() / n_tokens)
    stats.clip_fraction = float(binds.sum() / n_tokens)
    stats.tokens = int(n_tokens)
    return T.neg(objective), stats


def grpo_objective(
    group: GroupSample,
    policy: CausalPolicy,
    old: PolicySnapshot,
    ref: PolicySnapshot,
    config: GrpoConfig,
    params=None,
) -> Tensor:
    """Loss (negated objective) of one group; differentiable w.r.t. ``params`` only."""

    loss, _ = batch_objective([group], policy, old, ref, config.epsilon, config.beta, params)
    return loss


@dataclass(slots=True)
class TrainState:
    step: int = 0
    last_good: str | None = None
    records: list[dict[str, float]] = field(default_factory=list)


def _save_checkpoint(policy: CausalPolicy, directory: Path | None, step: int, header: dict) -> str | None:
    if directory is None:
        return None
    path = directory / f"step_{step:05d}.ckpt"
    policy.save(path, {**header, "step": step})
    return str(path)


def grpo_train(
    rows: Sequence[TrainRow],
    policy: CausalPolicy,
    reward: CrossEncoderReward,
    config: GrpoConfig,
    seed: int,
    *,
    log: TrainingLog | None = None,
    checkpoint_dir: str | Path | None = None,
    header: dict | None = None,
    progress: bool = True,
) -> tuple[CausalPolicy, list[dict[str, float]]]:
    """Train ``policy`` on ``rows``; the initial policy becomes the reference."""

    config.validate()
    if not rows:
        raise EmptyDatasetError("GRPO needs at least one training row")
    if not reward.frozen:
        raise FrozenModelError("GRPO requires a frozen reward model")
    reward_digest = reward.params.digest()
    ref = policy.snapshot("ref")
    state = OptimizerState.create(policy.params, weight_decay=config.weight_decay)
    batches_per_epoch = math.ceil(len(rows) / config.batch_size)
    total_steps = batches_per_epoch * config.epochs * config.inner_updates
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    meta = dict(header or {})
    train = TrainState()
    logger.info("GRPO: %d rows, G=%d, %d optimizer steps", len(rows), config.G, total_steps)

    for epoch in range(config.epochs):
        order = derive_rng(seed, "grpo-order", epoch).permutation(len(rows))
        batches = [order[i : i + config.batch_size] for i in range(0, len(order), config.batch_size)]
        for batch_index, batch in enumerate(tqdm(batches, desc=f"grpo epoch {epoch + 1}", disable=not progress, leave=False)):
            old = policy.snapshot("old")
            groups = [
                sample_group(
                    old.policy, reward, rows[int(i)], config.G, config.temperature, seed, (epoch, int(i)),
                    std_floor=config.std_floor,
                )
                for i in batch
            ]
            for inner in range(config.inner_updates):
                lr = cosine_lr(train.step, total_steps, config.lr)
                try:
                    with Tape() as tape:
                        loss, stats = batch_objective(groups, policy, old, ref, config.epsilon, config.beta, policy.params)
                        grads = tape.backward(loss, policy.params)
                    if batch_index == 0 and inner == 0 and config.beta == 0.0 and not stats.dropped_empty:
                        if abs(stats.objective) > ON_POLICY_TOLERANCE:
                            raise TrainingDivergedError(
                                f"on-policy objective at epoch {epoch + 1} start is {stats.objective:.3e}, expected 0",
                                last_good_checkpoint=train.last_good,
                            )
                    if not math.isfinite(loss.item()):
                        raise NonFiniteError(f"loss is {loss.item()}")
                    params, state = adamw_step(policy.params, grads, state, lr)
                except NonFiniteError as exc:
                    raise TrainingDivergedError(
                        f"GRPO diverged at step {train.step}: {exc}", last_good_checkpoint=train.last_good
                    ) from exc
                policy = policy.with_params(params)
                train.step += 1

                rewards = np.concatenate([g.rewards for g in groups])
                record = {
                    "step": train.step,
                    "epoch": epoch + 1,
                    "mean_reward": float(rewards.mean()),
                    "mean_abs_err": float((-rewards).mean()),
                    "kl": stats.kl,
                    "clip_fraction": stats.clip_fraction,
                    "lr": lr,
                    "loss": loss.item(),
                }
                train.records.append(record)
                if log is not None:
                    log.append(record)
                if config.checkpoint_every and train.step % config.checkpoint_every == 0:
                    train.last_good = _save_checkpoint(policy, ckpt_dir, train.step, meta)
        ref.verify()
        logger.info(
            "GRPO epoch %d done: mean reward %.4f over the last batch", epoch + 1, train.records[-1]["mean_reward"]
        )

    if reward.params.digest() != reward_digest:
        raise FrozenModelError("reward model parameters changed during GRPO")
    return policy, train.records
