"""Direct preference optimisation on summary pairs ranked by reward error."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from tqdm import tqdm

from ..config import DpoConfig
from ..core import tensor as T
from ..core.optim import OptimizerState, adamw_step, cosine_lr
from ..core.policy import CausalPolicy, PolicySnapshot, Rollout, batch_logprobs
from ..core.reward import CrossEncoderReward
from ..core.seeding import derive_rng
from ..core.tensor import Tape, Tensor
from ..errors import EmptyDatasetError, FrozenModelError, NonFiniteError, TrainingDivergedError, UninformativeRewardError
from .dataset import TrainRow
from .grpo import kl_token, sample_group
from .persistence import TrainingLog

logger = logging.getLogger(__name__)

__all__ = ["PreferencePair", "make_pair", "preference_loss", "dpo_loss", "batch_dpo_loss", "dpo_train"]

TIE_TOLERANCE = 1e-9


@dataclass(frozen=True, slots=True)
class PreferencePair:
    """Winner has the strictly smaller ``|r - l_hat|``."""

    prompt: tuple[int, ...]
    winner: tuple[int, ...]
    loser: tuple[int, ...]
    winner_error: float
    loser_error: float


def make_pair(rollout_a: Rollout, rollout_b: Rollout, rewards: Sequence[float]) -> PreferencePair | None:
    """Order two rollouts of one prompt by reward; ties give no pair."""

    if rollout_a.prompt != rollout_b.prompt:
        raise ValueError("preference pairs need two completions of the same prompt")
    reward_a, reward_b = float(rewards[0]), float(rewards[1])
    if abs(reward_a - reward_b) <= TIE_TOLERANCE:
        return None
    if reward_a > reward_b:
        return PreferencePair(rollout_a.prompt, rollout_a.completion, rollout_b.completion, -reward_a, -reward_b)
    return PreferencePair(rollout_a.prompt, rollout_b.completion, rollout_a.completion, -reward_b, -reward_a)


def preference_loss(winner_logratio: object, loser_logratio: object, beta: float) -> Tensor:
    """``-log sigmoid(beta * (winner_logratio - loser_logratio))``, elementwise."""

    return T.neg(T.log_sigmoid(T.mul(T.sub(winner_logratio, loser_logratio), beta)))


def _sequence_logps(policy: CausalPolicy, pairs: Sequence[PreferencePair], params=None) -> tuple[Tensor, Tensor]:
    prompts = [p.prompt for p in pairs] * 2
    completions = [p.winner for p in pairs] + [p.loser for p in pairs]
    logp, mask = batch_logprobs(policy, prompts, completions, params)
    totals = T.sum_(T.mul(logp, mask.astype(np.float64)), axis=1)
    n = len(pairs)
    return T.slice_(totals, slice(0, n)), T.slice_(totals, slice(n, 2 * n))


def batch_dpo_loss(
    pairs: Sequence[PreferencePair],
    policy: CausalPolicy,
    ref: PolicySnapshot,
    beta: float,
    params=None,
) -> tuple[Tensor, float]:
    """Mean loss over pairs and the implicit-reward accuracy before the update."""

    if not pairs:
        raise EmptyDatasetError("no preference pairs to score")
    theta_w, theta_l = _sequence_logps(policy, pairs, params)
    ref_w, ref_l = _sequence_logps(ref.policy, pairs)
    winner_ratio = T.sub(theta_w, ref_w.data)
    loser_ratio = T.sub(theta_l, ref_l.data)
    losses = preference_loss(winner_ratio, loser_ratio, beta)
    accuracy = float(np.mean(winner_ratio.data > loser_ratio.data))
    return T.mean(losses), accuracy


def dpo_loss(pair: PreferencePair, policy: CausalPolicy, ref: PolicySnapshot, beta: float, params=None) -> Tensor:
    """Sigmoid preference loss of one pair; sequence log-probs sum over completion tokens."""

    loss, _ = batch_dpo_loss([pair], policy, ref, beta, params)
    return loss


def dpo_train(
    rows: Sequence[TrainRow],
    policy: CausalPolicy,
    reward: CrossEncoderReward,
    config: DpoConfig,
    seed: int,
    *,
    log: TrainingLog | None = None,
    checkpoint_dir: str | Path | None = None,
    header: dict | None = None,
    progress: bool = True,
) -> tuple[CausalPolicy, list[dict[str, float]]]:
    """Train on pairs sampled online from the current policy."""

    config.validate()
    if not rows:
        raise EmptyDatasetError("DPO needs at least one training row")
    if not reward.frozen:
        raise FrozenModelError("DPO requires a frozen reward model")
    reward_digest = reward.params.digest()
    ref = policy.snapshot("ref")
    state = OptimizerState.create(policy.params, weight_decay=config.weight_decay)
    total_steps = math.ceil(len(rows) / config.batch_size) * config.epochs
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    meta = dict(header or {})
    records: list[dict[str, float]] = []
    step = 0
    last_good: str | None = None
    logger.info("DPO: %d rows, beta=%.3f, %d optimizer steps", len(rows), config.beta, total_steps)

    for epoch in range(config.epochs):
        order = derive_rng(seed, "dpo-order", epoch).permutation(len(rows))
        epoch_pairs = 0
        for start in tqdm(range(0, len(order), config.batch_size), desc=f"dpo epoch {epoch + 1}", disable=not progress, leave=False):
            current = policy.snapshot("old")
            pairs: list[PreferencePair] = []
            rewards: list[np.ndarray] = []
            sampled_kl: list[float] = []
            skipped = 0
            for i in order[start : start + config.batch_size]:
                group = sample_group(
                    current.policy, reward, rows[int(i)], config.G, config.temperature, seed, (epoch, int(i)), stage="dpo"
                )
                rewards.append(group.rewards)
                for rollout in group.rollouts:
                    if len(rollout):
                        ref_lp = batch_logprobs(ref.policy, [rollout.prompt], [rollout.completion])
                        sampled_kl.extend(kl_token(np.asarray(rollout.logprobs), ref_lp[0].data[ref_lp[1]]).tolist())
                pair = make_pair(group.rollouts[0], group.rollouts[1], group.rewards)
                if pair is None:
                    skipped += 1
                else:
                    pairs.append(pair)

            lr = cosine_lr(step, total_steps, config.lr)
            loss_value: float | None = None
            accuracy: float | None = None
            if pairs:
                try:
                    with Tape() as tape:
                        loss, accuracy = batch_dpo_loss(pairs, policy, ref, config.beta, policy.params)
                        grads = tape.backward(loss, policy.params)
                    loss_value = loss.item()
                    if not math.isfinite(loss_value):
                        raise NonFiniteError(f"loss is {loss_value}")
                    params, state = adamw_step(policy.params, grads, state, lr)
                except NonFiniteError as exc:
                    raise TrainingDivergedError(f"DPO diverged at step {step}: {exc}", last_good_checkpoint=last_good) from exc
                policy = policy.with_params(params)
            epoch_pairs += len(pairs)
            step += 1

            all_rewards = np.concatenate(rewards)
            record = {
                "step": step,
                "epoch": epoch + 1,
                "mean_reward": float(all_rewards.mean()),
                "mean_abs_err": float((-all_rewards).mean()),
                "kl": float(np.mean(sampled_kl)) if sampled_kl else 0.0,
                "clip_fraction": 0.0,
                "lr": lr,
                "loss": loss_value,
                "pair_skip_count": skipped,
                "implicit_reward_accuracy": accuracy,
            }
            records.append(record)
            if log is not None:
                log.append(record)
            if ckpt_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                path = ckpt_dir / f"step_{step:05d}.ckpt"
                policy.save(path, {**meta, "step": step})
                last_good = str(path)
        if epoch_pairs == 0:
            raise UninformativeRewardError(
                f"every sampled pair tied in epoch {epoch + 1}; the reward cannot rank these summaries"
            )
        ref.verify()

    if reward.params.digest() != reward_digest:
        raise FrozenModelError("reward model parameters changed during DPO")
    return policy, records
