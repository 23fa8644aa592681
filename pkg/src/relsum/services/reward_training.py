"""One-time training of the cross-encoder relevance model, then freezing it."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from tqdm import tqdm

from ..config import RewardConfig
from ..core import tensor as T
from ..core.corpus import Corpus, JudgedPair
from ..core.optim import OptimizerState, adamw_step, cosine_lr
from ..core.reward import CrossEncoderReward, ProductContext, build_context
from ..core.seeding import derive_rng
from ..core.tensor import Tape
from ..errors import CorpusError, EmptyDatasetError, NonFiniteError, RewardGateError, TrainingDivergedError

logger = logging.getLogger(__name__)

__all__ = ["RewardTrainingReport", "train_reward", "labelled_examples"]


@dataclass(slots=True)
class RewardTrainingReport:
    epochs: list[dict[str, float]] = field(default_factory=list)
    heldout_mae: float = math.inf
    mean_score_by_label: dict[str, float] = field(default_factory=dict)
    n_train: int = 0
    n_heldout: int = 0

    def to_payload(self) -> dict[str, object]:
        return {
            "epochs": self.epochs,
            "heldout_mae": self.heldout_mae,
            "mean_score_by_label": self.mean_score_by_label,
            "n_train": self.n_train,
            "n_heldout": self.n_heldout,
        }


def labelled_examples(
    corpus: Corpus,
    pairs: Sequence[JudgedPair],
    budget: int,
) -> tuple[list[tuple[str, ...]], list[ProductContext], np.ndarray]:
    """Queries, ``[t; d]`` contexts and labels for judged pairs."""

    queries: list[tuple[str, ...]] = []
    contexts: list[ProductContext] = []
    labels = np.zeros(len(pairs))
    for idx, pair in enumerate(pairs):
        product = corpus.product(pair.product_id)
        queries.append(corpus.query(pair.query_id).tokens)
        contexts.append(build_context(product.title, product.description, budget))
        labels[idx] = pair.label
    return queries, contexts, labels


def _mae(model: CrossEncoderReward, queries, contexts, labels: np.ndarray, batch_size: int) -> tuple[float, np.ndarray]:
    scores = model.freeze().score_batch(queries, contexts, batch_size=batch_size)
    return float(np.mean(np.abs(scores - labels))), scores


def train_reward(
    corpus: Corpus,
    config: RewardConfig,
    seed: int,
    *,
    progress: bool = True,
) -> tuple[CrossEncoderReward, RewardTrainingReport]:
    """Fit ``r(q, [t; d])`` to the rating labels by squared error, then freeze.

    Training stops at the first epoch whose held-out mean ``|r - l|`` is
    below ``config.gate``; missing the gate after ``max_epochs`` is an error.
    """

    config.validate()
    pairs = corpus.pairs_in("train")
    present = {pair.label for pair in pairs}
    if not {0.0, 0.5, 1.0} <= present:
        raise CorpusError(f"reward training needs all three label values, found {sorted(present)}")

    query_ids = sorted({pair.query_id for pair in pairs})
    split_rng = derive_rng(seed, "reward-split")
    n_heldout = max(1, int(round(len(query_ids) * config.heldout_fraction)))
    heldout_ids = set(split_rng.choice(np.array(query_ids), size=n_heldout, replace=False).tolist())
    train_pairs = [p for p in pairs if p.query_id not in heldout_ids]
    heldout_pairs = [p for p in pairs if p.query_id in heldout_ids]
    if not train_pairs:
        raise EmptyDatasetError(
            f"held-out split takes all {len(query_ids)} train queries (heldout_fraction {config.heldout_fraction}); "
            "nothing is left to fit"
        )

    train_q, train_c, train_l = labelled_examples(corpus, train_pairs, config.context_budget)
    held_q, held_c, held_l = labelled_examples(corpus, heldout_pairs, config.context_budget)

    model = CrossEncoderReward.initialize(corpus.vocab, config, seed)
    state = OptimizerState.create(model.params, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(train_pairs) / config.batch_size)
    total_steps = steps_per_epoch * config.max_epochs
    report = RewardTrainingReport(n_train=len(train_pairs), n_heldout=len(heldout_pairs))
    logger.info("training reward model on %d pairs (%d held out)", len(train_pairs), len(heldout_pairs))

    step = 0
    for epoch in range(config.max_epochs):
        order = derive_rng(seed, "reward-order", epoch).permutation(len(train_pairs))
        losses: list[float] = []
        batches = range(0, len(order), config.batch_size)
        for start in tqdm(batches, desc=f"reward epoch {epoch + 1}", disable=not progress, leave=False):
            rows = order[start : start + config.batch_size]
            ids, segments, lengths = model.encode([train_q[i] for i in rows], [train_c[i] for i in rows])
            try:
                with Tape() as tape:
                    probs = model.forward(ids, segments, lengths)
                    diff = T.sub(probs, train_l[rows])
                    loss = T.mean(T.mul(diff, diff))
                    grads = tape.backward(loss, model.params)
                params, state = adamw_step(model.params, grads, state, cosine_lr(step, total_steps, config.lr))
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"reward training diverged at step {step}: {exc}") from exc
            model = model.with_params(params)
            losses.append(loss.item())
            step += 1

        heldout_mae, _ = _mae(model, held_q, held_c, held_l, config.batch_size)
        record = {"epoch": epoch + 1, "train_mse": float(np.mean(losses)), "heldout_mae": heldout_mae}
        report.epochs.append(record)
        logger.info("reward epoch %d: train mse %.4f, held-out mae %.4f", epoch + 1, record["train_mse"], heldout_mae)
        if heldout_mae < config.gate:
            break
    else:
        raise RewardGateError(
            f"held-out mean |r - l| stayed at {report.epochs[-1]['heldout_mae']:.4f} "
            f"(gate {config.gate}) after {config.max_epochs} epochs; "
            "use a larger reward model, more judged pairs, or more epochs"
        )

    frozen = model.freeze()
    report.heldout_mae, held_scores = _mae(frozen, held_q, held_c, held_l, config.batch_size)
    for label in (0.0, 0.5, 1.0):
        chosen = held_l == label
        if chosen.any():
            report.mean_score_by_label[str(label)] = float(held_scores[chosen].mean())
    return frozen, report
