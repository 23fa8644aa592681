"""Cross-encoder relevance model used as the frozen reward, plus its context builder."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from ..config import RewardConfig
from ..errors import ConfigError, CorpusError, FrozenModelError, ShapeError
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import SEP, CLS, Product, Query, TokenVocab
from .optim import ParameterStore
from .seeding import derive_rng
from .tensor import Tensor
from .transformer import init_block_params, init_dense, key_padding_mask, stack_forward

logger = logging.getLogger(__name__)

__all__ = [
    "ProductContext",
    "RewardScore",
    "CrossEncoderReward",
    "build_context",
    "reward_of",
    "oracle_score",
]


@dataclass(frozen=True, slots=True)
class ProductContext:
    """Query-free product text: the title, then ``[SEP]`` and the extra text if any."""

    tokens: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.tokens)


def build_context(title: Sequence[str], extra: Sequence[str] | None = None, budget: int = 96) -> ProductContext:
    """``[t]`` when ``extra`` is None, otherwise ``[t; extra]`` truncated to ``budget`` tokens."""

    if budget < len(title):
        raise ConfigError(f"context budget {budget} is shorter than the title ({len(title)} tokens)")
    tokens = list(title)
    if extra is not None and budget > len(tokens):
        tokens.append(SEP)
        tokens.extend(extra[: budget - len(tokens)])
    return ProductContext(tuple(tokens))


@dataclass(frozen=True, slots=True)
class RewardScore:
    r: float
    reward: float

    @classmethod
    def from_score(cls, r: float, label: float) -> "RewardScore":
        if not 0.0 <= label <= 1.0:
            raise ValueError(f"label must lie in [0, 1], got {label}")
        return cls(r=float(r), reward=-abs(float(r) - float(label)))


def oracle_score(query: Query, product: Product) -> float:
    """Fraction of the query's target attributes the product has."""

    if not query.targets:
        raise CorpusError(f"query '{query.id}' has no target attributes")
    owned = set(product.attributes)
    return sum(1 for target in query.targets if target in owned) / len(query.targets)


class CrossEncoderReward:
    """Encoder over ``[CLS] q [SEP] context`` with an MLP head on the [CLS] state."""

    def __init__(self, vocab: TokenVocab, config: RewardConfig, params: ParameterStore, *, frozen: bool = False) -> None:
        self.vocab = vocab
        self.config = config
        self.params = params
        self.frozen = frozen

    @property
    def input_width(self) -> int:
        return self.config.query_budget + self.config.context_budget + 2

    @classmethod
    def initialize(cls, vocab: TokenVocab, config: RewardConfig, seed: int) -> "CrossEncoderReward":
        config.validate()
        rng = derive_rng(seed, "reward-init")
        d = config.d_model
        width = config.query_budget + config.context_budget + 2
        arrays: dict[str, np.ndarray] = {
            "tok_emb": rng.normal(0.0, config.init_std, size=(vocab.size, d)),
            "pos_emb": rng.normal(0.0, config.init_std, size=(width, d)),
            "seg_emb": rng.normal(0.0, config.init_std, size=(2, d)),
        }
        for layer in range(config.n_layers):
            arrays.update(init_block_params(rng, f"block{layer}", d, config.d_ff, config.init_std, config.n_layers))
        arrays["ln_f.gamma"] = np.ones(d)
        arrays["ln_f.beta"] = np.zeros(d)
        arrays["head.w1"], arrays["head.b1"] = init_dense(rng, d, config.head_hidden, 1.0 / np.sqrt(d))
        arrays["head.w2"], arrays["head.b2"] = init_dense(rng, config.head_hidden, 1, 1.0 / np.sqrt(config.head_hidden))
        return cls(vocab, config, ParameterStore(arrays))

    def with_params(self, params: ParameterStore) -> "CrossEncoderReward":
        if self.frozen:
            raise FrozenModelError("a frozen reward model cannot take new parameters")
        return CrossEncoderReward(self.vocab, self.config, params)

    def freeze(self) -> "CrossEncoderReward":
        return CrossEncoderReward(self.vocab, self.config, self.params.frozen(), frozen=True)

    # -- Encoding --------------------------------------------------------
    def encode(
        self,
        queries: Sequence[Sequence[str]],
        contexts: Sequence[ProductContext],
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Fixed-width id matrix, segment ids and true lengths for a batch."""

        if len(queries) != len(contexts):
            raise ShapeError("reward.encode", [(len(queries),), (len(contexts),)])
        width = self.input_width
        ids = np.full((len(queries), width), self.vocab.pad_id, dtype=np.int64)
        segments = np.zeros((len(queries), width), dtype=np.int64)
        lengths = np.zeros(len(queries), dtype=np.int64)
        for row, (query, context) in enumerate(zip(queries, contexts)):
            head = [CLS, *query[: self.config.query_budget], SEP]
            body = list(context.tokens[: self.config.context_budget])
            encoded = self.vocab.encode(head + body)
            ids[row, : len(encoded)] = encoded
            segments[row, len(head) : len(encoded)] = 1
            lengths[row] = len(encoded)
        return ids, segments, lengths

    def forward(
        self,
        ids: np.ndarray,
        segments: np.ndarray,
        lengths: np.ndarray,
        params: Mapping[str, Tensor] | None = None,
    ) -> Tensor:
        """Relevance probabilities ``(B,)``, differentiable when ``params`` require grad."""

        params = self.params if params is None else params
        batch, width = ids.shape
        x = T.add(T.embed_lookup(params["tok_emb"], ids), T.embed_lookup(params["pos_emb"], np.arange(width)))
        x = T.add(x, T.embed_lookup(params["seg_emb"], segments))
        hidden = stack_forward(params, x, key_padding_mask(lengths, width), self.config.n_layers, self.config.n_heads)
        cls_state = T.slice_(hidden, (slice(None), 0))
        inner = T.gelu(T.add(T.matmul(cls_state, params["head.w1"]), params["head.b1"]))
        logit = T.add(T.matmul(inner, params["head.w2"]), params["head.b2"])
        return T.sigmoid(T.reshape(logit, (batch,)))

    # -- Scoring ---------------------------------------------------------
    def _require_frozen(self) -> None:
        if not self.frozen:
            raise FrozenModelError("scores are rewards only once the reward model is frozen")

    def score_batch(
        self,
        queries: Sequence[Sequence[str]],
        contexts: Sequence[ProductContext],
        *,
        batch_size: int = 256,
    ) -> np.ndarray:
        self._require_frozen()
        scores = np.zeros(len(queries))
        for start in range(0, len(queries), batch_size):
            stop = start + batch_size
            ids, segments, lengths = self.encode(queries[start:stop], contexts[start:stop])
            scores[start:stop] = self.forward(ids, segments, lengths).data
        return scores

    def score(self, query: Sequence[str], context: ProductContext) -> float:
        """r(q, context) in (0, 1)."""

        return float(self.score_batch([query], [context])[0])

    # -- Persistence -----------------------------------------------------
    def save(self, path: str | Path, header: Mapping[str, Any] | None = None) -> None:
        meta = dict(header or {})
        meta["model"] = "cross_encoder_reward"
        meta["frozen"] = self.frozen
        meta["reward_config"] = {name: getattr(self.config, name) for name in self.config.__dataclass_fields__}
        meta["vocab"] = {"n_attributes": self.vocab.n_attributes, "n_filler": self.vocab.n_filler}
        save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path: str | Path, *, for_training: bool = False) -> tuple["CrossEncoderReward", dict[str, Any]]:
        """Load a checkpoint; a frozen one can only come back frozen."""

        checkpoint = load_checkpoint(path, requires_grad=for_training)
        header = checkpoint.header
        if header.get("model") != "cross_encoder_reward":
            raise CorpusError(f"{path} does not hold a reward checkpoint")
        if for_training and checkpoint.frozen:
            raise FrozenModelError(f"{path} is frozen and cannot be trained further")
        model = cls(
            TokenVocab(**header["vocab"]),
            RewardConfig(**header["reward_config"]),
            checkpoint.params,
            frozen=checkpoint.frozen,
        )
        return model, header


def reward_of(
    model: CrossEncoderReward,
    query: Sequence[str],
    title: Sequence[str],
    summary: Sequence[str],
    label: float,
) -> RewardScore:
    """``-|r(q, [t; s]) - l|``."""

    context = build_context(title, summary, model.config.context_budget)
    return RewardScore.from_score(model.score(query, context), label)
