"""The summarization policy: a tiny causal transformer language model."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from ..config import PolicyConfig
from ..errors import CorpusError, FrozenModelError, ShapeError
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import DESCRIPTION, INSTRUCTION_TOKENS, TITLE, Product, TokenVocab
from .optim import ParameterStore
from .seeding import derive_rng
from .tensor import Tensor
from .transformer import causal_mask, init_block_params, stack_forward

logger = logging.getLogger(__name__)

__all__ = [
    "CausalPolicy",
    "PolicySnapshot",
    "Rollout",
    "build_prompt",
    "heuristic_summary",
    "sample",
    "batch_logprobs",
    "token_logprobs",
    "greedy_summaries",
    "SNAPSHOT_ROLES",
]

SNAPSHOT_ROLES = ("old", "ref")


def build_prompt(
    title: Sequence[str],
    description: Sequence[str],
    *,
    description_budget: int = 64,
    title_budget: int = 16,
) -> list[str]:
    """``[DESCRIPTION]: d [TITLE]: t`` followed by the instruction marker."""

    if not title:
        raise CorpusError("cannot build a prompt for an empty title")
    return [DESCRIPTION, *description[:description_budget], TITLE, *title[:title_budget], *INSTRUCTION_TOKENS]


def heuristic_summary(title: Sequence[str], description: Sequence[str], budget: int = 12) -> tuple[str, ...]:
    """Description tokens absent from the title, first occurrence order, capped at ``budget``."""

    in_title = set(title)
    picked: list[str] = []
    for token in description:
        if token in in_title or token in picked:
            continue
        picked.append(token)
        if len(picked) >= budget:
            break
    return tuple(picked)


class CausalPolicy:
    """Decoder-only LM over the shared vocabulary.

    Instances are cheap views over a :class:`ParameterStore`; training swaps
    in updated stores through :meth:`with_params`.
    """

    def __init__(self, vocab: TokenVocab, config: PolicyConfig, params: ParameterStore) -> None:
        self.vocab = vocab
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, vocab: TokenVocab, config: PolicyConfig, seed: int) -> "CausalPolicy":
        config.validate()
        rng = derive_rng(seed, "policy-init")
        d = config.d_model
        arrays: dict[str, np.ndarray] = {
            "tok_emb": rng.normal(0.0, config.init_std, size=(vocab.size, d)),
            "pos_emb": rng.normal(0.0, config.init_std, size=(config.context_window, d)),
        }
        for layer in range(config.n_layers):
            arrays.update(init_block_params(rng, f"block{layer}", d, config.d_ff, config.init_std, config.n_layers))
        arrays["ln_f.gamma"] = np.ones(d)
        arrays["ln_f.beta"] = np.zeros(d)
        if not config.tied_output:
            arrays["head.w"] = rng.normal(0.0, config.init_std, size=(d, vocab.size))
        arrays["head.b"] = np.zeros(vocab.size)
        return cls(vocab, config, ParameterStore(arrays))

    def with_params(self, params: ParameterStore) -> "CausalPolicy":
        return CausalPolicy(self.vocab, self.config, params)

    def snapshot(self, role: str) -> "PolicySnapshot":
        if role not in SNAPSHOT_ROLES:
            raise ValueError(f"snapshot role must be one of {SNAPSHOT_ROLES}, got {role!r}")
        frozen = self.params.frozen()
        return PolicySnapshot(role=role, policy=self.with_params(frozen), digest=frozen.digest())

    def logits(self, ids: np.ndarray, params: Mapping[str, Tensor] | None = None) -> Tensor:
        """``(B, T) -> (B, T, V)``; position t scores the token at t + 1."""

        params = self.params if params is None else params
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ShapeError("policy.logits", [ids.shape], "expected a (batch, length) id matrix")
        length = ids.shape[1]
        if length > self.config.context_window:
            raise ShapeError("policy.logits", [ids.shape], f"sequence exceeds context window {self.config.context_window}")
        x = T.add(T.embed_lookup(params["tok_emb"], ids), T.embed_lookup(params["pos_emb"], np.arange(length)))
        hidden = stack_forward(params, x, causal_mask(length), self.config.n_layers, self.config.n_heads)
        if self.config.tied_output:
            out = T.matmul(hidden, T.transpose(params["tok_emb"], (1, 0)))
        else:
            out = T.matmul(hidden, params["head.w"])
        return T.add(out, params["head.b"])

    def encode_prompt(self, product: Product) -> list[int]:
        return self.encode_prompt_tokens(product.title, product.description)

    def encode_prompt_tokens(self, title: Sequence[str], description: Sequence[str]) -> list[int]:
        tokens = build_prompt(
            title,
            description,
            description_budget=self.config.description_budget,
            title_budget=self.config.title_budget,
        )
        return self.vocab.encode(tokens)

    def check_room(self, prompt_length: int, new_tokens: int) -> None:
        if prompt_length + new_tokens > self.config.context_window:
            raise ShapeError(
                "policy.sample",
                [(prompt_length,), (new_tokens,)],
                f"prompt plus summary exceeds context window {self.config.context_window}",
            )

    # -- Persistence -----------------------------------------------------
    def save(self, path: str | Path, header: Mapping[str, Any] | None = None) -> None:
        meta = dict(header or {})
        meta["model"] = "causal_policy"
        meta["policy_config"] = _config_payload(self.config)
        meta["vocab"] = {"n_attributes": self.vocab.n_attributes, "n_filler": self.vocab.n_filler}
        save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path: str | Path, *, requires_grad: bool = True) -> tuple["CausalPolicy", dict[str, Any]]:
        checkpoint = load_checkpoint(path, requires_grad=requires_grad)
        header = checkpoint.header
        if header.get("model") != "causal_policy":
            raise CorpusError(f"{path} does not hold a policy checkpoint")
        config = PolicyConfig(**header["policy_config"])
        vocab = TokenVocab(**header["vocab"])
        return cls(vocab, config, checkpoint.params), header


def _config_payload(config: PolicyConfig) -> dict[str, Any]:
    return {name: getattr(config, name) for name in config.__dataclass_fields__}


@dataclass(frozen=True, slots=True)
class PolicySnapshot:
    """Frozen parameters tagged ``old`` (sampling policy) or ``ref`` (initial policy)."""

    role: str
    policy: CausalPolicy
    digest: str

    def verify(self) -> None:
        current = self.policy.params.digest()
        if current != self.digest:
            raise FrozenModelError(f"{self.role} snapshot changed after creation")


@dataclass(frozen=True, slots=True)
class Rollout:
    prompt: tuple[int, ...]
    completion: tuple[int, ...]
    logprobs: tuple[float, ...]
    eos_id: int

    @property
    def ended(self) -> bool:
        return bool(self.completion) and self.completion[-1] == self.eos_id

    @property
    def summary_ids(self) -> tuple[int, ...]:
        """Completion without its terminating end-of-summary token."""

        return self.completion[:-1] if self.ended else self.completion

    def __len__(self) -> int:
        return len(self.completion)


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _decode(
    policy: CausalPolicy,
    prompts: np.ndarray,
    budget: int,
    pick: Callable[[int, np.ndarray], int],
) -> tuple[list[list[int]], list[list[float]]]:
    """Extend equal-length prompts until each row emits EOS or ``budget`` tokens."""

    rows = prompts.shape[0]
    eos, pad = policy.vocab.eos_id, policy.vocab.pad_id
    sequences = prompts.astype(np.int64)
    done = np.zeros(rows, dtype=bool)
    completions: list[list[int]] = [[] for _ in range(rows)]
    logprobs: list[list[float]] = [[] for _ in range(rows)]
    for _ in range(budget):
        if done.all():
            break
        last = policy.logits(sequences).data[:, -1, :]
        logp = _log_softmax_rows(last)
        column = np.full(rows, pad, dtype=np.int64)
        for row in range(rows):
            if done[row]:
                continue
            token = pick(row, last[row])
            completions[row].append(token)
            logprobs[row].append(float(logp[row, token]))
            column[row] = token
            done[row] = token == eos
        sequences = np.concatenate([sequences, column[:, None]], axis=1)
    return completions, logprobs


def sample(
    policy: CausalPolicy,
    prompt: Sequence[int],
    G: int,
    temperature: float,
    seed: int,
    *,
    indices: Sequence[int] = (),
    stage: str = "rollout",
    greedy: bool = False,
    max_new_tokens: int | None = None,
) -> list[Rollout]:
    """Draw ``G`` completions of one prompt.

    Row ``i`` draws from ``derive_rng(seed, stage, *indices, i)``. Tokens are
    sampled from ``softmax(logits / temperature)`` but the recorded log-probs
    are those of the untempered distribution.
    """

    if G < 1:
        raise ValueError(f"G must be >= 1, got {G}")
    if not greedy and temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    budget = policy.config.summary_budget if max_new_tokens is None else max_new_tokens
    prompt_ids = np.asarray(prompt, dtype=np.int64)
    policy.check_room(len(prompt_ids), budget)
    rngs = [derive_rng(seed, stage, *indices, row) for row in range(G)]

    def pick(row: int, logits: np.ndarray) -> int:
        if greedy:
            return int(np.argmax(logits))
        scaled = logits / temperature
        weights = np.exp(scaled - scaled.max())
        cumulative = np.cumsum(weights)
        draw = rngs[row].random() * cumulative[-1]
        return int(min(np.searchsorted(cumulative, draw, side="right"), len(cumulative) - 1))

    completions, logprobs = _decode(policy, np.tile(prompt_ids, (G, 1)), budget, pick)
    prompt_tuple = tuple(int(t) for t in prompt_ids)
    return [
        Rollout(prompt_tuple, tuple(tokens), tuple(lps), policy.vocab.eos_id)
        for tokens, lps in zip(completions, logprobs)
    ]


def batch_logprobs(
    policy: CausalPolicy,
    prompts: Sequence[Sequence[int]],
    completions: Sequence[Sequence[int]],
    params: Mapping[str, Tensor] | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Log-probs of each completion given its prompt, fed the true previous tokens.

    Returns ``(logp, mask)`` of shape ``(N, T - 1)`` where ``logp[n, t]`` is
    the log-probability of token ``t + 1`` of row ``n`` and ``mask`` marks the
    completion positions. Rows are right-padded, so a row's completion
    log-probs are ``logp[n][mask[n]]`` in order.
    """

    if len(prompts) != len(completions) or not prompts:
        raise ShapeError("batch_logprobs", [(len(prompts),), (len(completions),)], "need matching nonempty batches")
    lengths = [len(p) + len(c) for p, c in zip(prompts, completions)]
    width = max(max(lengths), 2)
    ids = np.full((len(prompts), width), policy.vocab.pad_id, dtype=np.int64)
    mask = np.zeros((len(prompts), width - 1), dtype=bool)
    for row, (prompt, completion) in enumerate(zip(prompts, completions)):
        if not prompt:
            raise ShapeError("batch_logprobs", [(0,)], "prompt must be nonempty")
        sequence = list(prompt) + list(completion)
        if min(sequence) < 0 or max(sequence) >= policy.vocab.size:
            raise CorpusError(f"token id outside the vocabulary in row {row}")
        ids[row, : len(sequence)] = sequence
        mask[row, len(prompt) - 1 : len(sequence) - 1] = True
    logits = policy.logits(ids[:, :-1], params)
    logp = T.gather(T.log_softmax(logits), ids[:, 1:])
    return logp, mask


def token_logprobs(
    policy: CausalPolicy,
    prompt: Sequence[int],
    completion: Sequence[int],
    params: Mapping[str, Tensor] | None = None,
) -> Tensor:
    """Per-token log-probs of ``completion`` (temperature 1), length ``len(completion)``."""

    if not completion:
        return Tensor(np.zeros(0))
    logp, mask = batch_logprobs(policy, [prompt], [completion], params)
    return T.slice_(logp, mask)


def greedy_summaries(
    policy: CausalPolicy,
    products: Iterable[Product],
    *,
    batch_size: int = 64,
) -> dict[str, tuple[str, ...]]:
    """Greedy summaries keyed by product id; equal-length prompts are decoded together."""

    by_length: dict[int, list[tuple[str, list[int]]]] = {}
    for product in products:
        prompt = policy.encode_prompt(product)
        by_length.setdefault(len(prompt), []).append((product.id, prompt))

    budget = policy.config.summary_budget
    summaries: dict[str, tuple[str, ...]] = {}
    for length in sorted(by_length):
        group = by_length[length]
        policy.check_room(length, budget)
        for start in range(0, len(group), batch_size):
            chunk = group[start : start + batch_size]
            prompts = np.array([ids for _, ids in chunk], dtype=np.int64)
            completions, _ = _decode(policy, prompts, budget, lambda _row, logits: int(np.argmax(logits)))
            for (product_id, _), tokens in zip(chunk, completions):
                if tokens and tokens[-1] == policy.vocab.eos_id:
                    tokens = tokens[:-1]
                summaries[product_id] = tuple(policy.vocab.decode(tokens))
    logger.debug("decoded %d greedy summaries", len(summaries))
    return dict(sorted(summaries.items()))
