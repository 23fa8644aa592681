"""Core numerics and models: tensors, optimizer, corpus, policy and reward."""

from .corpus import Corpus, GoldenSplit, JudgedPair, Product, Query, TokenVocab
from .optim import ParameterStore
from .policy import CausalPolicy, PolicySnapshot, Rollout
from .reward import CrossEncoderReward, ProductContext, RewardScore
from .tensor import Tape, Tensor

__all__ = [
    "CausalPolicy",
    "Corpus",
    "CrossEncoderReward",
    "GoldenSplit",
    "JudgedPair",
    "ParameterStore",
    "PolicySnapshot",
    "Product",
    "ProductContext",
    "Query",
    "RewardScore",
    "Rollout",
    "Tape",
    "Tensor",
    "TokenVocab",
]
