"""Pre-LayerNorm transformer blocks shared by the policy and the reward encoder.

Parameters live in a flat :class:`~relsum.core.optim.ParameterStore` under
dotted names (``block0.attn.wq`` ...), so the same forward functions serve the
causal policy and the bidirectional cross-encoder.
"""
from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "MASK_VALUE",
    "init_block_params",
    "init_dense",
    "causal_mask",
    "key_padding_mask",
    "attention",
    "block_forward",
    "stack_forward",
]

# Large negative instead of -inf keeps every value finite through softmax.
MASK_VALUE = -1e9


def init_dense(rng: np.random.Generator, n_in: int, n_out: int, std: float) -> tuple[np.ndarray, np.ndarray]:
    return rng.normal(0.0, std, size=(n_in, n_out)), np.zeros(n_out)


def init_block_params(
    rng: np.random.Generator,
    prefix: str,
    d_model: int,
    d_ff: int,
    init_std: float,
    n_layers: int,
) -> dict[str, np.ndarray]:
    """Initial arrays for one block; residual projections are scaled by depth."""

    out_std = init_std / math.sqrt(2.0 * n_layers)
    params: dict[str, np.ndarray] = {}
    params[f"{prefix}.ln1.gamma"] = np.ones(d_model)
    params[f"{prefix}.ln1.beta"] = np.zeros(d_model)
    for name in ("wq", "wk", "wv"):
        weight, bias = init_dense(rng, d_model, d_model, init_std)
        params[f"{prefix}.attn.{name}"] = weight
        params[f"{prefix}.attn.b{name[1]}"] = bias
    weight, bias = init_dense(rng, d_model, d_model, out_std)
    params[f"{prefix}.attn.wo"] = weight
    params[f"{prefix}.attn.bo"] = bias
    params[f"{prefix}.ln2.gamma"] = np.ones(d_model)
    params[f"{prefix}.ln2.beta"] = np.zeros(d_model)
    weight, bias = init_dense(rng, d_model, d_ff, init_std)
    params[f"{prefix}.mlp.w1"] = weight
    params[f"{prefix}.mlp.b1"] = bias
    weight, bias = init_dense(rng, d_ff, d_model, out_std)
    params[f"{prefix}.mlp.w2"] = weight
    params[f"{prefix}.mlp.b2"] = bias
    return params


def causal_mask(length: int) -> np.ndarray:
    """Additive ``(1, 1, T, T)`` mask: position j attends to positions <= j."""

    blocked = np.triu(np.ones((length, length), dtype=bool), k=1)
    return np.where(blocked, MASK_VALUE, 0.0)[None, None, :, :]


def key_padding_mask(lengths: np.ndarray, width: int) -> np.ndarray:
    """Additive ``(B, 1, 1, T)`` mask hiding right-padding keys."""

    positions = np.arange(width)[None, :]
    padded = positions >= np.asarray(lengths)[:, None]
    return np.where(padded, MASK_VALUE, 0.0)[:, None, None, :]


def _linear(x: Tensor, params: Mapping[str, Tensor], weight: str, bias: str) -> Tensor:
    return T.add(T.matmul(x, params[weight]), params[bias])


def attention(
    params: Mapping[str, Tensor],
    prefix: str,
    x: Tensor,
    mask: np.ndarray,
    n_heads: int,
) -> Tensor:
    batch, length, width = x.shape
    head = width // n_heads

    def split(name: str) -> Tensor:
        projected = _linear(x, params, f"{prefix}.w{name}", f"{prefix}.b{name}")
        return T.transpose(T.reshape(projected, (batch, length, n_heads, head)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head))
    weights = T.softmax(T.add(scores, mask))
    mixed = T.matmul(weights, v)
    merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (batch, length, width))
    return _linear(merged, params, f"{prefix}.wo", f"{prefix}.bo")


def block_forward(
    params: Mapping[str, Tensor],
    prefix: str,
    x: Tensor,
    mask: np.ndarray,
    n_heads: int,
) -> Tensor:
    normed = T.layer_norm(x, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"])
    x = T.add(x, attention(params, f"{prefix}.attn", normed, mask, n_heads))
    normed = T.layer_norm(x, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])
    hidden = T.gelu(_linear(normed, params, f"{prefix}.mlp.w1", f"{prefix}.mlp.b1"))
    return T.add(x, _linear(hidden, params, f"{prefix}.mlp.w2", f"{prefix}.mlp.b2"))


def stack_forward(
    params: Mapping[str, Tensor],
    x: Tensor,
    mask: np.ndarray,
    n_layers: int,
    n_heads: int,
) -> Tensor:
    """Run ``block0 .. block{n_layers-1}`` and the final LayerNorm."""

    for layer in range(n_layers):
        x = block_forward(params, f"block{layer}", x, mask, n_heads)
    return T.layer_norm(x, params["ln_f.gamma"], params["ln_f.beta"])
