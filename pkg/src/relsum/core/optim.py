"""Named parameters, AdamW, the cosine schedule and a finite-difference checker."""
from __future__ import annotations

import hashlib
import logging
import math
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..errors import GradCheckError, NonFiniteError, ShapeError
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

__all__ = [
    "ParameterStore",
    "OptimizerState",
    "adamw_step",
    "cosine_lr",
    "grad_check",
    "relative_errors",
]


class ParameterStore(Mapping[str, Tensor]):
    """Ordered, name-unique collection of trainable tensors.

    Stores are treated as values: updates build a new store via
    :meth:`replace`, so snapshots taken earlier never change.
    """

    __slots__ = ("_tensors",)

    def __init__(self, tensors: Mapping[str, object] | None = None, *, requires_grad: bool = True) -> None:
        self._tensors: dict[str, Tensor] = {}
        for name, value in (tensors or {}).items():
            self._insert(name, value, requires_grad)

    def _insert(self, name: str, value: object, requires_grad: bool) -> None:
        if name in self._tensors:
            raise ValueError(f"Duplicate parameter name '{name}'")
        data = value.data if isinstance(value, Tensor) else value
        self._tensors[name] = Tensor(data, requires_grad=requires_grad, name=name)

    def add(self, name: str, value: object) -> Tensor:
        self._insert(name, value, True)
        return self._tensors[name]

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def replace(self, updates: Mapping[str, object]) -> "ParameterStore":
        """Return a new store with some tensors swapped out."""

        unknown = set(updates) - set(self._tensors)
        if unknown:
            raise KeyError(f"Unknown parameters: {sorted(unknown)}")
        store = ParameterStore.__new__(ParameterStore)
        store._tensors = {}
        for name, tensor in self._tensors.items():
            if name in updates:
                new = updates[name]
                data = new.data if isinstance(new, Tensor) else np.asarray(new, dtype=np.float64)
                if data.shape != tensor.shape:
                    raise ShapeError("replace", [tensor.shape, data.shape], f"parameter '{name}'")
                store._tensors[name] = Tensor(data, requires_grad=tensor.requires_grad, name=name)
            else:
                store._tensors[name] = tensor
        return store

    def frozen(self) -> "ParameterStore":
        """Copy whose tensors do not request gradients."""

        return ParameterStore({name: t.data for name, t in self._tensors.items()}, requires_grad=False)

    def trainable(self) -> "ParameterStore":
        return ParameterStore({name: t.data for name, t in self._tensors.items()}, requires_grad=True)

    @property
    def is_frozen(self) -> bool:
        return not any(t.requires_grad for t in self._tensors.values())

    def num_values(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def digest(self) -> str:
        """SHA-256 over names, shapes and little-endian float64 bytes."""

        hasher = hashlib.sha256()
        for name, tensor in self._tensors.items():
            hasher.update(name.encode("utf-8"))
            hasher.update(repr(tensor.shape).encode("ascii"))
            hasher.update(tensor.data.astype("<f8").tobytes())
        return hasher.hexdigest()


@dataclass(slots=True)
class OptimizerState:
    """AdamW moments plus hyperparameters."""

    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def create(
        cls,
        params: Mapping[str, Tensor],
        *,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ) -> "OptimizerState":
        return cls(
            first={name: np.zeros_like(t.data) for name, t in params.items()},
            second={name: np.zeros_like(t.data) for name, t in params.items()},
            step=0,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            weight_decay=weight_decay,
        )


def adamw_step(
    params: ParameterStore,
    grads: Mapping[str, Tensor],
    state: OptimizerState,
    lr: float,
) -> tuple[ParameterStore, OptimizerState]:
    """One decoupled-weight-decay Adam update; inputs are left untouched."""

    step = state.step + 1
    bias1 = 1.0 - state.beta1**step
    bias2 = 1.0 - state.beta2**step
    updates: dict[str, np.ndarray] = {}
    first: dict[str, np.ndarray] = {}
    second: dict[str, np.ndarray] = {}

    for name, param in params.items():
        grad = grads[name].data
        if grad.shape != param.shape or state.first[name].shape != param.shape:
            raise ShapeError("adamw_step", [param.shape, grad.shape, state.first[name].shape], f"parameter '{name}'")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"adamw_step: non-finite gradient for parameter '{name}'")
        m = state.beta1 * state.first[name] + (1.0 - state.beta1) * grad
        v = state.beta2 * state.second[name] + (1.0 - state.beta2) * grad * grad
        decayed = param.data * (1.0 - lr * state.weight_decay)
        updates[name] = decayed - lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        first[name] = m
        second[name] = v

    new_state = OptimizerState(
        first=first,
        second=second,
        step=step,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
        weight_decay=state.weight_decay,
    )
    return params.replace(updates), new_state


def cosine_lr(step: int, total_steps: int, peak: float) -> float:
    """Cosine decay from ``peak`` at step 0 to zero at ``total_steps``; no warmup."""

    if total_steps <= 0:
        raise ValueError("cosine_lr: total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    if peak <= 0:
        raise ValueError("cosine_lr: peak must be positive")
    return peak * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def grad_check(
    fn: Callable[[ParameterStore], Tensor],
    params: ParameterStore,
    h: float = 1e-4,
    floor: float = 1e-8,
) -> float:
    """Compare tape gradients against central differences.

    Every element contributes ``|a - n| / max(|a|, |n|, floor)`` for analytic
    ``a`` and numeric ``n``; the maximum over all elements of all parameters
    is returned. ``floor`` is the absolute scale below which a gradient counts
    as zero; raise it above the central-difference noise when some gradients
    vanish analytically.
    """

    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    if floor <= 0:
        raise ValueError("grad_check: floor must be positive")

    base = fn(params).item()
    again = fn(params).item()
    if base != again:
        raise GradCheckError(f"grad_check: function is not deterministic ({base!r} != {again!r})")

    with Tape() as tape:
        loss = fn(params)
        analytic = tape.backward(loss, params)

    worst = 0.0
    for name, tensor in params.items():
        flat = tensor.data.reshape(-1)
        numeric = np.empty_like(flat)
        for index in range(flat.size):
            plus = flat.copy()
            plus[index] += h
            minus = flat.copy()
            minus[index] -= h
            f_plus = fn(params.replace({name: plus.reshape(tensor.shape)})).item()
            f_minus = fn(params.replace({name: minus.reshape(tensor.shape)})).item()
            numeric[index] = (f_plus - f_minus) / (2.0 * h)
        exact = analytic[name].data.reshape(-1)
        errors = relative_errors(exact, numeric, floor)
        error = float(errors.max()) if errors.size else 0.0
        logger.debug("grad_check %s: max relative error %.3e", name, error)
        worst = max(worst, error)
    return worst


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""

    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale
