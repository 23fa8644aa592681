"""Relevance-driven product summarisation with RL fine-tuning against a frozen reranker."""

from __future__ import annotations

__all__ = ["main"]


def main() -> int:
    """Entry point for console scripts.

    Delayed import keeps numpy and matplotlib out of ``import relsum``.
    """

    from .application import main as _main

    return _main()
