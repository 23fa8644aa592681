"""High-level entry points for running the pipeline."""
from __future__ import annotations

from typing import Sequence

from .cli import cli_dispatch

__all__ = ["main"]


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point used by ``python -m relsum``."""

    return cli_dispatch(argv)
