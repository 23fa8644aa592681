"""Convenience launcher: ``python scripts/run_pipeline.py [COMMAND] [options]``.

Without a command every stage runs in order.
"""
from __future__ import annotations

import sys

from relsum.application import main


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:] or ["all"]))
