"""Module executed when running ``python -m relsum``."""

from __future__ import annotations

import sys

from .application import main


def run() -> None:
    """Run the command line and exit with its status."""
    sys.exit(main())


if __name__ == "__main__":
    run()
