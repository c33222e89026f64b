#!/usr/bin/env python3
"""Console entry point for SoftSplat Sim

The project modules live at the repository root; this shim puts them on the path
and hands over to main.main.
"""

import os
import sys


def main() -> int:
    """Entry point for the ``softsplat`` console script."""
    sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
    from main import main as _main
    return _main()


if __name__ == "__main__":
    sys.exit(main())
