"""
Command-line entry point: ``python -m byzantine_dsgd``.
"""

import sys

from byzantine_dsgd.cli import main

if __name__ == "__main__":
    sys.exit(main())
