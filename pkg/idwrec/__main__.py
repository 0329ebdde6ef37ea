"""Entry point for ``python -m idwrec``."""

import sys

from idwrec.cli import main

if __name__ == "__main__":
    sys.exit(main())
