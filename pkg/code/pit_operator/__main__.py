"""
Runs the command-line interface with ``python -m pit_operator``
"""

import sys

from .cli import main

sys.exit(main())
