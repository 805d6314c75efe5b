"""Allow ``python -m spam_prune``."""

import sys

from .cli import main

sys.exit(main())
