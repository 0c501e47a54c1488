"""Allow ``python -m ssmvdm``."""

import sys

from .cli import main

sys.exit(main())
