"""Entry point for `python -m ttsa`."""

import sys

from ttsa.main import main

sys.exit(main())
