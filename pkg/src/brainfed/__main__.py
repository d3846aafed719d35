import sys

from brainfed.cli import main

sys.exit(main())
