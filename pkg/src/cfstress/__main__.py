import sys

from cfstress.harness.cli import main

sys.exit(main())
