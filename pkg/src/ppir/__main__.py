import sys

from ppir.cli import main

sys.exit(main())
