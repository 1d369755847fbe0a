import sys

from cardioforge.cli import main

sys.exit(main())
