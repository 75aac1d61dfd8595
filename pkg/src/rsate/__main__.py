import sys

from rsate.cli import main

sys.exit(main())
