import sys

from usted.cli import main

sys.exit(main())
