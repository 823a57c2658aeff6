import sys

from locsched.cli import main

sys.exit(main())
