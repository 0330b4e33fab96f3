import sys

from fnsf.cli import main

sys.exit(main())
