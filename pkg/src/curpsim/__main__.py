import sys

from curpsim.cli import main

sys.exit(main())
