import sys

from castle.cli import main

sys.exit(main())
