import sys

from sgkit.cli import main

sys.exit(main())
