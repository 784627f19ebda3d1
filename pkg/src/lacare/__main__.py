import sys

from lacare.cli import main

sys.exit(main())
