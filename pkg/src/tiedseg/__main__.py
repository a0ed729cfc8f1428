import sys

from tiedseg.cli import main

sys.exit(main())
