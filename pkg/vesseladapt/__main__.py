import sys

from vesseladapt.cli import main

sys.exit(main())
