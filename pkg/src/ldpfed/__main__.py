import sys

from ldpfed.cli import main

sys.exit(main())
