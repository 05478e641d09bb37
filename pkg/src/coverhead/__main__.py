import sys

from coverhead.cli import main

sys.exit(main())
