import sys

from acnet.cli import main

sys.exit(main())
