import sys

from xcache.cli import main

sys.exit(main())
