import sys

from ifssl.cli import main

sys.exit(main())
