import sys

from .cli import fedctl_main

sys.exit(fedctl_main())
