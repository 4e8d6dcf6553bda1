"""python -m wsddn behaves exactly like the installed console script."""

import sys

from wsddn.cli import main

if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
