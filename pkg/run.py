import sys

# Project Imports
from hgmamba.cli import main

if __name__ == "__main__":
    sys.exit(main())
