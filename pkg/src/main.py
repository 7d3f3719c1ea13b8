import sys

from src.editlab.cli.commands import main

if __name__ == "__main__":
    sys.exit(main())
