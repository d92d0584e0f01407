import sys

from app.cli.api import main

if __name__ == "__main__":
    sys.exit(main())
