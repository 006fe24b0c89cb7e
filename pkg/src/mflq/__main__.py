"""Run the command-line interface as `python -m mflq`."""

from .cli import main

if __name__ == "__main__":
    raise SystemExit(main())
