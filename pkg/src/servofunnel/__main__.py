"""Module entry point for ``python -m servofunnel``."""

from .cli import main

if __name__ == "__main__":
    main()
