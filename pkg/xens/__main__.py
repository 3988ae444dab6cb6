"""Allow `python -m xens`."""

from .main import main

main()
