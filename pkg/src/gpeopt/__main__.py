"""Allow ``python -m gpeopt`` as an alternative to the console script."""

from .cli import main

main(prog_name="gpeopt")
