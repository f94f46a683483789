"""Start the ledger and inference service (same as `python -m vesseladapt serve`)"""
import sys

from vesseladapt.cli import main

if __name__ == "__main__":
    sys.exit(main(["serve"]))
