#!/usr/bin/env python3

"""
Starter Script for the Raretrip experiments

Runs the same commands as the `raretrip` console script from a source checkout.

Usage: (every option has a default, this is an extended example)
    python raretrip-cli.py --config experiment.json --seed 3407 --out runs/cv --jobs 4 eval
    python raretrip-cli.py --out runs/data gen-data
    python raretrip-cli.py --data runs/data/dataset --out runs/margins sweep --kind margin
    python raretrip-cli.py --data runs/data/dataset --out runs/cam cam --checkpoint runs/train/model.trm --frames tp

To see a full list of configurable options, use:
    python raretrip-cli.py --help
"""

import sys


if __name__ == "__main__":
    from raretrip.cli import main
    sys.exit(main())
