#!/usr/bin/env python3
"""
SRFM-ERGM command-line entry point.

Usage:
    python main.py fit --network edges.csv --covariates nodes.csv --schema schema.json --model model.json
    python main.py simulate --model model.json --n-nodes 30 --theta "[-1.0]" --n-draws 5
    python main.py study --condition 3+ --reps 20 --jobs 4
    python main.py ari truth.csv fitted.csv
"""
import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
