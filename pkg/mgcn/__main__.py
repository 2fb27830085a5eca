#!/usr/bin/env python3
"""
Main entry point for the mgcn command line.

Usage:
    python -m mgcn synth --per-class 50 --img-size 16 --out data/
    python -m mgcn train --model cnn --data data/ --img-size 16 --out runs/cnn
    python -m mgcn evaluate --run runs/cnn
    python -m mgcn compare runs/cnn runs/vgg --modality ct
    python -m mgcn grad-check
    python -m mgcn summary --model alexnet --img-size 227
    python -m mgcn runs
"""

import sys


def main(argv=None):
    from .cli import run

    sys.exit(run(argv))


if __name__ == "__main__":
    main()
