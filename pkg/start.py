#!/usr/bin/env python3
"""
Startup script for captionguard

Runs a subcommand of the pipeline, e.g.:
    python start.py synth --synth configs/benchmark_synth.json --out data/traces.jsonl
"""

import sys

from captionguard.cli import main

if __name__ == "__main__":
    sys.exit(main())
