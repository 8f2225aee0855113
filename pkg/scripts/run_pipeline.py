#!/usr/bin/env python3
"""
Coupled-Dynamics Pipeline Script
Generate data, train the operator model and propagate uncertainty

Usage:
    python scripts/run_pipeline.py gen-data --config config/config.yaml
    python scripts/run_pipeline.py train --row T2
    python scripts/run_pipeline.py pdem --provider oracle
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.cli import run


def main():
    """Main execution function"""
    return run(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
