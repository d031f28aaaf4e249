#!/usr/bin/env python3
"""
LAKF CLI - main entry point
Model-based and learning-aided Kalman filtering of bounding boxes
"""

import sys

from lakf.cli import main

if __name__ == "__main__":
    sys.exit(main())
