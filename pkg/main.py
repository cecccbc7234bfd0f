"""
Main entry point for the nicguard toolkit
python main.py <train|attack|finetune|recompress|eval|rd-curve|sweep|targeted> [flags]
"""

import sys

from backend.cli import main

if __name__ == "__main__":
    sys.exit(main())
