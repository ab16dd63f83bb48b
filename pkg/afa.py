#!/usr/bin/env python3
"""Entry point: python afa.py {run,eval,plot} ..."""

import sys

from cli.main import main

if __name__ == "__main__":
  sys.exit(main())
