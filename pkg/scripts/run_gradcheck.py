#!/usr/bin/env python3
"""Run the finite-difference verification suite (same as `icegraph gradcheck`)."""

import sys

from icegraph import cli

if __name__ == "__main__":
    sys.exit(cli.main(["gradcheck"]))
