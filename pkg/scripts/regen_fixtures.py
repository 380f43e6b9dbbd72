#!/usr/bin/env python3
"""Regenerate everything under fixtures/ from choreo.fixtures.

Writes each artifact twice in memory and aborts on any nondeterminism
before touching disk.
"""

import argparse
import sys
from pathlib import Path

from choreo.fixtures import regenerate


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", type=Path,
                        default=Path(__file__).resolve().parent.parent / "fixtures")
    args = parser.parse_args()
    manifest = regenerate(args.root)
    for rel, entry in sorted(manifest["files"].items()):
        print(f"{entry['sha256'][:12]}  {rel}")
    print(f"{len(manifest['files'])} fixtures under {args.root}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
