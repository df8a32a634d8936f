"""Regenerate the --help snapshots: python3 tests/snapshots/regen.py"""

import os
from pathlib import Path

from tristream.cli import build_parser

OUT = Path(__file__).parent


def main():
    os.environ["COLUMNS"] = "100"  # pin wrap width; tests render the same way
    parser = build_parser()
    (OUT / "help_top.txt").write_text(parser.format_help())
    sub = parser._subparsers._group_actions[0]
    for name, sp in sub.choices.items():
        (OUT / f"help_{name}.txt").write_text(sp.format_help())
    print(f"wrote snapshots to {OUT}")


if __name__ == "__main__":
    main()
