#!/usr/bin/env python3
"""Run every shipped scenario config and print the markdown tables.

Usage: python3 scripts/run_all.py [--seed N] [--out DIR]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from unlearnlab import cli  # noqa: E402

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--out", default="runs")
    args = parser.parse_args()

    for config in sorted(CONFIG_DIR.glob("*.cfg")):
        out = Path(args.out) / f"{config.stem}-seed{args.seed}"
        code = cli.main(["run", "--config", str(config),
                         "--seed", str(args.seed), "--out", str(out)])
        if code != 0:
            print(f"{config.stem}: exit {code}", file=sys.stderr)
            return code
        print(f"\n## {config.stem} (seed {args.seed})\n")
        print((out / "results.md").read_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
