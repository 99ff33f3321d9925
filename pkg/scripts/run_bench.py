#!/usr/bin/env python3
"""Synthesize a fixture if needed, then run one config through the bench.

    python3 scripts/run_bench.py scripts/configs/bench_blob2d.ini --kind blob2d --out runs/blob2d
"""

import argparse
import logging
import sys
from pathlib import Path

from ppir import synth
from ppir.cli import EXIT_OK, cmd_bench, load_config


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config", type=Path)
    p.add_argument("--kind", choices=synth.KINDS, default="blob2d")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--repeats", type=int)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    fixture = (args.out / f"{args.kind}-{args.seed}").resolve()
    if not (fixture / "truth.json").is_file():
        synth.write_fixture(synth.make_fixture(args.kind, seed=args.seed), fixture)
    cfg, bench = load_config(args.config, {"fixture": str(fixture), "out": str(args.out.resolve() / "results"),
                                           "repeats": args.repeats})
    code = cmd_bench(cfg, bench)
    print((Path(cfg.out) / "metrics.csv").read_text(), end="")
    return code


if __name__ == "__main__":
    sys.exit(main())
