#!/usr/bin/env python3
"""Run the scaling experiments in plain and attested mode and write CSVs.

    python scripts/run_experiments.py --out results/ [--trials 30] [--quick]

Writes raw.csv, summary.csv and delta_<kind>.csv, then prints the fit of
each curve and the attested-minus-plain delta per size.
"""

import argparse
import logging
import sys
import time
from pathlib import Path

from confcore import bench
from confcore.bench import Kind, Scenario

EXPERIMENTS = {
    Kind.DB_CREATE: tuple(range(100, 1001, 100)),
    Kind.NF_REGISTRATION: tuple(range(20, 201, 20)),
    Kind.UE_REGISTRATION: tuple(range(10, 101, 10)),
}
QUICK = {k: v[::3] for k, v in EXPERIMENTS.items()}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--trials", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--kinds", default=",".join(k.value for k in EXPERIMENTS))
    ap.add_argument("--quick", action="store_true", help="every third size, for a smoke run")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sizes = QUICK if args.quick else EXPERIMENTS
    reports = []
    print(f"# {bench.HEADER_NOTE}")
    for name in args.kinds.split(","):
        kind = Kind(name.strip())
        t0 = time.perf_counter()
        plain, att = bench.run_both(Scenario(kind, sizes[kind], args.trials, seed=args.seed))
        reports += [plain, att]
        deltas = bench.compare(plain, att)
        bench.write_deltas(deltas, kind.value, out / f"delta_{kind.value}.csv")
        print(f"{kind.value}: {time.perf_counter() - t0:.1f} s")
        for rep in (plain, att):
            f = rep.linear_fit
            print(f"  {rep.scenario.mode:<8} slope {f.slope:.5f} ms/unit  intercept {f.intercept:.3f} ms  "
                  f"R2 {f.r_squared:.4f}")
        print("  delta   " + "  ".join(f"{d.size}:{d.abs_delta_ms:+.3f}" for d in deltas))
    bench.write_raw(reports, out / "raw.csv")
    bench.write_summary(reports, out / "summary.csv")
    print(f"wrote {out}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
