"""Compare fusion variants by dev loss on the morphology reversal task.

Writes one CSV row per (seed, variant) run.
"""

import argparse
import csv
import sys

from slowfast.experiments import fusion_benefit_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    ap.add_argument("--variants", nargs="+", default=["none", "cga"])
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--out", help="CSV path (default stdout)")
    args = ap.parse_args()
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(fh)
    w.writerow(["seed", "variant", "dev_loss", "seconds"])
    for seed in args.seeds:
        for variant in args.variants:
            r = fusion_benefit_run(variant, seed, steps=args.steps)
            w.writerow([seed, variant, f"{r.dev_loss:.6f}", f"{r.seconds:.1f}"])
            fh.flush()
    if args.out:
        fh.close()


if __name__ == "__main__":
    main()
