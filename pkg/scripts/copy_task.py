"""Train the desk profile on the 50-pair copy corpus and report convergence."""

import argparse

from slowfast.experiments import copy_task


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--max-steps", type=int, default=2000)
    ap.add_argument("--fusion", default="cga", help="fusion_variant for the run")
    args = ap.parse_args()
    r = copy_task(max_steps=args.max_steps, seed=args.seed, fusion_variant=args.fusion)
    print(f"steps {r.steps} accuracy {r.accuracy:.4f} bleu {r.bleu:.2f} seconds {r.seconds:.0f}")
    print(f"loss first {r.losses[0]:.3f} last {r.losses[-1]:.3f}")


if __name__ == "__main__":
    main()
