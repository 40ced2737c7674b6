"""Forward FLOPs per sentence for each fusion variant at a fixed length profile."""

import argparse

from slowfast.decoding import FLOP_COMPONENTS, flops_estimate
from slowfast.model import ModelConfig
from slowfast.training import BASE_PROFILE


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ls", type=int, default=30, help="source subwords")
    ap.add_argument("--lf", type=int, default=120, help="source characters")
    ap.add_argument("--t", type=int, default=30, help="target length")
    ap.add_argument("--vocab", type=int, default=32000)
    args = ap.parse_args()
    cols = list(FLOP_COMPONENTS) + ["total"]
    print("variant," + ",".join(cols))
    for variant in ["none", "cga", "linear_attention", "ds_concat", "ds_sum"]:
        cfg = ModelConfig(**BASE_PROFILE["model"], fusion_variant=variant, tgt_vocab=args.vocab)
        est = flops_estimate(cfg, args.ls, args.lf, args.t)
        print(variant + "," + ",".join(str(est[c]) for c in cols))


if __name__ == "__main__":
    main()
