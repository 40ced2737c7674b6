"""Write the synthetic corpora as train/dev text files for ``slowfast train``."""

import argparse
from pathlib import Path

from slowfast.synthetic import copy_corpus, reversal_morphology_corpus


def write(pairs, out: Path, split: str):
    (out / f"{split}.src").write_text("".join(" ".join(s) + "\n" for s, _ in pairs), encoding="utf-8")
    (out / f"{split}.tgt").write_text("".join(" ".join(t) + "\n" for _, t in pairs), encoding="utf-8")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("task", choices=["copy", "morphology"])
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.task == "copy":
        pairs = copy_corpus(50, seed=1)
        write(pairs, out, "train")
        write(pairs[:10], out, "dev")
    else:
        write(reversal_morphology_corpus(2000, seed=0, holdout=0.25), out, "train")
        write(reversal_morphology_corpus(200, seed=10_000, holdout=0.25, split="dev"), out, "dev")


if __name__ == "__main__":
    main()
