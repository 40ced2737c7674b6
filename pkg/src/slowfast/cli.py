"""Command-line entry point: ``slowfast {train,translate,eval,stats,gradcheck,flops}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigFileError, RunConfig, load_config
from .decoding import beam_search, bleu, flops_estimate
from .model import ConfigError, ModelConfig, SlowFastTransformer
from .segmentation import BpeModel, learn_bpe, read_corpus, segment, word_length_stats
from .training import Adam, MetricsWriter, collate, evaluate_loss, make_batches, make_examples, \
    batch_loss, train

log = logging.getLogger("slowfast")


def _read_pairs(data_dir: Path, split: str):
    src, tgt = data_dir / f"{split}.src", data_dir / f"{split}.tgt"
    if not src.exists() or not tgt.exists():
        return None
    s, t = read_corpus(src), read_corpus(tgt)
    if len(s) != len(t):
        raise ValueError(f"{src} and {tgt} have different line counts")
    return [(a, b) for a, b in zip(s, t) if a and b]


def cmd_train(config_path, data_dir, out_dir, seed: int | None = None, resume=None,
              steps: int | None = None) -> Path:
    run = load_config(config_path) if config_path else RunConfig()
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = _read_pairs(data_dir, "train")
    if not pairs:
        raise FileNotFoundError(f"{data_dir} needs train.src and train.tgt")
    tc = run.training
    if seed is not None:
        tc.seed = seed
    if resume:
        ck = load_checkpoint(resume)
        model, optim, bpe, tc = ck.model, ck.optim, ck.bpe, ck.train_cfg
    else:
        bpe = learn_bpe([p[0] for p in pairs] + [p[1] for p in pairs], run.data.bpe_merges)
        cfg = run.model_config(src_vocab=len(bpe.vocab), tgt_vocab=len(bpe.vocab),
                               char_vocab=len(bpe.char_vocab), max_positions=run.data.max_positions)
        model = SlowFastTransformer(cfg, seed=tc.seed)
        optim = Adam(model.params, tc.adam_beta1, tc.adam_beta2, tc.adam_eps)
    bpe.save(out_dir / "bpe.txt")
    examples = make_examples(pairs, bpe, model.cfg.max_positions)
    batches = make_batches(examples, model.cfg, tc.max_tokens, tc.seed)
    total = steps if steps is not None else tc.max_steps - optim.t
    metrics = MetricsWriter(out_dir / "metrics.csv")
    started = time.time()

    def on_step(step, loss):
        if tc.checkpoint_every and step % tc.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint_{step}.bin", model, optim, tc, bpe)
        if step % 100 == 0:
            log.info("step %d loss %.4f (%.1fs)", step, loss, time.time() - started)

    try:
        train(model, optim, batches, tc, max(total, 0), metrics, on_step)
    finally:
        metrics.close()
    final = out_dir / "checkpoint.bin"
    save_checkpoint(final, model, optim, tc, bpe)
    dev = _read_pairs(data_dir, "dev")
    if dev:
        dev_batches = make_batches(make_examples(dev, bpe, model.cfg.max_positions), model.cfg,
                                   tc.max_tokens, 0)
        print(f"dev_loss {evaluate_loss(model, dev_batches):.4f}")
    return final


def cmd_translate(ckpt, src_file, beam: int = 4, lenpen: float = 0.6, out=None) -> list[str]:
    ck = load_checkpoint(ckpt)
    if ck.bpe is None:
        raise CheckpointError(f"{ckpt}: checkpoint carries no BPE model")
    lines = []
    for words in read_corpus(src_file):
        if not words:
            lines.append("")
            continue
        hyp = beam_search(segment(words, ck.bpe), ck.model, beam, lenpen)
        lines.append(" ".join(ck.bpe.decode(hyp.tokens)))
    text = "\n".join(lines) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return lines


def cmd_eval(hyp_file, ref_file) -> float:
    score = bleu(read_corpus(hyp_file), read_corpus(ref_file))
    print(f"{score:.2f}")
    return score


def cmd_stats(corpus_file, out_dir, bpe_merges: int = 0, ckpt=None):
    corpus = read_corpus(corpus_file)
    if ckpt:
        bpe = load_checkpoint(ckpt).bpe
    elif bpe_merges:
        bpe = learn_bpe(corpus, bpe_merges)
    else:
        bpe = None
    stats = word_length_stats(corpus, bpe)
    stats.write_csv(out_dir)
    print(f"words {stats.n_words} frac_over_5_chars {stats.frac_over_5_chars:.4f}")
    return stats


GRADCHECK_PROFILE = dict(hidden_slow=16, hidden_fast=8, heads_slow=2, heads_fast=2, layers=2,
                         decoder_layers=2, fusion_variant="cga", cga_bidirectional=True,
                         relpos_mode="boundary", fast_gcn="boundary", slow_gcn=True)

_GRADCHECK_TEXT = [
    ("good - news travels faster", "news good - faster travels"),
    ("the lower house", "house lower the"),
    ("newer laws", "laws newer"),
]


def run_gradcheck(model_overrides: dict | None = None, seed: int = 0, samples_per_leaf: int = 3) -> float:
    """Max relative error of backprop vs central differences on a tiny batch (64-bit)."""
    pairs = [(a.split(), b.split()) for a, b in _GRADCHECK_TEXT]
    bpe = learn_bpe([p[0] for p in pairs], 12)
    settings = {**GRADCHECK_PROFILE, **(model_overrides or {})}
    settings.update(src_vocab=len(bpe.vocab), tgt_vocab=len(bpe.vocab), char_vocab=len(bpe.char_vocab))
    cfg = ModelConfig(**settings)
    with nx.precision(64):
        model = SlowFastTransformer(cfg, seed=seed)
        batch = collate(make_examples(pairs, bpe), cfg, np.float64)
        leaves = [t for _, t in model.params]
        return nx.grad_check(lambda: batch_loss(model, batch, 0.1, False), leaves,
                             samples_per_leaf=samples_per_leaf, rng=nx.Rng(seed, 7))


def cmd_gradcheck(config_path=None, seed: int = 0, tol: float = 1e-4) -> bool:
    overrides = load_config(config_path).model if config_path else {}
    started = time.time()
    err = run_gradcheck(overrides, seed)
    ok = err < tol
    print(f"max_rel_error {err:.3e} ({'ok' if ok else 'FAIL'}, tol {tol:g}, {time.time() - started:.1f}s)")
    return ok


def cmd_flops(config_path, L_s: int, L_f: int, T: int, out=None, tgt_vocab: int | None = None) -> dict:
    run = load_config(config_path) if config_path else RunConfig()
    vocab = tgt_vocab or run.model.get("tgt_vocab") or 32000
    cfg = run.model_config(tgt_vocab=vocab)
    est = flops_estimate(cfg, L_s, L_f, T)
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["component", "flops"])
        for k, v in est.items():
            w.writerow([k, v])
    finally:
        if out:
            fh.close()
    return est


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slowfast", description=__doc__)
    ap.add_argument("--seed", type=int, default=None)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on DATA/train.{src,tgt}")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", help="resume from this checkpoint")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("translate", help="beam-search translate a source file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--lenpen", type=float, default=0.6)
    p.add_argument("--out")

    p = sub.add_parser("eval", help="corpus BLEU of hypotheses against references")
    p.add_argument("hyp")
    p.add_argument("ref")

    p = sub.add_parser("stats", help="word-length histograms")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bpe-merges", type=int, default=0)
    p.add_argument("--ckpt")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--config")

    p = sub.add_parser("flops", help="analytic forward FLOPs per sentence")
    p.add_argument("--config")
    p.add_argument("--ls", type=int, required=True)
    p.add_argument("--lf", type=int, required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--tgt-vocab", type=int)
    p.add_argument("--out")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        if args.command == "train":
            cmd_train(args.config, args.data, args.out, args.seed, args.ckpt, args.steps)
        elif args.command == "translate":
            cmd_translate(args.ckpt, args.src, args.beam, args.lenpen, args.out)
        elif args.command == "eval":
            cmd_eval(args.hyp, args.ref)
        elif args.command == "stats":
            cmd_stats(args.corpus, args.out, args.bpe_merges, args.ckpt)
        elif args.command == "gradcheck":
            return 0 if cmd_gradcheck(args.config, args.seed or 0) else 1
        elif args.command == "flops":
            cmd_flops(args.config, args.ls, args.lf, args.t, args.out, args.tgt_vocab)
    except (ConfigFileError, ConfigError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
