import csv
from pathlib import Path

import numpy as np
import pytest

from slowfast import numerics as nx
from slowfast.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from slowfast.cli import cmd_eval, cmd_flops, cmd_stats, cmd_train, cmd_translate, main, run_gradcheck
from slowfast.config import ConfigFileError, load_config, parse_config
from slowfast.decoding import beam_search_core, flops_estimate
from slowfast.model import ModelConfig, SlowFastTransformer, prepare_source, reference_transformer_logits
from slowfast.segmentation import BOS, PAD, UNK, learn_bpe, segment
from slowfast.synthetic import copy_corpus
from slowfast.training import Adam, TrainConfig

from conftest import SENTENCES, tiny_model

TINY_TOML = """\
[model]
hidden_slow = 16
hidden_fast = 8
heads_slow = 2
heads_fast = 2
fusion_variant = "{variant}"
dropout = 0.1

[training]
peak_lr = 0.003
warmup_steps = 20
max_tokens = 200
max_steps = {steps}
seed = 3

[data]
bpe_merges = 40
"""


def write_lines(path, lines):
    path.write_text("\n".join(" ".join(w) for w in lines) + "\n", encoding="utf-8")


@pytest.fixture()
def copy_data(tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    pairs = copy_corpus(20, vocab=12, min_len=2, max_len=5, seed=2)
    write_lines(data / "train.src", [p[0] for p in pairs])
    write_lines(data / "train.tgt", [p[1] for p in pairs])
    write_lines(data / "dev.src", [p[0] for p in pairs[:4]])
    write_lines(data / "dev.tgt", [p[1] for p in pairs[:4]])
    return data, pairs


def config_file(tmp_path, variant="cga", steps=12, name="run.toml"):
    path = tmp_path / name
    path.write_text(TINY_TOML.format(variant=variant, steps=steps))
    return path


# ---------------------------------------------------------------- config


def test_config_parses_sections():
    run = parse_config(TINY_TOML.format(variant="ds_sum", steps=5))
    assert run.model["fusion_variant"] == "ds_sum" and run.training.max_steps == 5
    assert run.data.bpe_merges == 40
    assert isinstance(run.training.peak_lr, float)


def test_config_unknown_key_has_line_number():
    with pytest.raises(ConfigFileError, match=r"bad.toml:3: unknown key model.hiden_slow"):
        parse_config("[model]\nhidden_fast = 8\nhiden_slow = 16\n", "bad.toml")


def test_config_unknown_section():
    with pytest.raises(ConfigFileError, match=r":2: .*'optim'"):
        parse_config("\n[optim]\nlr = 1\n", "x")


def test_config_type_mismatch():
    with pytest.raises(ConfigFileError, match=r":2: training.max_steps expects int, got str"):
        parse_config("[training]\nmax_steps = \"ten\"\n")
    with pytest.raises(ConfigFileError, match="expects bool"):
        parse_config("[model]\nslow_gcn = 1\n")


def test_config_invalid_values():
    with pytest.raises(ConfigFileError, match="fusion_variant"):
        parse_config("[model]\nfusion_variant = \"cross\"\n")
    with pytest.raises(ConfigFileError, match="warmup_steps"):
        parse_config("[training]\nwarmup_steps = 0\n")
    with pytest.raises(ConfigFileError):
        parse_config("[model\n")


def test_every_ablation_axis_is_a_config_key():
    text = "\n".join([
        "[model]", "hidden_fast = 32", 'fusion_variant = "linear_attention"', 'interaction_mode = "gated_both"',
        "cga_bidirectional = false", 'relpos_mode = "vanilla"', "fusion_layer_mask = [true, false]",
        'fast_input = "subword"', 'fast_gcn = "random"',
    ])
    m = parse_config(text).model_config(src_vocab=10, tgt_vocab=10, char_vocab=10)
    assert (m.hidden_fast, m.fusion_variant, m.interaction_mode, m.relpos_mode, m.fast_input) == \
        (32, "linear_attention", "gated_both", "vanilla", "subword")
    assert m.fusion_layer_mask == [True, False] and not m.cga_bidirectional


def test_main_reports_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nhiden_slow = 16\n")
    assert main(["flops", "--config", str(bad), "--ls", "2", "--lf", "4", "--t", "2"]) == 2
    assert "bad.toml:2: unknown key model.hiden_slow" in capsys.readouterr().err


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(bpe, tmp_path):
    model = tiny_model(bpe, seed=4, bits=32)
    opt = Adam(model.params)
    opt.t = 7
    opt.m[:] = np.arange(opt.m.size, dtype=np.float32)
    tc = TrainConfig(seed=9)
    save_checkpoint(tmp_path / "c.bin", model, opt, tc, bpe)
    ck = load_checkpoint(tmp_path / "c.bin")
    assert ck.model.cfg == model.cfg and ck.train_cfg == tc and ck.step == 7
    assert np.array_equal(ck.model.params.flat, model.params.flat)
    assert ck.model.params.flat.tobytes() == model.params.flat.tobytes()
    assert np.array_equal(ck.optim.m, opt.m) and np.array_equal(ck.optim.v, opt.v)
    assert ck.bpe.vocab == bpe.vocab and ck.bpe.merges == bpe.merges


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "x.bin")


def test_checkpoint_rejects_vocab_mismatch(bpe, tmp_path):
    model = tiny_model(bpe, bits=32)
    other = learn_bpe([["completely", "different", "words"]], 30)
    save_checkpoint(tmp_path / "c.bin", model, None, TrainConfig(), other)
    with pytest.raises(CheckpointError, match="vocabulary size"):
        load_checkpoint(tmp_path / "c.bin")


def test_checkpoint_rejects_shape_mismatch(bpe, tmp_path):
    model = tiny_model(bpe, bits=32)
    save_checkpoint(tmp_path / "c.bin", model, None, TrainConfig(), bpe)
    raw = bytearray((tmp_path / "c.bin").read_bytes())
    # bump the stored hidden_fast so the tensors no longer fit the config
    raw = raw.replace(b'"hidden_fast": 8', b'"hidden_fast": 4')
    (tmp_path / "d.bin").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="do not match"):
        load_checkpoint(tmp_path / "d.bin")


def test_resume_is_bitwise(tmp_path, copy_data):
    data, _ = copy_data
    cfg = config_file(tmp_path, steps=16)
    straight = cmd_train(cfg, data, tmp_path / "a")
    half = cmd_train(cfg, data, tmp_path / "b", steps=8)
    resumed = cmd_train(cfg, data, tmp_path / "c", resume=half, steps=8)
    a, c = load_checkpoint(straight), load_checkpoint(resumed)
    assert a.step == c.step == 16
    assert a.model.params.flat.tobytes() == c.model.params.flat.tobytes()
    assert a.optim.m.tobytes() == c.optim.m.tobytes()


# ---------------------------------------------------------------- subcommands


def test_eval_identity_prints_100(tmp_path, capsys):
    f = tmp_path / "ref.txt"
    write_lines(f, SENTENCES)
    assert cmd_eval(f, f) == 100.0
    assert capsys.readouterr().out.strip() == "100.00"


def test_gradcheck_profile():
    assert run_gradcheck(samples_per_leaf=1) < 1e-4


def test_main_gradcheck_exit_code(capsys):
    assert main(["gradcheck"]) == 0
    assert "max_rel_error" in capsys.readouterr().out


def _reference_translate(ck, words, beam, alpha):
    """Beam search scored by the single-branch reference network."""
    src = prepare_source([segment(words, ck.bpe)], ck.model.cfg, ck.model.dtype)

    def score(prefixes):
        n = len(prefixes)
        rep = type(src)(**{k: (np.repeat(v, n, axis=0) if isinstance(v, np.ndarray) else v)
                           for k, v in vars(src).items()})
        tgt = np.array([[BOS] + p for p in prefixes], dtype=np.int64)
        with nx.no_grad():
            logits = reference_transformer_logits(ck.model.params, ck.model.cfg, rep, tgt).data[:, -1]
        z = logits.astype(np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    max_len = min(ck.model.cfg.max_positions - 1, 2 * len(segment(words, ck.bpe).subwords) + 10)
    hyp = beam_search_core(score, beam, alpha, max_len, banned=(PAD, BOS, UNK))
    return " ".join(ck.bpe.decode(hyp.tokens))


def test_train_translate_matches_reference(tmp_path, copy_data):
    data, pairs = copy_data
    ckpt = cmd_train(config_file(tmp_path, variant="none", steps=30), data, tmp_path / "run")
    ck = load_checkpoint(ckpt)
    src = tmp_path / "in.txt"
    write_lines(src, [p[0] for p in pairs[:5]])
    lines = cmd_translate(ckpt, src, beam=3, lenpen=0.6, out=tmp_path / "out.txt")
    assert (tmp_path / "out.txt").read_text().splitlines() == lines
    assert lines == [_reference_translate(ck, p[0], 3, 0.6) for p in pairs[:5]]


def test_train_writes_artifacts(tmp_path, copy_data, capsys):
    data, _ = copy_data
    cmd_train(config_file(tmp_path, steps=5), data, tmp_path / "run")
    out = tmp_path / "run"
    assert (out / "bpe.txt").exists() and (out / "checkpoint.bin").exists()
    rows = list(csv.reader(open(out / "metrics.csv")))
    assert rows[0] == ["step", "lr", "loss", "tokens_per_step"] and len(rows) == 6
    assert capsys.readouterr().out.startswith("dev_loss ")


def test_train_missing_data(tmp_path):
    with pytest.raises(FileNotFoundError):
        cmd_train(None, tmp_path, tmp_path / "out")


def test_flops_csv(tmp_path):
    cfg = config_file(tmp_path)
    est = cmd_flops(cfg, 5, 12, 6, out=tmp_path / "f.csv", tgt_vocab=50)
    rows = list(csv.reader(open(tmp_path / "f.csv")))
    assert rows[0] == ["component", "flops"]
    assert {r[0]: int(r[1]) for r in rows[1:]} == est
    m = ModelConfig(hidden_slow=16, hidden_fast=8, heads_slow=2, heads_fast=2, fusion_variant="cga",
                    dropout=0.1, tgt_vocab=50)
    assert est == flops_estimate(m, 5, 12, 6)


def test_stats_csv(tmp_path, capsys):
    corpus = tmp_path / "c.txt"
    write_lines(corpus, SENTENCES)
    stats = cmd_stats(corpus, tmp_path / "stats", bpe_merges=10)
    assert (tmp_path / "stats" / "char_lengths.csv").exists()
    assert (tmp_path / "stats" / "subword_lengths.csv").exists()
    assert stats.n_words == sum(len(s) for s in SENTENCES)
    assert "frac_over_5_chars" in capsys.readouterr().out


def test_main_translate_and_eval(tmp_path, copy_data, capsys):
    data, pairs = copy_data
    cfg = config_file(tmp_path, steps=3)
    assert main(["--seed", "5", "train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "r")]) == 0
    assert load_checkpoint(tmp_path / "r" / "checkpoint.bin").train_cfg.seed == 5
    src = tmp_path / "in.txt"
    write_lines(src, [p[0] for p in pairs[:2]])
    hyp = tmp_path / "hyp.txt"
    assert main(["translate", "--ckpt", str(tmp_path / "r" / "checkpoint.bin"), "--src", str(src),
                 "--beam", "2", "--lenpen", "1.0", "--out", str(hyp)]) == 0
    assert len(hyp.read_text().splitlines()) == 2
    assert main(["eval", str(hyp), str(hyp)]) == 0
    assert capsys.readouterr().out.strip().endswith("100.00")


def test_main_bad_checkpoint(tmp_path, capsys):
    bad = tmp_path / "c.bin"
    bad.write_bytes(b"xx")
    src = tmp_path / "s.txt"
    src.write_text("a b\n")
    assert main(["translate", "--ckpt", str(bad), "--src", str(src)]) == 2
    assert "not a checkpoint" in capsys.readouterr().err


@pytest.mark.parametrize("name", ["desk.toml", "baseline.toml"])
def test_shipped_configs_parse(name):
    run = load_config(Path(__file__).parent.parent / "configs" / name)
    m = run.model_config(src_vocab=10, tgt_vocab=10, char_vocab=10)
    assert m.hidden_slow == 64 and m.fusion_variant == ("cga" if name == "desk.toml" else "none")
