import math

import numpy as np
import pytest

from slowfast import numerics as nx
from slowfast.model import (
    AttentionParams, CgaParams, ConfigError, FfnParams, GcnParams, ModelConfig, RelPos, SlowFastTransformer,
    cross_granularity_attention, ffn, gcn_layer, init_parameters, parameter_shapes, prepare_source,
    reference_transformer_logits, self_attention,
)
from slowfast.numerics import Tensor
from slowfast.segmentation import PAD, segment, vanilla_relative_indices

from conftest import SENTENCES, random_targets, source_batch, tiny_config, tiny_model


def T64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def rand(rng, *shape):
    return T64(rng.normal(size=shape))


# ---------------------------------------------------------------- self attention


def attention_oracle(x, wq, wk, wv, wo, heads, mask=None, rel=None, table=None):
    """Per-head explicit loops."""
    L, H = x.shape
    dk = H // heads
    out = np.zeros((L, H))
    q, k, v = x @ wq, x @ wk, x @ wv
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        for i in range(L):
            logits = np.array([q[i, sl] @ k[j, sl] + (q[i, sl] @ table[rel[i, j]] if rel is not None else 0.0)
                               for j in range(L)]) / math.sqrt(dk)
            if mask is not None:
                logits = np.where(mask, logits, -np.inf)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[i, sl] = sum(w[j] * v[j, sl] for j in range(L))
    return out @ wo


def test_self_attention_single_key():
    rng = np.random.default_rng(0)
    x = rand(rng, 1, 8)
    a = AttentionParams(*(rand(rng, 8, 8) for _ in range(4)))
    out = self_attention(x, a, 2).data
    assert np.allclose(out, x.data @ a.wv.data @ a.wo.data)


def test_self_attention_uniform_weights_over_unmasked_keys():
    rng = np.random.default_rng(1)
    x = rand(rng, 5, 4)
    a = AttentionParams(T64(np.zeros((4, 4))), rand(rng, 4, 4), rand(rng, 4, 4), T64(np.eye(4)))
    mask = np.array([True, False, True, True, False])
    out = self_attention(x, a, 2, key_mask=mask).data
    expect = (x.data @ a.wv.data)[mask].mean(0)
    assert np.allclose(out, np.broadcast_to(expect, out.shape))


def test_self_attention_matches_loop_oracle():
    rng = np.random.default_rng(2)
    x = rand(rng, 3, 8)
    w = [rand(rng, 8, 8) for _ in range(4)]
    out = self_attention(x, AttentionParams(*w), 2).data
    assert np.abs(out - attention_oracle(x.data, *(t.data for t in w), 2)).max() < 1e-6


def test_self_attention_relpos_matches_loop_oracle():
    rng = np.random.default_rng(3)
    L, H, heads, k = 6, 8, 2, 2
    x = rand(rng, L, H)
    w = [rand(rng, H, H) for _ in range(4)]
    table = np.concatenate([rng.normal(size=(2 * k + 1, H // heads)), np.zeros((1, H // heads))])
    rows = vanilla_relative_indices(L, k).embedding_rows()
    rel = RelPos(T64(table), rows[None, None])
    out = self_attention(x, AttentionParams(*w), heads, relpos=rel).data
    oracle = attention_oracle(x.data, *(t.data for t in w), heads, rel=rows, table=table)
    assert np.abs(out - oracle).max() < 1e-6


def test_self_attention_degenerate_mask():
    rng = np.random.default_rng(4)
    a = AttentionParams(*(rand(rng, 4, 4) for _ in range(4)))
    with pytest.raises(nx.DegenerateError):
        self_attention(rand(rng, 3, 4), a, 2, key_mask=np.zeros(3, bool))


# ---------------------------------------------------------------- gcn


def test_gcn_edgeless_identity():
    x = T64(np.random.default_rng(5).normal(size=(3, 4)))
    out = gcn_layer(x, np.eye(3), GcnParams(T64(np.eye(4)), activation="identity"))
    assert np.array_equal(out.data, x.data)


def test_gcn_two_node_average():
    x = T64([[1.0, 2.0], [3.0, -4.0]])
    out = gcn_layer(x, np.full((2, 2), 0.5), GcnParams(T64(np.eye(2)), activation="identity")).data
    assert np.allclose(out, [[2.0, -1.0], [2.0, -1.0]])


def test_gcn_dense_oracle():
    rng = np.random.default_rng(6)
    x, w = rand(rng, 5, 4), rand(rng, 4, 4)
    N = rng.random((5, 5))
    out = gcn_layer(x, N, GcnParams(w)).data
    assert np.abs(out - np.maximum(N @ x.data @ w.data, 0)).max() < 1e-6


def test_gcn_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        gcn_layer(T64(np.ones((3, 2))), np.eye(4), GcnParams(T64(np.eye(2))))


# ---------------------------------------------------------------- cross-granularity attention


def cga_params(rng, h_dst, h_src, zero_v=False):
    wv = np.zeros((h_src, h_dst)) if zero_v else rng.normal(size=(h_src, h_dst))
    return CgaParams("fast_to_slow", T64(np.ones(h_src)), T64(np.zeros(h_src)), rand(rng, h_dst, h_dst),
                     rand(rng, h_src, h_dst), T64(wv), rand(rng, h_dst, h_dst))


def test_cga_zero_value_projection():
    rng = np.random.default_rng(7)
    out = cross_granularity_attention(rand(rng, 4, 8), rand(rng, 6, 4), cga_params(rng, 8, 4, zero_v=True), 2)
    assert np.all(out.data == 0.0)


def test_cga_single_source_broadcast():
    rng = np.random.default_rng(8)
    p = cga_params(rng, 8, 4)
    src = rand(rng, 1, 4)
    out = cross_granularity_attention(rand(rng, 5, 8), src, p, 2).data
    x_hat = nx.layer_norm(src, p.ln_gamma, p.ln_beta).data
    assert np.allclose(out, np.broadcast_to(x_hat @ p.wv.data @ p.wo.data, (5, 8)))


def test_cga_reduces_to_self_attention():
    rng = np.random.default_rng(9)
    x = rand(rng, 5, 8)
    p = cga_params(rng, 8, 8)
    out = cross_granularity_attention(x, x, p, 2).data
    x_hat = nx.layer_norm(x, p.ln_gamma, p.ln_beta)
    from slowfast.model import multi_head_attention
    ref = multi_head_attention(x, x_hat, p.wq, p.wk, p.wv, p.wo, 2).data
    assert np.abs(out - ref).max() < 1e-6


@pytest.mark.parametrize("hs,hf", [(64, 16), (64, 32), (128, 64)])
def test_cga_shape_bridging(bpe, hs, hf):
    model = tiny_model(bpe, hidden_slow=hs, hidden_fast=hf, heads_slow=4, heads_fast=2, layers=1)
    shapes = parameter_shapes(model.cfg)
    assert shapes["enc.fast.0.cga.wk"] == (hs, hf) and shapes["enc.slow.0.cga.wk"] == (hf, hs)
    src = source_batch(bpe, model)
    xs = Tensor(np.random.default_rng(0).normal(size=src.slow_ids.shape + (hs,)))
    xf = Tensor(np.random.default_rng(1).normal(size=src.fast_ids.shape + (hf,)))
    inc_s, inc_f = model.fusion_variant_apply(0, xs, xf, src, nx_drop())
    assert inc_s.shape[-1] == hs and inc_f.shape[-1] == hf


def nx_drop():
    from slowfast.model import NO_DROP
    return NO_DROP


# ---------------------------------------------------------------- ffn


def test_ffn_examples():
    z = FfnParams(T64(np.zeros((3, 5))), T64(np.zeros(5)), T64(np.ones((5, 3))), T64(np.zeros(3)))
    assert np.all(ffn(T64(np.ones((2, 3))), z).data == 0.0)
    p = FfnParams(T64([[1.0]]), T64([-3.0]), T64([[5.0]]), T64([1.0]))
    assert ffn(T64([[2.0]]), p).data.tolist() == [[1.0]]
    b2 = np.array([0.5, -2.0])
    neg = FfnParams(T64(-np.ones((2, 4))), T64(-np.ones(4)), T64(np.ones((4, 2))), T64(b2))
    assert np.array_equal(ffn(T64(np.ones((3, 2))), neg).data, np.broadcast_to(b2, (3, 2)))


# ---------------------------------------------------------------- config


@pytest.mark.parametrize("bad", [
    dict(hidden_slow=10, heads_slow=4), dict(hidden_fast=32, hidden_slow=16), dict(fusion_variant="x"),
    dict(interaction_mode="both"), dict(relpos_mode="abs"), dict(fusion_layer_mask=[True]), dict(dropout=1.0),
    dict(k=0), dict(fast_input="byte"),
])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**{"src_vocab": 10, "tgt_vocab": 10, "char_vocab": 10, **bad})


def test_fast_mode_has_projection(bpe):
    assert parameter_shapes(tiny_config(bpe, interaction_mode="fast"))["inter.up"] == (8, 16)


def test_shared_parameters_initialize_identically(bpe):
    a = init_parameters(tiny_config(bpe), seed=3)
    b = init_parameters(tiny_config(bpe, fusion_variant="none"), seed=3)
    for name in b.names:
        assert np.array_equal(a[name].data, b[name].data), name


# ---------------------------------------------------------------- encoder block semantics


def _encode(model, src):
    with nx.no_grad():
        return model.encode(src)


def test_slow_only_matches_reference(bpe):
    model = tiny_model(bpe, fusion_variant="none")
    src = source_batch(bpe, model)
    tgt = random_targets(np.random.default_rng(0), src.size, len(bpe.vocab))
    a = model.forward(src, tgt).data
    b = reference_transformer_logits(model.params, model.cfg, src, tgt).data
    assert np.array_equal(a, b)


def test_unidirectional_cga_updates_one_branch(bpe):
    for direction, (slow_changes, fast_changes) in [("fast_to_slow", (True, False)), ("slow_to_fast", (False, True))]:
        uni = tiny_model(bpe, cga_bidirectional=False, cga_direction=direction)
        # with fusion off the fast branch only runs when the decoder reads it
        none = tiny_model(bpe, fusion_variant="none", interaction_mode="gated_both")
        src = source_batch(bpe, uni)
        shapes = parameter_shapes(uni.cfg)
        assert ("enc.slow.0.cga.wq" in shapes) == slow_changes
        assert ("enc.fast.0.cga.wq" in shapes) == fast_changes
        ref = source_batch(bpe, none)
        eu, en = _encode(uni, src), _encode(none, ref)
        assert (not np.allclose(eu.slow.data, en.slow.data)) == slow_changes
        assert (not np.allclose(eu.fast.data, en.fast.data)) == fast_changes


def test_fusion_mask_skips_early_blocks(bpe):
    masked = tiny_model(bpe, layers=3, fusion_layer_mask=[False, False, True])
    plain = tiny_model(bpe, layers=3, fusion_variant="none", interaction_mode="gated_both")
    src = source_batch(bpe, masked)
    with nx.no_grad():
        def run_blocks(model, upto):
            xs = model.input_gcn(model.embed("emb.src", src.slow_ids, nx_drop()), src.slow_adj, "enc.slow.gcn", nx_drop())
            xf = model.input_gcn(model.embed("emb.fast", src.fast_ids, nx_drop()), src.fast_adj, "enc.fast.gcn", nx_drop())
            rp = model.relpos(src)
            for layer in range(upto):
                xs, xf = model.encoder_block(layer, xs, xf, src, rp, nx_drop())
            return xs.data, xf.data

        a, b = run_blocks(masked, 2), run_blocks(plain, 2)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        a, b = run_blocks(masked, 3), run_blocks(plain, 3)
        assert not np.allclose(a[0], b[0])


# ---------------------------------------------------------------- fusion variants


def test_ds_sum_zero_projection_is_identity(bpe):
    model = tiny_model(bpe, fusion_variant="ds_sum", layers=1)
    src = source_batch(bpe, model)
    model.params["enc.slow.0.ds.proj"].data[...] = 0.0
    rng = np.random.default_rng(0)
    xs = Tensor(rng.normal(size=src.slow_ids.shape + (16,)))
    xf = Tensor(rng.normal(size=src.fast_ids.shape + (8,)))
    inc_s, inc_f = model.fusion_variant_apply(0, xs, xf, src, nx_drop())
    assert inc_f is None and np.all(inc_s.data == 0.0)


def test_ds_pooling_of_equal_vectors(bpe):
    cfg = tiny_config(bpe, fusion_variant="ds_sum")
    src = prepare_source([segment(s, bpe) for s in SENTENCES], cfg, np.float64)
    s = segment(SENTENCES[0], bpe)
    v = np.random.default_rng(1).normal(size=4)
    feats = np.zeros((len(s.chars), 4))
    for c, w in enumerate(s.char2word):
        feats[c] = v * (w + 1)
    pooled = src.pool[0, : len(s.subwords), : len(s.chars)] @ feats
    for i, w in enumerate(s.sub2word):
        assert np.allclose(pooled[i], v * (w + 1))


def test_ds_concat_width(bpe):
    model = tiny_model(bpe, fusion_variant="ds_concat", layers=1)
    assert parameter_shapes(model.cfg)["enc.slow.0.ds.wc"] == (32, 16)
    src = source_batch(bpe, model)
    xs = Tensor(np.ones(src.slow_ids.shape + (16,)))
    xf = Tensor(np.ones(src.fast_ids.shape + (8,)))
    inc_s, _ = model.fusion_variant_apply(0, xs, xf, src, nx_drop())
    assert inc_s.shape == xs.shape


@pytest.mark.parametrize("variant", ["cga", "linear_attention", "ds_concat", "ds_sum", "none"])
@pytest.mark.parametrize("mode", ["slow", "fast", "gated_both"])
def test_every_variant_and_mode_runs(bpe, variant, mode):
    model = tiny_model(bpe, fusion_variant=variant, interaction_mode=mode)
    src = source_batch(bpe, model)
    tgt = random_targets(np.random.default_rng(1), src.size, len(bpe.vocab))
    assert model.forward(src, tgt).shape == (src.size, 5, len(bpe.vocab))


# ---------------------------------------------------------------- encode


def test_padding_extension_leaves_rows_unchanged(bpe):
    model = tiny_model(bpe)
    a = _encode(model, source_batch(bpe, model))
    src2 = source_batch(bpe, model, pad_to=(20, 40))
    b = _encode(model, src2)
    Ls, Lf = a.slow.shape[1], a.fast.shape[1]
    keep_s = src2.slow_mask[:, :Ls]
    keep_f = src2.fast_mask[:, :Lf]
    assert np.abs(a.slow.data[keep_s] - b.slow.data[:, :Ls][keep_s]).max() < 1e-5
    assert np.abs(a.fast.data[keep_f] - b.fast.data[:, :Lf][keep_f]).max() < 1e-5


@pytest.mark.parametrize("hf", [16, 32, 64, 128, 256])
def test_width_sweep_shapes(bpe, hf):
    model = tiny_model(bpe, bits=32, hidden_slow=256, heads_slow=4, hidden_fast=hf, heads_fast=4, layers=1,
                       decoder_layers=1)
    src = source_batch(bpe, model)
    enc = _encode(model, src)
    assert enc.slow.shape == src.slow_ids.shape + (256,)
    assert enc.fast.shape == src.fast_ids.shape + (hf,)


def test_subword_fast_input(bpe):
    model = tiny_model(bpe, fast_input="subword")
    src = source_batch(bpe, model)
    assert np.array_equal(src.fast_ids, src.slow_ids)
    assert parameter_shapes(model.cfg)["emb.fast"] == (len(bpe.vocab), 8)


def test_random_fast_gcn_changes_structure(bpe):
    cfg_b, cfg_r = tiny_config(bpe), tiny_config(bpe, fast_gcn="random")
    sents = [segment(s, bpe) for s in SENTENCES]
    a = prepare_source(sents, cfg_b, np.float64).fast_adj
    b = prepare_source(sents, cfg_r, np.float64).fast_adj
    assert not np.array_equal(a, b)
    assert np.array_equal(b, prepare_source(sents, cfg_r, np.float64).fast_adj)


# ---------------------------------------------------------------- interaction and decoder


def test_slow_memory_is_slow_output(bpe):
    model = tiny_model(bpe)
    src = source_batch(bpe, model)
    enc = _encode(model, src)
    assert model.encdec_interaction(enc, src).states is enc.slow


def test_fast_memory_shape(bpe):
    model = tiny_model(bpe, interaction_mode="fast")
    src = source_batch(bpe, model)
    mem = model.encdec_interaction(_encode(model, src), src)
    assert mem.states.shape == src.fast_ids.shape + (16,)


def test_saturated_gate_equals_slow_mode(bpe):
    gated = tiny_model(bpe, interaction_mode="gated_both")
    slow = tiny_model(bpe)
    for l in range(2):
        gated.params[f"dec.{l}.gate.w"].data[...] = 0.0
        gated.params[f"dec.{l}.gate.b"].data[...] = 1e4
    src = source_batch(bpe, gated)
    tgt = random_targets(np.random.default_rng(2), src.size, len(bpe.vocab))
    with nx.no_grad():
        a = gated.forward(src, tgt).data
        b = slow.forward(source_batch(bpe, slow), tgt).data
    assert np.array_equal(a, b)


def test_decoder_bos_only_shape(bpe):
    model = tiny_model(bpe)
    src = source_batch(bpe, model, SENTENCES[:1])
    assert model.forward(src, np.array([[1]])).shape == (1, 1, len(bpe.vocab))


def test_decoder_causality(bpe):
    model = tiny_model(bpe)
    src = source_batch(bpe, model)
    tgt = random_targets(np.random.default_rng(3), src.size, len(bpe.vocab), T=6)
    base = model.forward(src, tgt).data
    for t in range(1, 6):
        alt = tgt.copy()
        alt[:, t] = 4 + (alt[:, t] - 3) % (len(bpe.vocab) - 4)
        out = model.forward(src, alt).data
        assert np.array_equal(out[:, :t], base[:, :t])
        assert not np.allclose(out[:, t:], base[:, t:])


def test_zero_memory_reduces_to_language_model(bpe):
    model = tiny_model(bpe)
    for l in range(2):
        model.params[f"dec.{l}.xattn.wv"].data[...] = 0.0
    src = source_batch(bpe, model)
    enc = _encode(model, src)
    tgt = random_targets(np.random.default_rng(4), src.size, len(bpe.vocab))
    mem = model.encdec_interaction(enc, src)
    a = model.decode_forward(tgt, mem).data
    mem.states = Tensor(np.zeros_like(mem.states.data))
    b = model.decode_forward(tgt, mem).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- invariants


def _zero_grad_params(model, bpe):
    src = source_batch(bpe, model)
    tgt = random_targets(np.random.default_rng(5), src.size, len(bpe.vocab), T=6)
    out = np.roll(tgt, -1, axis=1)
    out[:, -1] = 2
    nx.cross_entropy_label_smoothed(model.forward(src, tgt), out, PAD, 0.1).backward()
    return {name for name, t in model.params if not np.abs(t.grad).max() > 0}


def test_gradient_reaches_every_parameter(bpe):
    assert _zero_grad_params(tiny_model(bpe, interaction_mode="gated_both"), bpe) == set()


def test_slow_mode_dead_parameters(bpe):
    # the last fast block after the fusion snapshot feeds nothing the decoder reads
    dead = _zero_grad_params(tiny_model(bpe), bpe)
    assert dead and all(n.startswith(("enc.fast.1.cga.", "enc.fast.1.ffn", "enc.fast.final_ln")) for n in dead)


def test_zero_relpos_makes_modes_equal(bpe):
    boundary = tiny_model(bpe, relpos_mode="boundary")
    vanilla = tiny_model(bpe, relpos_mode="vanilla")
    for m in (boundary, vanilla):
        m.params["enc.fast.relpos"].data[...] = 0.0
    tgt = random_targets(np.random.default_rng(6), len(SENTENCES), len(bpe.vocab))
    a = boundary.forward(source_batch(bpe, boundary), tgt).data
    b = vanilla.forward(source_batch(bpe, vanilla), tgt).data
    assert np.array_equal(a, b)


def test_argmax_padding_invariance(bpe):
    model = tiny_model(bpe, bits=32)
    tgt = random_targets(np.random.default_rng(7), len(SENTENCES), len(bpe.vocab))
    with nx.no_grad():
        a = model.forward(source_batch(bpe, model), tgt).data.argmax(-1)
        b = model.forward(source_batch(bpe, model, pad_to=(30, 60)), tgt).data.argmax(-1)
    assert np.array_equal(a, b)


def test_forward_deterministic(bpe):
    model = tiny_model(bpe, bits=32)
    src = source_batch(bpe, model)
    tgt = random_targets(np.random.default_rng(8), src.size, len(bpe.vocab))
    a = model.forward(src, tgt, training=True, rng=nx.Rng(1)).data
    b = model.forward(src, tgt, training=True, rng=nx.Rng(1)).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, model.forward(src, tgt).data)
