"""Two-branch encoder (wide subword branch, thin character branch) and decoder.

Both branches are pre-norm transformer stacks.  Before the first block each
branch mixes positions that belong to the same word with one graph
convolution over the normalized boundary adjacency.  Inside every block a
fusion sublayer sits between self-attention and the feed-forward network:
by default cross-granularity attention, where one branch's post-attention
state queries the other branch's layer-normalized state through projections
that bridge the two widths.  The decoder is a standard subword decoder that
attends to the slow branch, the fast branch, or both through a gate.

All tensors are batched ``[B, L, H]``; the per-sentence helpers also accept
``[L, H]``.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import ParameterSet, Rng, Tensor
from .segmentation import PAD, SegmentedSentence, boundary_relative_indices_from, group_normalized, \
    vanilla_relative_indices, OUT

FUSION_VARIANTS = ("cga", "linear_attention", "ds_concat", "ds_sum", "none")
INTERACTION_MODES = ("slow", "fast", "gated_both")
RELPOS_MODES = ("boundary", "vanilla", "none")
FAST_GCN_MODES = ("boundary", "random", "none")
FAST_INPUTS = ("character", "subword")
CGA_DIRECTIONS = ("fast_to_slow", "slow_to_fast")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    hidden_slow: int = 64
    hidden_fast: int = 16
    ffn_slow: int = 0            # 0 means 4 * hidden
    ffn_fast: int = 0
    heads_slow: int = 4
    heads_fast: int = 2
    layers: int = 2
    decoder_layers: int = 2
    src_vocab: int = 0
    char_vocab: int = 0
    tgt_vocab: int = 0
    fusion_variant: str = "cga"
    cga_bidirectional: bool = True
    # which way information flows when fusion is one-directional
    cga_direction: str = "fast_to_slow"
    fusion_layer_mask: list[bool] = field(default_factory=list)   # empty means every block
    interaction_mode: str = "slow"
    relpos_mode: str = "boundary"
    k: int = 3
    fast_gcn: str = "boundary"
    slow_gcn: bool = True
    fast_input: str = "character"
    dropout: float = 0.1
    attention_dropout: float = 0.1
    activation_dropout: float = 0.1
    max_positions: int = 256

    def __post_init__(self):
        if not self.ffn_slow:
            self.ffn_slow = 4 * self.hidden_slow
        if not self.ffn_fast:
            self.ffn_fast = 4 * self.hidden_fast
        if not self.fusion_layer_mask:
            self.fusion_layer_mask = [True] * self.layers
        self.validate()

    def validate(self) -> None:
        def check(cond, msg):
            if not cond:
                raise ConfigError(msg)

        check(self.hidden_slow % self.heads_slow == 0, "hidden_slow must be divisible by heads_slow")
        check(self.hidden_fast % self.heads_fast == 0, "hidden_fast must be divisible by heads_fast")
        check(self.hidden_fast <= self.hidden_slow, "hidden_fast must not exceed hidden_slow")
        check(self.layers >= 1 and self.decoder_layers >= 1, "layer counts must be positive")
        check(self.fusion_variant in FUSION_VARIANTS, f"unknown fusion_variant {self.fusion_variant!r}")
        check(self.interaction_mode in INTERACTION_MODES, f"unknown interaction_mode {self.interaction_mode!r}")
        check(self.relpos_mode in RELPOS_MODES, f"unknown relpos_mode {self.relpos_mode!r}")
        check(self.fast_gcn in FAST_GCN_MODES, f"unknown fast_gcn {self.fast_gcn!r}")
        check(self.fast_input in FAST_INPUTS, f"unknown fast_input {self.fast_input!r}")
        check(self.cga_direction in CGA_DIRECTIONS, f"unknown cga_direction {self.cga_direction!r}")
        check(len(self.fusion_layer_mask) == self.layers, "fusion_layer_mask length must equal layers")
        check(self.k >= 1, "k must be >= 1")
        for name in ("dropout", "attention_dropout", "activation_dropout"):
            check(0.0 <= getattr(self, name) < 1.0, f"{name} must be in [0, 1)")

    @property
    def uses_fast_branch(self) -> bool:
        return self.fusion_variant != "none" or self.interaction_mode != "slow"

    @property
    def fast_vocab(self) -> int:
        return self.src_vocab if self.fast_input == "subword" else self.char_vocab

    def fusion_at(self, layer: int) -> bool:
        return self.fusion_variant != "none" and bool(self.fusion_layer_mask[layer])

    def receives(self) -> tuple[bool, bool]:
        """(slow branch gets fused input, fast branch gets fused input)."""
        v = self.fusion_variant
        if v == "none":
            return False, False
        if v in ("ds_concat", "ds_sum"):
            return True, False
        if self.cga_bidirectional:
            return True, True
        return self.cga_direction == "fast_to_slow", self.cga_direction == "slow_to_fast"

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------- parameter records


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    @classmethod
    def take(cls, ps, prefix: str) -> "AttentionParams":
        return cls(ps[prefix + ".wq"], ps[prefix + ".wk"], ps[prefix + ".wv"], ps[prefix + ".wo"])


@dataclass
class CgaParams:
    """Cross-granularity attention; ``wk``/``wv`` map source width to destination width."""
    direction: str
    ln_gamma: Tensor
    ln_beta: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    @classmethod
    def take(cls, ps, prefix: str, direction: str) -> "CgaParams":
        return cls(direction, ps[prefix + ".ln_src.g"], ps[prefix + ".ln_src.b"],
                   ps[prefix + ".wq"], ps[prefix + ".wk"], ps[prefix + ".wv"], ps[prefix + ".wo"])


@dataclass
class GcnParams:
    w: Tensor
    activation: str = "relu"


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def take(cls, ps, prefix: str) -> "FfnParams":
        return cls(ps[prefix + ".w1"], ps[prefix + ".b1"], ps[prefix + ".w2"], ps[prefix + ".b2"])


@dataclass
class Drop:
    """Dropout settings threaded through a forward pass."""
    rng: Rng | None = None
    training: bool = False
    residual: float = 0.0
    attention: float = 0.0
    activation: float = 0.0

    def __call__(self, x: Tensor, p: float) -> Tensor:
        return nx.dropout(x, p, self.rng, self.training)


NO_DROP = Drop()


# ---------------------------------------------------------------- primitive layers


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return nx.reshape(x, (1,) + x.shape), True
    return x, False


def _unbatched(x: Tensor, squeeze: bool) -> Tensor:
    return nx.reshape(x, x.shape[1:]) if squeeze else x


@dataclass
class RelPos:
    """Relative-position lookup: embedding table ``[2k+2, d_k]`` and row ids."""
    table: Tensor
    rows: np.ndarray            # [B, 1, L, L] ints in 0..2k+1
    onehot: np.ndarray | None = None


def multi_head_attention(xq: Tensor, xkv: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                         heads: int, mask: np.ndarray | None = None, relpos: RelPos | None = None,
                         drop: Drop = NO_DROP) -> Tensor:
    """Scaled dot-product attention over ``heads`` heads at the width of ``wq``.

    ``mask`` (True = attend) broadcasts to ``[B, heads, Lq, Lk]``.  With
    ``relpos`` a key-side relative embedding term ``q_i . a_ij`` is added to
    the logits before scaling.
    """
    xq, sq = _batched(xq)
    xkv, _ = _batched(xkv)
    B, Lq = xq.shape[:2]
    Lk = xkv.shape[1]
    width = wq.shape[1]
    dk = width // heads
    q = nx.transpose(nx.reshape(nx.matmul(xq, wq), (B, Lq, heads, dk)), (0, 2, 1, 3))
    k = nx.transpose(nx.reshape(nx.matmul(xkv, wk), (B, Lk, heads, dk)), (0, 2, 3, 1))
    v = nx.transpose(nx.reshape(nx.matmul(xkv, wv), (B, Lk, heads, dk)), (0, 2, 1, 3))
    logits = nx.matmul(q, k)
    if relpos is not None:
        qe = nx.matmul(q, nx.swap_last(relpos.table))
        logits = nx.add(logits, nx.take_last(qe, relpos.rows, relpos.onehot))
    logits = nx.scale(logits, 1.0 / math.sqrt(dk))
    attn = nx.softmax_rows(logits, mask)
    attn = drop(attn, drop.attention)
    ctx = nx.reshape(nx.transpose(nx.matmul(attn, v), (0, 2, 1, 3)), (B, Lq, width))
    return _unbatched(nx.matmul(ctx, wo), sq)


def self_attention(x: Tensor, params: AttentionParams, heads: int, key_mask: np.ndarray | None = None,
                   relpos: RelPos | None = None, drop: Drop = NO_DROP) -> Tensor:
    mask = None
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        mask = key_mask.reshape(key_mask.shape[:-1] + (1, 1, key_mask.shape[-1])) \
            if key_mask.ndim == 2 else key_mask.reshape(1, 1, 1, -1)
    return multi_head_attention(x, x, params.wq, params.wk, params.wv, params.wo, heads,
                                mask, relpos, drop)


def gcn_layer(x: Tensor, normalized_adjacency, params: GcnParams) -> Tensor:
    """activation(N x W) with ``N`` the symmetric-normalized adjacency."""
    adj = normalized_adjacency if isinstance(normalized_adjacency, Tensor) \
        else Tensor(np.asarray(normalized_adjacency, dtype=x.dtype))
    if adj.shape[-1] != x.shape[-2]:
        raise nx.ShapeError(f"adjacency {adj.shape} does not match sequence {x.shape}")
    y = nx.matmul(adj, nx.matmul(x, params.w))
    return nx.relu(y) if params.activation == "relu" else y


def cross_granularity_attention(x_dst: Tensor, x_src: Tensor, params: CgaParams, heads: int,
                                src_mask: np.ndarray | None = None, drop: Drop = NO_DROP) -> Tensor:
    """Destination queries attend to the layer-normalized source branch.

    Keys and values are projected from the source width straight to the
    destination width, so the output lives in the destination branch.
    """
    if params.wq.shape[0] != x_dst.shape[-1] or params.wk.shape[0] != x_src.shape[-1]:
        raise nx.ShapeError("CGA parameters do not match the branch widths")
    x_hat = nx.layer_norm(x_src, params.ln_gamma, params.ln_beta)
    mask = None
    if src_mask is not None:
        src_mask = np.asarray(src_mask, dtype=bool)
        mask = src_mask[:, None, None, :] if src_mask.ndim == 2 else src_mask.reshape(1, 1, 1, -1)
    return multi_head_attention(x_dst, x_hat, params.wq, params.wk, params.wv, params.wo, heads,
                                mask, None, drop)


def ffn(x: Tensor, params: FfnParams, drop: Drop = NO_DROP) -> Tensor:
    h = nx.relu(nx.linear(x, params.w1, params.b1))
    h = drop(h, drop.activation)
    return nx.linear(h, params.w2, params.b2)


def sinusoidal_positions(n: int, dim: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, dim, 2)[None, :]
    angle = pos / np.power(10000.0, i / dim)
    pe = np.zeros((n, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)[:, : dim // 2]
    return pe.astype(dtype)


# ---------------------------------------------------------------- source batches


@dataclass
class SourceBatch:
    slow_ids: np.ndarray            # [B, Ls]
    slow_mask: np.ndarray           # [B, Ls] bool
    slow_adj: np.ndarray            # [B, Ls, Ls]
    fast_ids: np.ndarray            # [B, Lf]
    fast_mask: np.ndarray
    fast_adj: np.ndarray            # [B, Lf, Lf]
    fast_rel: np.ndarray | None     # [B, 1, Lf, Lf] embedding rows
    fast_rel_onehot: np.ndarray | None
    pool: np.ndarray                # [B, Ls, Lf] per-word mean pooling of the fast branch

    @property
    def size(self) -> int:
        return self.slow_ids.shape[0]


def random_owner(n_items: int, n_groups: int, key: int) -> np.ndarray:
    """Random contiguous partition of ``n_items`` into at most ``n_groups`` runs."""
    rng = Rng(key, 0x5EED)
    groups = max(1, min(n_groups, n_items))
    cuts = np.sort(rng.permutation(n_items - 1)[: groups - 1] + 1) if n_items > 1 else np.array([], int)
    owner = np.zeros(n_items, dtype=np.int64)
    for c in cuts:
        owner[c:] += 1
    return owner


def prepare_source(sentences: Sequence[SegmentedSentence], cfg: ModelConfig, dtype=None,
                   pad_to: tuple[int, int] | None = None) -> SourceBatch:
    """Pad a list of sentences and build every boundary structure the encoder needs."""
    dtype = dtype or nx.get_dtype()
    B = len(sentences)
    fast_tokens = [(s.subwords, s.sub2word) if cfg.fast_input == "subword" else (s.chars, s.char2word)
                   for s in sentences]
    Ls = max(len(s.subwords) for s in sentences)
    Lf = max(len(t) for t, _ in fast_tokens)
    if pad_to is not None:
        Ls, Lf = max(Ls, pad_to[0]), max(Lf, pad_to[1])
    slow_ids = np.full((B, Ls), PAD, dtype=np.int64)
    fast_ids = np.full((B, Lf), PAD, dtype=np.int64)
    slow_mask = np.zeros((B, Ls), dtype=bool)
    fast_mask = np.zeros((B, Lf), dtype=bool)
    slow_adj = np.zeros((B, Ls, Ls), dtype=dtype)
    fast_adj = np.zeros((B, Lf, Lf), dtype=dtype)
    pool = np.zeros((B, Ls, Lf), dtype=dtype)
    R_out = 2 * cfg.k + 1
    rel = np.full((B, 1, Lf, Lf), R_out, dtype=np.int64) if cfg.relpos_mode != "none" else None
    for b, (s, (ftok, fown)) in enumerate(zip(sentences, fast_tokens)):
        ns, nf = len(s.subwords), len(ftok)
        slow_ids[b, :ns] = s.subwords
        fast_ids[b, :nf] = ftok
        slow_mask[b, :ns] = True
        fast_mask[b, :nf] = True
        sub_owner = np.asarray(s.sub2word)
        fown = np.asarray(fown)
        slow_adj[b, :ns, :ns] = group_normalized(sub_owner)
        if cfg.fast_gcn == "random":
            key = zlib.crc32(np.asarray(ftok, dtype=np.int64).tobytes())
            gcn_owner = random_owner(nf, s.n_words, key)
        else:
            gcn_owner = fown
        fast_adj[b, :nf, :nf] = group_normalized(gcn_owner)
        same = (sub_owner[:, None] == fown[None, :]).astype(np.float64)
        pool[b, :ns, :nf] = same / same.sum(axis=1, keepdims=True)
        if rel is not None:
            idx = boundary_relative_indices_from(fown, cfg.k) if cfg.relpos_mode == "boundary" \
                else vanilla_relative_indices(nf, cfg.k)
            rel[b, 0, :nf, :nf] = idx.embedding_rows()
    onehot = None
    if rel is not None:
        onehot = (rel[..., None] == np.arange(2 * cfg.k + 2)).astype(dtype)
    return SourceBatch(slow_ids, slow_mask, slow_adj, fast_ids, fast_mask, fast_adj, rel, onehot, pool)


# ---------------------------------------------------------------- parameters


def _xavier(rng: Rng, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(shape, -limit, limit)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Ordered name -> shape map of every parameter the configuration needs."""
    Hs, Hf = cfg.hidden_slow, cfg.hidden_fast
    shapes: dict[str, tuple] = {}

    def ln(prefix, h):
        shapes[prefix + ".g"] = (h,)
        shapes[prefix + ".b"] = (h,)

    def attn(prefix, hq, hkv=None, hout=None):
        hkv = hkv or hq
        shapes[prefix + ".wq"] = (hq, hq)
        shapes[prefix + ".wk"] = (hkv, hq)
        shapes[prefix + ".wv"] = (hkv, hq)
        shapes[prefix + ".wo"] = (hq, hq)

    def ffn_shapes(prefix, h, inner):
        shapes[prefix + ".w1"] = (h, inner)
        shapes[prefix + ".b1"] = (inner,)
        shapes[prefix + ".w2"] = (inner, h)
        shapes[prefix + ".b2"] = (h,)

    shapes["emb.src"] = (cfg.src_vocab, Hs)
    shapes["emb.tgt"] = (cfg.tgt_vocab, Hs)
    fast = cfg.uses_fast_branch
    if fast:
        shapes["emb.fast"] = (cfg.fast_vocab, Hf)
    if cfg.slow_gcn:
        ln("enc.slow.gcn.ln", Hs)
        shapes["enc.slow.gcn.w"] = (Hs, Hs)
    if fast and cfg.fast_gcn != "none":
        ln("enc.fast.gcn.ln", Hf)
        shapes["enc.fast.gcn.w"] = (Hf, Hf)
    if fast and cfg.relpos_mode != "none":
        shapes["enc.fast.relpos"] = (2 * cfg.k + 1, Hf // cfg.heads_fast)
    to_slow, to_fast = cfg.receives()
    branches = [("slow", Hs, cfg.ffn_slow, Hf)] + ([("fast", Hf, cfg.ffn_fast, Hs)] if fast else [])
    for layer in range(cfg.layers):
        for name, h, inner, other in branches:
            p = f"enc.{name}.{layer}"
            ln(p + ".san.ln", h)
            attn(p + ".san", h)
            receives = to_slow if name == "slow" else to_fast
            if cfg.fusion_at(layer) and receives:
                v = cfg.fusion_variant
                if v == "cga":
                    ln(p + ".cga.ln_q", h)
                    ln(p + ".cga.ln_src", other)
                    attn(p + ".cga", h, other)
                elif v == "linear_attention":
                    ln(p + ".xattn.ln_q", h)
                    ln(p + ".xattn.ln_src", other)
                    shapes[p + ".xattn.proj"] = (other, h)
                    attn(p + ".xattn", h)
                else:
                    ln(p + ".ds.ln_src", Hf)
                    shapes[p + ".ds.proj"] = (Hf, Hs)
                    if v == "ds_concat":
                        ln(p + ".ds.ln_q", Hs)
                        shapes[p + ".ds.wc"] = (2 * Hs, Hs)
            ln(p + ".ffn.ln", h)
            ffn_shapes(p + ".ffn", h, inner)
    ln("enc.slow.final_ln", Hs)
    if fast:
        ln("enc.fast.final_ln", Hf)
    if cfg.interaction_mode == "fast":
        shapes["inter.up"] = (Hf, Hs)
    for layer in range(cfg.decoder_layers):
        p = f"dec.{layer}"
        ln(p + ".san.ln", Hs)
        attn(p + ".san", Hs)
        ln(p + ".xattn.ln", Hs)
        attn(p + ".xattn", Hs)
        if cfg.interaction_mode == "gated_both":
            attn(p + ".xfast", Hs, Hf)
            shapes[p + ".gate.w"] = (2 * Hs, Hs)
            shapes[p + ".gate.b"] = (Hs,)
        ln(p + ".ffn.ln", Hs)
        ffn_shapes(p + ".ffn", Hs, cfg.ffn_slow)
    ln("dec.final_ln", Hs)
    return shapes


def init_parameters(cfg: ModelConfig, seed: int, dtype=None) -> ParameterSet:
    """Each tensor draws from its own stream keyed by name, so shared parts
    of two configurations start identical under the same seed."""
    base = Rng(seed)
    arrays = {}
    for name, shape in parameter_shapes(cfg).items():
        rng = base.split(zlib.crc32(name.encode()))
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("emb."):
            a = rng.normal(shape, shape[1] ** -0.5)
            a[PAD] = 0.0
        elif name.endswith(".relpos"):
            a = rng.normal(shape, shape[1] ** -0.5)
        elif leaf == "g":
            a = np.ones(shape)
        elif len(shape) == 1:
            a = np.zeros(shape)
        else:
            a = _xavier(rng, shape)
        arrays[name] = a
    return ParameterSet(arrays, dtype or nx.get_dtype())


# ---------------------------------------------------------------- model


@dataclass
class EncoderOutput:
    slow: Tensor
    fast: Tensor | None


@dataclass
class Memory:
    """What the decoder attends to; ``fast`` is set only in gated mode."""
    mode: str
    states: Tensor
    mask: np.ndarray
    fast: Tensor | None = None
    fast_mask: np.ndarray | None = None


class SlowFastTransformer:
    def __init__(self, cfg: ModelConfig, params: ParameterSet | None = None, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.params = params if params is not None else init_parameters(cfg, seed)
        missing = set(parameter_shapes(cfg)) - set(self.params.names)
        if missing:
            raise ConfigError(f"parameter set lacks {sorted(missing)[:3]}...")
        self.dtype = self.params.flat.dtype
        self._pe: dict[int, np.ndarray] = {}

    # --- helpers
    def p(self, name: str) -> Tensor:
        return self.params[name]

    def ln(self, x: Tensor, prefix: str) -> Tensor:
        return nx.layer_norm(x, self.params[prefix + ".g"], self.params[prefix + ".b"])

    def const(self, a: np.ndarray) -> Tensor:
        return Tensor(np.asarray(a, dtype=self.dtype))

    def positions(self, n: int, dim: int) -> np.ndarray:
        pe = self._pe.get(dim)
        if pe is None or pe.shape[0] < n:
            pe = sinusoidal_positions(max(n, self.cfg.max_positions), dim, self.dtype)
            self._pe[dim] = pe
        return pe[:n]

    def embed(self, table: str, ids: np.ndarray, drop: Drop) -> Tensor:
        w = self.params[table]
        dim = w.shape[1]
        x = nx.scale(nx.embedding(w, ids), math.sqrt(dim))
        x = nx.add(x, self.const(self.positions(ids.shape[1], dim)))
        return drop(x, drop.residual)

    def drop_for(self, training: bool, rng: Rng | None) -> Drop:
        c = self.cfg
        if not training:
            return NO_DROP
        return Drop(rng, True, c.dropout, c.attention_dropout, c.activation_dropout)

    # --- encoder pieces
    def input_gcn(self, x: Tensor, adj: np.ndarray, prefix: str, drop: Drop) -> Tensor:
        h = gcn_layer(self.ln(x, prefix + ".ln"), adj, GcnParams(self.params[prefix + ".w"]))
        return nx.add(x, drop(h, drop.residual))

    def relpos(self, src: SourceBatch) -> RelPos | None:
        if self.cfg.relpos_mode == "none":
            return None
        learned = self.params["enc.fast.relpos"]
        table = nx.concat([learned, self.const(np.zeros((1, learned.shape[1])))], axis=0)
        return RelPos(table, src.fast_rel, src.fast_rel_onehot)

    def fusion_variant_apply(self, layer: int, xs: Tensor, xf: Tensor, src: SourceBatch,
                             drop: Drop) -> tuple[Tensor | None, Tensor | None]:
        """Branch increments from one fusion sublayer, both read from the same snapshot."""
        c = self.cfg
        v = c.fusion_variant
        to_slow, to_fast = c.receives()
        inc_s = inc_f = None
        ps, pf = f"enc.slow.{layer}", f"enc.fast.{layer}"
        if v == "cga":
            if to_fast:
                cp = CgaParams.take(self.params, pf + ".cga", "slow_to_fast")
                inc_f = cross_granularity_attention(self.ln(xf, pf + ".cga.ln_q"), xs, cp, c.heads_fast,
                                                    src.slow_mask, drop)
            if to_slow:
                cp = CgaParams.take(self.params, ps + ".cga", "fast_to_slow")
                inc_s = cross_granularity_attention(self.ln(xs, ps + ".cga.ln_q"), xf, cp, c.heads_slow,
                                                    src.fast_mask, drop)
        elif v == "linear_attention":
            if to_fast:
                inc_f = self._linear_xattn(pf, xf, xs, src.slow_mask, c.heads_fast, drop)
            if to_slow:
                inc_s = self._linear_xattn(ps, xs, xf, src.fast_mask, c.heads_slow, drop)
        elif v in ("ds_concat", "ds_sum"):
            pooled = nx.matmul(self.const(src.pool), self.ln(xf, ps + ".ds.ln_src"))
            up = nx.matmul(pooled, self.params[ps + ".ds.proj"])
            if v == "ds_sum":
                inc_s = up
            else:
                both = nx.concat([self.ln(xs, ps + ".ds.ln_q"), up], axis=-1)
                inc_s = nx.matmul(both, self.params[ps + ".ds.wc"])
        else:
            raise ConfigError(f"unknown fusion variant {v!r}")
        return inc_s, inc_f

    def _linear_xattn(self, p: str, x_dst: Tensor, x_src: Tensor, src_mask, heads: int, drop: Drop) -> Tensor:
        src = nx.matmul(self.ln(x_src, p + ".xattn.ln_src"), self.params[p + ".xattn.proj"])
        a = AttentionParams.take(self.params, p + ".xattn")
        return multi_head_attention(self.ln(x_dst, p + ".xattn.ln_q"), src, a.wq, a.wk, a.wv, a.wo,
                                    heads, src_mask[:, None, None, :], None, drop)

    def encoder_block(self, layer: int, xs: Tensor, xf: Tensor | None, src: SourceBatch,
                      relpos: RelPos | None, drop: Drop) -> tuple[Tensor, Tensor | None]:
        c = self.cfg
        ps, pf = f"enc.slow.{layer}", f"enc.fast.{layer}"
        with nx.flop_scope("slow"):
            h = self_attention(self.ln(xs, ps + ".san.ln"), AttentionParams.take(self.params, ps + ".san"),
                               c.heads_slow, src.slow_mask, None, drop)
            xs = nx.add(xs, drop(h, drop.residual))
        if xf is not None:
            with nx.flop_scope("fast"):
                h = self_attention(self.ln(xf, pf + ".san.ln"), AttentionParams.take(self.params, pf + ".san"),
                                   c.heads_fast, src.fast_mask, relpos, drop)
                xf = nx.add(xf, drop(h, drop.residual))
        if c.fusion_at(layer):
            with nx.flop_scope("fusion"):
                inc_s, inc_f = self.fusion_variant_apply(layer, xs, xf, src, drop)
            if inc_s is not None:
                xs = nx.add(xs, drop(inc_s, drop.residual))
            if inc_f is not None:
                xf = nx.add(xf, drop(inc_f, drop.residual))
        with nx.flop_scope("slow"):
            h = ffn(self.ln(xs, ps + ".ffn.ln"), FfnParams.take(self.params, ps + ".ffn"), drop)
            xs = nx.add(xs, drop(h, drop.residual))
        if xf is not None:
            with nx.flop_scope("fast"):
                h = ffn(self.ln(xf, pf + ".ffn.ln"), FfnParams.take(self.params, pf + ".ffn"), drop)
                xf = nx.add(xf, drop(h, drop.residual))
        return xs, xf

    def encode(self, src: SourceBatch, training: bool = False, rng: Rng | None = None) -> EncoderOutput:
        c = self.cfg
        drop = self.drop_for(training, rng)
        with nx.flop_scope("slow"):
            xs = self.embed("emb.src", src.slow_ids, drop)
            if c.slow_gcn:
                xs = self.input_gcn(xs, src.slow_adj, "enc.slow.gcn", drop)
        xf = relpos = None
        if c.uses_fast_branch:
            with nx.flop_scope("fast"):
                xf = self.embed("emb.fast", src.fast_ids, drop)
                if c.fast_gcn != "none":
                    xf = self.input_gcn(xf, src.fast_adj, "enc.fast.gcn", drop)
                relpos = self.relpos(src)
        for layer in range(c.layers):
            xs, xf = self.encoder_block(layer, xs, xf, src, relpos, drop)
        xs = self.ln(xs, "enc.slow.final_ln")
        if xf is not None:
            xf = self.ln(xf, "enc.fast.final_ln")
        return EncoderOutput(xs, xf)

    # --- decoder
    def encdec_interaction(self, enc: EncoderOutput, src: SourceBatch) -> Memory:
        mode = self.cfg.interaction_mode
        if mode == "slow":
            return Memory(mode, enc.slow, src.slow_mask)
        if mode == "fast":
            with nx.flop_scope("decoder"):
                up = nx.matmul(enc.fast, self.params["inter.up"])
            return Memory(mode, up, src.fast_mask)
        if mode == "gated_both":
            return Memory(mode, enc.slow, src.slow_mask, enc.fast, src.fast_mask)
        raise ConfigError(f"unknown interaction mode {mode!r}")

    def decode_forward(self, tgt_in: np.ndarray, memory: Memory, training: bool = False,
                       rng: Rng | None = None) -> Tensor:
        """Teacher-forced logits ``[B, T, V_tgt]``."""
        c = self.cfg
        drop = self.drop_for(training, rng)
        tgt_in = np.asarray(tgt_in)
        T = tgt_in.shape[1]
        causal = np.tril(np.ones((T, T), dtype=bool))
        self_mask = causal[None, None] & (tgt_in != PAD)[:, None, None, :]
        self_mask |= np.eye(T, dtype=bool)[None, None]
        mem_mask = memory.mask[:, None, None, :]
        with nx.flop_scope("decoder"):
            y = self.embed("emb.tgt", tgt_in, drop)
            for layer in range(c.decoder_layers):
                p = f"dec.{layer}"
                h = multi_head_attention_params(self.ln(y, p + ".san.ln"), None,
                                                AttentionParams.take(self.params, p + ".san"),
                                                c.heads_slow, self_mask, drop)
                y = nx.add(y, drop(h, drop.residual))
                q = self.ln(y, p + ".xattn.ln")
                ctx = multi_head_attention_params(q, memory.states, AttentionParams.take(self.params, p + ".xattn"),
                                                  c.heads_slow, mem_mask, drop)
                if memory.mode == "gated_both":
                    ctx_f = multi_head_attention_params(q, memory.fast,
                                                        AttentionParams.take(self.params, p + ".xfast"),
                                                        c.heads_slow, memory.fast_mask[:, None, None, :], drop)
                    gate = nx.sigmoid(nx.linear(nx.concat([ctx, ctx_f], axis=-1),
                                                self.params[p + ".gate.w"], self.params[p + ".gate.b"]))
                    ctx = nx.add(nx.mul(gate, ctx), nx.mul(nx.add(nx.neg(gate), 1.0), ctx_f))
                y = nx.add(y, drop(ctx, drop.residual))
                h = ffn(self.ln(y, p + ".ffn.ln"), FfnParams.take(self.params, p + ".ffn"), drop)
                y = nx.add(y, drop(h, drop.residual))
            y = self.ln(y, "dec.final_ln")
            return nx.matmul(y, nx.swap_last(self.params["emb.tgt"]))

    def forward(self, src: SourceBatch, tgt_in: np.ndarray, training: bool = False,
                rng: Rng | None = None) -> Tensor:
        enc = self.encode(src, training, rng)
        return self.decode_forward(tgt_in, self.encdec_interaction(enc, src), training, rng)


def multi_head_attention_params(xq: Tensor, xkv: Tensor | None, a: AttentionParams, heads: int,
                                mask: np.ndarray | None, drop: Drop = NO_DROP) -> Tensor:
    return multi_head_attention(xq, xq if xkv is None else xkv, a.wq, a.wk, a.wv, a.wo, heads, mask, None, drop)


# ---------------------------------------------------------------- reference


def reference_transformer_logits(params: ParameterSet, cfg: ModelConfig, src: SourceBatch,
                                 tgt_in: np.ndarray) -> Tensor:
    """Plain single-branch pre-norm encoder-decoder over the subword input.

    Written independently of :class:`SlowFastTransformer` (eval mode only)
    and reading the same named tensors; with the fast branch switched off
    both must agree bit for bit.
    """
    P = params.tensors
    H = cfg.hidden_slow
    dtype = params.flat.dtype

    def norm(x, name):
        return nx.layer_norm(x, P[name + ".g"], P[name + ".b"])

    def attn(x, kv, name, mask):
        return multi_head_attention(x, kv, P[name + ".wq"], P[name + ".wk"], P[name + ".wv"],
                                    P[name + ".wo"], cfg.heads_slow, mask)

    def feed(x, name):
        return ffn(x, FfnParams(P[name + ".w1"], P[name + ".b1"], P[name + ".w2"], P[name + ".b2"]))

    def embed(table, ids):
        pe = sinusoidal_positions(max(ids.shape[1], cfg.max_positions), H, dtype)[: ids.shape[1]]
        return nx.add(nx.scale(nx.embedding(P[table], ids), math.sqrt(H)), Tensor(pe))

    x = embed("emb.src", src.slow_ids)
    if cfg.slow_gcn:
        g = gcn_layer(norm(x, "enc.slow.gcn.ln"), src.slow_adj.astype(dtype), GcnParams(P["enc.slow.gcn.w"]))
        x = nx.add(x, g)
    enc_mask = src.slow_mask[:, None, None, :]
    for layer in range(cfg.layers):
        p = f"enc.slow.{layer}"
        x = nx.add(x, attn(norm(x, p + ".san.ln"), norm(x, p + ".san.ln"), p + ".san", enc_mask))
        x = nx.add(x, feed(norm(x, p + ".ffn.ln"), p + ".ffn"))
    memory = norm(x, "enc.slow.final_ln")

    tgt_in = np.asarray(tgt_in)
    T = tgt_in.shape[1]
    dec_mask = np.tril(np.ones((T, T), dtype=bool))[None, None] & (tgt_in != PAD)[:, None, None, :]
    dec_mask |= np.eye(T, dtype=bool)[None, None]
    y = embed("emb.tgt", tgt_in)
    for layer in range(cfg.decoder_layers):
        p = f"dec.{layer}"
        q = norm(y, p + ".san.ln")
        y = nx.add(y, attn(q, q, p + ".san", dec_mask))
        y = nx.add(y, attn(norm(y, p + ".xattn.ln"), memory, p + ".xattn", enc_mask))
        y = nx.add(y, feed(norm(y, p + ".ffn.ln"), p + ".ffn"))
    y = norm(y, "dec.final_ln")
    return nx.matmul(y, nx.swap_last(P["emb.tgt"]))
