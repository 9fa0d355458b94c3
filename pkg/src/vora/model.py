"""Decoder-only student model: pre-norm blocks, RMS-norm, SiLU-gated FFN,
rotary positions, hybrid vision/text attention masks, per-block taps.

The packed sequence always puts vision tokens first, then text; the
hybrid mask gives vision-vision pairs full bi-directional visibility and
everything else plain causal visibility.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

LAYER_NAMES = ("q", "k", "v", "o", "ffn_gate", "ffn_up", "ffn_down")


class ConfigError(ValueError):
    pass


class LayoutError(ValueError):
    pass


class SequenceTooLong(ValueError):
    pass


@dataclass
class ModelConfig:
    n_llm: int = 6
    n_vit: int = 4
    d_model: int = 64
    d_vit: int = 48
    n_heads: int = 4
    d_ff: int = 256
    vocab: int = 200
    patch: int = 8
    rank: int = 8
    alpha: float = 0.0  # 0 resolves to rank (scale factor 1)
    max_seq: int = 160
    vembed_hidden: int = 0  # 0 resolves to d_model // 2
    vit_heads: int = 4
    vit_ff: int = 0  # 0 resolves to 4 * d_vit

    def __post_init__(self):
        if self.alpha <= 0:
            self.alpha = float(self.rank)
        if self.vembed_hidden <= 0:
            self.vembed_hidden = self.d_model // 2
        if self.vit_ff <= 0:
            self.vit_ff = 4 * self.d_vit
        self.validate()

    def validate(self):
        if self.n_vit > self.n_llm:
            raise ConfigError(f"n_vit ({self.n_vit}) must be <= n_llm ({self.n_llm})")
        if self.n_vit < 0:
            raise ConfigError("n_vit must be >= 0")
        for name in ("n_llm", "d_model", "d_vit", "n_heads", "d_ff", "vocab", "patch", "rank", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model ({self.d_model}) not divisible by n_heads ({self.n_heads})")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dim must be even for rotary positions")
        if self.d_vit % self.vit_heads:
            raise ConfigError(f"d_vit ({self.d_vit}) not divisible by vit_heads ({self.vit_heads})")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads


@dataclass
class SequenceLayout:
    """Token spans of one packed sequence: [vision)[text), supervision start."""

    vision_span: tuple
    text_span: tuple
    supervise_from: int

    def __post_init__(self):
        v0, v1 = self.vision_span
        t0, t1 = self.text_span
        if not (0 <= v0 <= v1):
            raise LayoutError(f"bad vision span {self.vision_span}")
        if not (v1 <= t0 <= t1):
            raise LayoutError(f"spans overlap or run backwards: vision {self.vision_span}, text {self.text_span}")
        if t0 != v1:
            raise LayoutError(f"gap between vision span {self.vision_span} and text span {self.text_span}")
        if not (t0 <= self.supervise_from <= t1):
            raise LayoutError(f"supervise_from {self.supervise_from} outside text span {self.text_span}")

    @property
    def total_len(self):
        return self.text_span[1]


@dataclass
class BlockTap:
    block_index: int
    hidden: Tensor  # [..., seq, d_model], post-residual block output


def build_attention_mask(layout, total_len, mode="hybrid"):
    """Additive mask [total_len, total_len]: 0 = allowed, NEG_MASK = blocked.

    hybrid: vision queries see the whole vision span (bi-directional);
    every other query is causal (k <= q). causal: k <= q everywhere.
    Positions beyond the layout (padding) are treated as causal rows;
    they are never visible to in-layout queries because padding sits at
    the end of the sequence.
    """
    if mode not in ("hybrid", "causal"):
        raise ValueError(f"unknown mask mode {mode!r}")
    if layout.total_len > total_len:
        raise LayoutError(f"layout extent {layout.total_len} exceeds total_len {total_len}")
    q = np.arange(total_len)[:, None]
    k = np.arange(total_len)[None, :]
    causal = k <= q
    if mode == "causal":
        allowed = causal
    else:
        v0, v1 = layout.vision_span
        vis_q = (q >= v0) & (q < v1)
        vis_k = (k >= v0) & (k < v1)
        allowed = np.where(vis_q, vis_q & vis_k, causal)
    return np.where(allowed, np.float32(0.0), np.float32(T.NEG_MASK)).astype(np.float32)


def build_hybrid_mask(layout, total_len):
    return build_attention_mask(layout, total_len, mode="hybrid")


def rope_tables(seq_len, head_dim, base=10000.0):
    """cos/sin [seq_len, head_dim/2] for half-split rotary application."""
    half = head_dim // 2
    inv_freq = 1.0 / base ** (np.arange(half) / half)
    ang = np.arange(seq_len)[:, None] * inv_freq[None, :]
    return np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)


def _apply_rope(x, cos, sin):
    # x [..., S, hd]; rotate the (i, i+hd/2) pairs by the position angle
    hd = x.shape[-1]
    half = hd // 2
    x1 = T.slice_axis(x, -1, 0, half)
    x2 = T.slice_axis(x, -1, half, hd)
    return T.concat([T.mul(x1, cos) - T.mul(x2, sin), T.mul(x2, cos) + T.mul(x1, sin)], axis=-1)


class Model:
    """Parameter container plus the forward pass."""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg, seed=0):
        rng = np.random.default_rng(seed)

        def w(*shape):
            return Tensor((0.02 * rng.standard_normal(shape)).astype(np.float32))

        p = {"llm.embed": w(cfg.vocab, cfg.d_model)}
        for i in range(cfg.n_llm):
            pre = f"llm.blocks.{i}."
            p[pre + "attn_norm"] = Tensor(np.ones(cfg.d_model, dtype=np.float32))
            for name in ("q", "k", "v", "o"):
                p[pre + name] = w(cfg.d_model, cfg.d_model)
            p[pre + "ffn_norm"] = Tensor(np.ones(cfg.d_model, dtype=np.float32))
            p[pre + "ffn_gate"] = w(cfg.d_ff, cfg.d_model)
            p[pre + "ffn_up"] = w(cfg.d_ff, cfg.d_model)
            p[pre + "ffn_down"] = w(cfg.d_model, cfg.d_ff)
        p["llm.final_norm"] = Tensor(np.ones(cfg.d_model, dtype=np.float32))
        # wider readout than the hidden layers: a 0.02-scale frozen head
        # caps attainable logit range (hiddens are RMS-normed) and floors
        # the LM loss far above what adapter training can reach
        head_scale = 0.25 / np.sqrt(cfg.d_model)
        p["llm.head"] = Tensor((head_scale * rng.standard_normal((cfg.vocab, cfg.d_model))).astype(np.float32))
        for name, t in p.items():
            t.name = name
        return cls(cfg, p)

    def embed_tokens(self, ids):
        return T.embedding(self.params["llm.embed"], ids)

    def _linear(self, x, block, layer, adapters):
        y = T.matmul(x, T.transpose(self.params[f"llm.blocks.{block}.{layer}"]))
        if adapters is not None:
            delta = adapters.delta(x, block, layer)
            if delta is not None:
                y = y + delta
        return y

    def forward(self, embedded, mask, adapters=None, collect_taps=True):
        """Run the stack on already-embedded inputs.

        embedded: Tensor [S, d] or [B, S, d] with vision embeddings
        spliced in at the vision span. mask: additive [S, S] (or
        broadcastable to [B, heads, S, S]). Returns (logits, taps);
        taps hold the post-residual outputs of blocks 0..n_vit-1.
        """
        cfg = self.cfg
        squeeze = embedded.data.ndim == 2
        x = T.reshape(embedded, (1,) + embedded.data.shape) if squeeze else embedded
        b, s, d = x.data.shape
        if s > cfg.max_seq:
            raise SequenceTooLong(f"sequence length {s} exceeds max_seq {cfg.max_seq}")
        if mask.ndim == 2:
            mask = mask[None, None, :, :]
        elif mask.ndim == 3:
            mask = mask[:, None, :, :]
        cos, sin = rope_tables(s, cfg.head_dim)
        cos_t, sin_t = T.constant(cos), T.constant(sin)
        inv_sqrt = 1.0 / np.sqrt(cfg.head_dim)

        taps = []
        for i in range(cfg.n_llm):
            h = T.rms_norm(x, self.params[f"llm.blocks.{i}.attn_norm"], eps=1e-6)
            q = self._split_heads(self._linear(h, i, "q", adapters), b, s)
            k = self._split_heads(self._linear(h, i, "k", adapters), b, s)
            v = self._split_heads(self._linear(h, i, "v", adapters), b, s)
            q = _apply_rope(q, cos_t, sin_t)
            k = _apply_rope(k, cos_t, sin_t)
            scores = T.scale(T.matmul(q, T.swap(k, -1, -2)), inv_sqrt)
            probs = T.softmax_rows(scores, mask)
            ctx = T.reshape(T.swap(T.matmul(probs, v), 1, 2), (b, s, d))
            x = x + self._linear(ctx, i, "o", adapters)

            h = T.rms_norm(x, self.params[f"llm.blocks.{i}.ffn_norm"], eps=1e-6)
            gate = self._linear(h, i, "ffn_gate", adapters)
            up = self._linear(h, i, "ffn_up", adapters)
            x = x + self._linear(T.mul(T.silu(gate), up), i, "ffn_down", adapters)

            if collect_taps and i < cfg.n_vit:
                tap = T.reshape(x, (s, d)) if squeeze else x
                taps.append(BlockTap(block_index=i, hidden=tap))

        xn = T.rms_norm(x, self.params["llm.final_norm"], eps=1e-6)
        logits = T.matmul(xn, T.transpose(self.params["llm.head"]))
        if squeeze:
            logits = T.reshape(logits, (s, cfg.vocab))
        return logits, taps

    def _split_heads(self, x, b, s):
        cfg = self.cfg
        return T.swap(T.reshape(x, (b, s, cfg.n_heads, cfg.head_dim)), 1, 2)


def decode_greedy(model, prefix_embedded, layout, eos_id, max_new, adapters=None, mask_mode="hybrid"):
    """Argmax decoding from an embedded prompt; stops at EOS or max_new.

    Returns the generated ids (EOS included when it terminated the loop).
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    v0, v1 = layout.vision_span
    emb = prefix_embedded
    out = []
    with T.no_grad():
        for _ in range(max_new):
            length = emb.data.shape[0]
            lay = SequenceLayout((v0, v1), (v1, length), supervise_from=length)
            mask = build_attention_mask(lay, length, mask_mode)
            logits, _ = model.forward(emb, mask, adapters, collect_taps=False)
            nxt = int(np.argmax(logits.data[-1]))
            out.append(nxt)
            if nxt == eos_id:
                break
            emb = T.concat([emb, model.embed_tokens([nxt])], axis=0)
    return out
