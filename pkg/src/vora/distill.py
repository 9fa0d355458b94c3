"""Feature-alignment objective: per-block projection heads, block-wise
cosine distillation loss, supervised-span LM loss, and their unweighted
sum. Also the last-block-only ablation variant.
"""

import numpy as np

from . import tensor as T
from .tensor import Tensor

DISTILL_MODES = ("none", "last_block", "block_wise")


class AuxHead:
    """RMS-norm + linear projection from model width to teacher width.

    One head per distilled block; trained during pre-training, discarded
    at fine-tune.
    """

    def __init__(self, block_index, norm_gain, proj):
        self.block_index = block_index
        self.norm_gain = norm_gain
        self.proj = proj

    @classmethod
    def init(cls, cfg, block_index, seed=0):
        rng = np.random.default_rng(seed)
        gain = Tensor(np.ones(cfg.d_model, dtype=np.float32), requires_grad=True,
                      name=f"aux.{block_index}.gain")
        proj = Tensor((0.02 * rng.standard_normal((cfg.d_vit, cfg.d_model))).astype(np.float32),
                      requires_grad=True, name=f"aux.{block_index}.proj")
        return cls(block_index, gain, proj)

    def forward(self, h):
        return T.matmul(T.rms_norm(h, self.norm_gain, eps=1e-6), T.transpose(self.proj))

    def tensors(self):
        return {self.norm_gain.name: self.norm_gain, self.proj.name: self.proj}


def init_heads(cfg, seed=0):
    return [AuxHead.init(cfg, i, seed=seed + 31 * i) for i in range(cfg.n_vit)]


def _cosine_rows(p, v):
    """Mean over rows of (1 - cos(p_row, v_row)); leading dims flattened."""
    dots = T.tsum(T.mul(p, v), axis=-1)
    pn = T.tsum(T.mul(p, p), axis=-1)
    vn = T.tsum(T.mul(v, v), axis=-1)
    if float(pn.data.min()) <= 0.0 or float(vn.data.min()) <= 0.0:
        raise ValueError("zero-norm vector: cosine undefined")
    cos = T.mul(dots, T.power(T.mul(pn, vn), -0.5))
    ones = T.constant(np.ones_like(cos.data))
    return T.tmean(ones - cos)


def block_distill_loss(h_llm, h_vit, head):
    """(1/S) sum_s (1 - cos(head(h_llm[s]), h_vit[s])); value in [0, 2].

    h_llm: Tensor [S, d_model] (or [B, S, d_model]) restricted to the
    vision span; h_vit: matching teacher states, treated as constant.
    """
    hv = h_vit if isinstance(h_vit, Tensor) else T.constant(np.asarray(h_vit, dtype=np.float32))
    if h_llm.data.shape[:-1] != hv.data.shape[:-1]:
        raise T.ShapeError(f"token counts differ: {h_llm.data.shape} vs {hv.data.shape}")
    return _cosine_rows(head.forward(h_llm), hv)


def distill_loss(taps, teacher_states, heads, mode):
    """Combine per-block losses per the distillation variant.

    block_wise: mean over blocks 0..n_vit-1; last_block: final distilled
    block only; none: exact 0 with no graph edges. ``taps`` entries must
    already be restricted to the vision span.
    """
    if mode not in DISTILL_MODES:
        raise ValueError(f"unknown distill mode {mode!r}")
    if mode == "none":
        return T.constant(np.zeros((), dtype=np.float32))
    n_vit = len(teacher_states)
    if len(taps) < n_vit:
        raise T.ShapeError(f"{len(taps)} taps for {n_vit} teacher blocks")
    if len(heads) < n_vit:
        raise T.ShapeError(f"{len(heads)} heads for {n_vit} teacher blocks")
    if mode == "last_block":
        i = n_vit - 1
        return block_distill_loss(taps[i].hidden, teacher_states[i], heads[i])
    total = None
    for i in range(n_vit):
        term = block_distill_loss(taps[i].hidden, teacher_states[i], heads[i])
        total = term if total is None else total + term
    return T.scale(total, 1.0 / n_vit)


def lm_loss(logits, layouts, tokens):
    """Next-token cross entropy over supervised positions only.

    logits: [B, S, V] or [S, V]; tokens: matching int array of packed
    ids; layouts: one SequenceLayout per sequence. Position t is
    supervised iff supervise_from <= t < text_end, predicted from
    logits at t-1.
    """
    squeeze = logits.data.ndim == 2
    lg = T.reshape(logits, (1,) + logits.data.shape) if squeeze else logits
    tok = np.asarray(tokens, dtype=np.int64)
    if squeeze:
        tok = tok[None, :]
    lays = [layouts] if not isinstance(layouts, (list, tuple)) else list(layouts)
    b, s, v = lg.data.shape
    live = np.zeros((b, s - 1), dtype=bool)
    for i, lay in enumerate(lays):
        t1 = lay.text_span[1]
        if lay.supervise_from >= t1:
            raise ValueError(f"no supervised positions in sequence {i}")
        if lay.supervise_from < 1:
            raise ValueError("position 0 cannot be supervised (nothing precedes it)")
        live[i, lay.supervise_from - 1 : t1 - 1] = True
    flat = T.reshape(T.slice_axis(lg, 1, 0, s - 1), (b * (s - 1), v))
    return T.cross_entropy(flat, tok[:, 1:].reshape(-1), ignore_mask=~live.reshape(-1))


def total_loss(distill, lm):
    """Unweighted sum of the two objectives."""
    return distill + lm
