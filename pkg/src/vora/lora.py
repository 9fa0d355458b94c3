"""Low-rank adapters for the first n_vit blocks: creation, forward delta,
exact merge into the base weights, parameter accounting.

Every adapter starts with b = 0 so a freshly attached model computes
exactly the base model's outputs.
"""

import numpy as np

from . import tensor as T
from .model import LAYER_NAMES, ConfigError
from .tensor import Tensor


class MergeStateError(RuntimeError):
    pass


class LoraAdapter:
    """Rank-r pair (a, b) for one targeted linear layer.

    a: [rank, d_in] small-random; b: [d_out, rank] zero at creation, so
    the initial delta (alpha/rank) * b @ a is exactly zero.
    """

    __slots__ = ("a", "b", "rank", "alpha", "target")

    def __init__(self, a, b, rank, alpha, target):
        self.a = a
        self.b = b
        self.rank = rank
        self.alpha = alpha
        self.target = target  # (block_index, layer_name)

    @property
    def scaling(self):
        return self.alpha / self.rank


def _layer_dims(cfg, layer):
    if layer in ("q", "k", "v", "o"):
        return cfg.d_model, cfg.d_model
    if layer in ("ffn_gate", "ffn_up"):
        return cfg.d_model, cfg.d_ff
    if layer == "ffn_down":
        return cfg.d_ff, cfg.d_model
    raise ValueError(f"unknown layer {layer!r}")


class AdapterSet:
    """All adapters of a model, keyed by (block, layer); tracks merge state."""

    def __init__(self, adapters):
        self.adapters = adapters
        self.merged = False

    def __len__(self):
        return len(self.adapters)

    def __iter__(self):
        return iter(self.adapters.values())

    def get(self, block, layer):
        return self.adapters.get((block, layer))

    def tensors(self):
        out = {}
        for (block, layer), ad in sorted(self.adapters.items()):
            out[f"lora.{block}.{layer}.a"] = ad.a
            out[f"lora.{block}.{layer}.b"] = ad.b
        return out

    def delta(self, x, block, layer):
        """Low-rank forward contribution (alpha/rank) * (x a^T) b^T, or None."""
        if self.merged:
            return None
        ad = self.adapters.get((block, layer))
        if ad is None:
            return None
        return T.scale(T.matmul(T.matmul(x, T.transpose(ad.a)), T.transpose(ad.b)), ad.scaling)


def attach(cfg, seed=0):
    """One adapter per targeted linear layer in blocks 0..n_vit-1."""
    rng = np.random.default_rng(seed)
    adapters = {}
    for block in range(cfg.n_vit):
        for layer in LAYER_NAMES:
            d_in, d_out = _layer_dims(cfg, layer)
            if cfg.rank >= min(d_in, d_out):
                raise ConfigError(
                    f"rank {cfg.rank} >= min(d_in, d_out) = {min(d_in, d_out)} at block {block} layer {layer}"
                )
            a = Tensor((0.02 * rng.standard_normal((cfg.rank, d_in))).astype(np.float32),
                       requires_grad=True, name=f"lora.{block}.{layer}.a")
            b = Tensor(np.zeros((d_out, cfg.rank), dtype=np.float32),
                       requires_grad=True, name=f"lora.{block}.{layer}.b")
            adapters[(block, layer)] = LoraAdapter(a, b, cfg.rank, cfg.alpha, (block, layer))
    return AdapterSet(adapters)


def lora_forward(x, base_w, adapter):
    """y = x base_w^T + (alpha/rank) (x a^T) b^T; base_w takes no gradient."""
    if x.data.shape[-1] != base_w.data.shape[-1]:
        raise T.ShapeError(f"lora_forward shape mismatch: {x.data.shape} x {base_w.data.shape}")
    y = T.matmul(x, T.transpose(base_w))
    delta = T.scale(T.matmul(T.matmul(x, T.transpose(adapter.a)), T.transpose(adapter.b)), adapter.scaling)
    return y + delta


def merge_adapter(base_w, adapter):
    """base_w + (alpha/rank) b a, accumulated in float64, rounded to f32.

    A zero delta leaves the base bytes untouched.
    """
    delta = adapter.scaling * (adapter.b.data.astype(np.float64) @ adapter.a.data.astype(np.float64))
    if not np.any(delta):
        return base_w.data.copy()
    return (base_w.data.astype(np.float64) + delta).astype(np.float32)


def merge_all(model, adapter_set):
    """Fold every adapter into its base weight in place; one-shot only."""
    if adapter_set.merged:
        raise MergeStateError("adapters already merged")
    for (block, layer), ad in sorted(adapter_set.adapters.items()):
        w = model.params[f"llm.blocks.{block}.{layer}"]
        w.data = merge_adapter(w, ad)
    adapter_set.merged = True


def adapter_param_count(cfg):
    total = 0
    for _ in range(cfg.n_vit):
        for layer in LAYER_NAMES:
            d_in, d_out = _layer_dims(cfg, layer)
            total += cfg.rank * (d_in + d_out)
    return total


def param_count(cfg, include_vision_embed=False, include_aux_heads=False):
    """Trainable parameter count: adapters, plus extras when requested."""
    total = adapter_param_count(cfg)
    if include_vision_embed:
        patch_in = cfg.patch * cfg.patch * 3
        total += cfg.vembed_hidden * patch_in + cfg.d_model * cfg.vembed_hidden
    if include_aux_heads:
        total += cfg.n_vit * (cfg.d_model + cfg.d_vit * cfg.d_model)
    return total
