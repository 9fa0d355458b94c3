"""Vision side: patchification, the shallow-MLP embedding layer with a
resolution-agnostic 2-D sinusoidal positional encoding, and the frozen
toy ViT teacher that exposes per-block hidden states.

The teacher has no CLS token, so student and teacher sequences align
one-to-one at every patch position.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class PatchError(ValueError):
    pass


@dataclass
class Image:
    """HWC float pixels in [0, 1]."""

    pixels: np.ndarray  # [H, W, 3] float32

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise PatchError(f"expected [H, W, 3] pixels, got {self.pixels.shape}")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


def patchify(image, patch):
    """[S, patch*patch*3] rows, row-major over the (H/p, W/p) grid.

    Each row is one flattened patch (HWC order within the patch).
    """
    px = image.pixels if isinstance(image, Image) else np.asarray(image, dtype=np.float32)
    h, w, _ = px.shape
    if h % patch:
        raise PatchError(f"height {h} not divisible by patch {patch}")
    if w % patch:
        raise PatchError(f"width {w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    tiles = px.reshape(gh, patch, gw, patch, 3).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(tiles.reshape(gh * gw, patch * patch * 3))


def sincos_grid(rows, cols, dim):
    """Factorized 2-D sinusoidal encoding [rows*cols, dim], row-major.

    First half of the channels encodes the row index, second half the
    column index, each with a standard 1-D sin/cos ladder. Defined for
    any grid, so any patch-divisible resolution works.
    """
    half = dim // 2

    def ladder(pos, n, d):
        quarter = d // 2
        freq = 1.0 / 10000.0 ** (np.arange(quarter) / max(quarter, 1))
        ang = pos[:, None] * freq[None, :]
        out = np.zeros((n, d), dtype=np.float32)
        out[:, :quarter] = np.sin(ang)
        out[:, quarter : 2 * quarter] = np.cos(ang)
        return out

    r = np.repeat(np.arange(rows), cols).astype(np.float64)
    c = np.tile(np.arange(cols), rows).astype(np.float64)
    pe = np.zeros((rows * cols, dim), dtype=np.float32)
    pe[:, :half] = ladder(r, rows * cols, half)
    pe[:, half:] = ladder(c, rows * cols, dim - half)
    return pe


class VisionEmbed:
    """Two-layer MLP (GELU between) projecting patches to model width,
    plus the parameter-free positional term."""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg, seed=0):
        rng = np.random.default_rng(seed)
        patch_in = cfg.patch * cfg.patch * 3
        p = {
            "vembed.fc1": Tensor((0.02 * rng.standard_normal((cfg.vembed_hidden, patch_in))).astype(np.float32),
                                 requires_grad=True, name="vembed.fc1"),
            "vembed.fc2": Tensor((0.02 * rng.standard_normal((cfg.d_model, cfg.vembed_hidden))).astype(np.float32),
                                 requires_grad=True, name="vembed.fc2"),
        }
        return cls(cfg, p)

    def forward(self, patches, grid):
        """patches [S, patch*patch*3] or [n, S, patch*patch*3] (Tensor or
        array), grid (rows, cols)."""
        rows, cols = grid
        pt = patches if isinstance(patches, Tensor) else T.constant(np.asarray(patches, dtype=np.float32))
        s = pt.data.shape[-2]
        if s != rows * cols:
            raise PatchError(f"{s} patches but grid {rows}x{cols}")
        h = T.gelu(T.matmul(pt, T.transpose(self.params["vembed.fc1"])))
        y = T.matmul(h, T.transpose(self.params["vembed.fc2"]))
        return y + T.constant(sincos_grid(rows, cols, self.cfg.d_model))

    def param_count(self):
        return sum(p.data.size for p in self.params.values())


class Teacher:
    """Frozen toy ViT: patch embed + sinusoidal positions, pre-norm blocks
    with bi-directional attention and a GELU MLP; per-block outputs are
    the distillation targets. All parameters have requires_grad False and
    the forward runs with the tape disabled."""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg, seed=100):
        rng = np.random.default_rng(seed)

        def w(name, *shape):
            return Tensor((0.02 * rng.standard_normal(shape)).astype(np.float32), name=name)

        patch_in = cfg.patch * cfg.patch * 3
        p = {"teacher.patch_embed": w("teacher.patch_embed", cfg.d_vit, patch_in)}
        for i in range(cfg.n_vit):
            pre = f"teacher.blocks.{i}."
            p[pre + "attn_norm"] = Tensor(np.ones(cfg.d_vit, dtype=np.float32), name=pre + "attn_norm")
            for name in ("q", "k", "v", "o"):
                p[pre + name] = w(pre + name, cfg.d_vit, cfg.d_vit)
            p[pre + "ffn_norm"] = Tensor(np.ones(cfg.d_vit, dtype=np.float32), name=pre + "ffn_norm")
            p[pre + "fc1"] = w(pre + "fc1", cfg.vit_ff, cfg.d_vit)
            p[pre + "fc2"] = w(pre + "fc2", cfg.d_vit, cfg.vit_ff)
        return cls(cfg, p)

    def blocks_forward(self, x):
        """Stack body on [B, S, d_vit]; caller controls the tape."""
        cfg = self.cfg
        b, s, _ = x.data.shape
        heads, hd = cfg.vit_heads, cfg.d_vit // cfg.vit_heads
        zero_mask = np.zeros((s, s), dtype=np.float32)  # bi-directional
        states = []
        for i in range(cfg.n_vit):
            pre = f"teacher.blocks.{i}."
            h = T.rms_norm(x, self.params[pre + "attn_norm"], eps=1e-6)
            q = T.swap(T.reshape(T.matmul(h, T.transpose(self.params[pre + "q"])), (b, s, heads, hd)), 1, 2)
            k = T.swap(T.reshape(T.matmul(h, T.transpose(self.params[pre + "k"])), (b, s, heads, hd)), 1, 2)
            v = T.swap(T.reshape(T.matmul(h, T.transpose(self.params[pre + "v"])), (b, s, heads, hd)), 1, 2)
            scores = T.scale(T.matmul(q, T.swap(k, -1, -2)), 1.0 / np.sqrt(hd))
            probs = T.softmax_rows(scores, zero_mask)
            ctx = T.reshape(T.swap(T.matmul(probs, v), 1, 2), (b, s, cfg.d_vit))
            x = x + T.matmul(ctx, T.transpose(self.params[pre + "o"]))
            h = T.rms_norm(x, self.params[pre + "ffn_norm"], eps=1e-6)
            h = T.matmul(T.gelu(T.matmul(h, T.transpose(self.params[pre + "fc1"]))),
                         T.transpose(self.params[pre + "fc2"]))
            x = x + h
            states.append(x)
        return states

    def embed_patches(self, patches, grid):
        rows, cols = grid
        pt = patches if isinstance(patches, Tensor) else T.constant(np.asarray(patches, dtype=np.float32))
        x = T.matmul(pt, T.transpose(self.params["teacher.patch_embed"]))
        return x + T.constant(sincos_grid(rows, cols, self.cfg.d_vit))

    def forward_batch(self, images):
        """Per-block states for same-resolution images: list (length n_vit)
        of [B, S, d_vit] arrays, gradient-free."""
        patch = self.cfg.patch
        stacks = []
        grid = None
        for image in images:
            px = image.pixels if isinstance(image, Image) else image
            g = (px.shape[0] // patch, px.shape[1] // patch)
            if grid is None:
                grid = g
            elif g != grid:
                raise PatchError("forward_batch needs a uniform resolution")
            stacks.append(patchify(image, patch))
        with T.no_grad():
            pe = sincos_grid(grid[0], grid[1], self.cfg.d_vit)
            pt = T.constant(np.stack(stacks))
            x = T.matmul(pt, T.transpose(self.params["teacher.patch_embed"])) + T.constant(pe)
            states = self.blocks_forward(x)
        return [st.data for st in states]

    def forward(self, image):
        """Per-block hidden states for one image: list of [S, d_vit] arrays."""
        return [st[0] for st in self.forward_batch([image])]
