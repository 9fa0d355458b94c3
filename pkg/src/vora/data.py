"""Deterministic synthetic data: rendered shape scenes with
grammar-generated captions, templated text QA, a fixed word-level
vocabulary, and batch packing with modality mixing.

Everything is a pure function of (seed, index); the held-out pool lives
in a disjoint index range.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .model import SequenceLayout
from .vision import Image

# ---------------------------------------------------------------------------
# vocabulary

COLOR_NAMES = ("red", "blue", "green", "yellow", "purple", "orange", "pink", "brown", "gray", "cyan")
SHAPE_NAMES = ("circle", "square", "triangle")
SIZE_NAMES = ("tiny", "small", "large", "huge")
NUMBER_WORDS = (
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
    "nineteen", "twenty",
)

_WORD_GROUPS = (
    ("<pad>", "<bos>", "<eos>", "<img>"),
    COLOR_NAMES,
    SHAPE_NAMES,
    ("circles", "squares", "triangles"),
    SIZE_NAMES,
    ("left", "right", "above", "below", "of", "beside", "between", "inside"),
    ("a", "an", "the", "and", "is", "are", "on", "in", "with", "to", "there", "it", "this", "that"),
    NUMBER_WORDS,
    ("what", "plus", "minus", "times", "equals", "repeat", "reverse", "say", "answer", "question", "how", "many"),
    (":", "?"),
    ("image", "picture", "background", "object", "objects", "shape", "color", "colors", "count",
     "number", "word", "words", "sentence", "text", "token", "tokens", "letter", "letters", "line",
     "lines", "grid", "row", "column", "corner", "edge", "side", "center", "middle", "top", "bottom"),
    ("big", "little", "dark", "light", "bright", "pale", "solid", "empty", "full", "wide", "tall",
     "short", "round", "flat", "thick", "thin", "deep", "high", "low", "new", "old", "good", "bad",
     "same", "different", "plain"),
    ("over", "under", "before", "after", "at", "by", "from", "for", "near", "far", "first", "last",
     "next", "then"),
    ("second", "third", "fourth", "when", "where", "which", "who", "why"),
    ("has", "have", "had", "contains", "shows", "show", "draw", "drawn", "placed", "located", "see",
     "look", "find", "tell", "give", "made"),
    ("yes", "no", "true", "false", "not", "or", "if", "than", "so", "because"),
    ("up", "down", "out", "off", "again", "once", "twice", "every", "each", "all", "some", "none",
     "both", "very", "most"),
)

VOCAB = tuple(w for group in _WORD_GROUPS for w in group)
assert len(VOCAB) == len(set(VOCAB)) == 200, f"vocabulary drifted: {len(VOCAB)} words"
TOKEN_TO_ID = {w: i for i, w in enumerate(VOCAB)}
PAD, BOS, EOS, IMG = (TOKEN_TO_ID[w] for w in ("<pad>", "<bos>", "<eos>", "<img>"))
VOCAB_SIZE = len(VOCAB)


def encode(words):
    if isinstance(words, str):
        words = words.split()
    return [TOKEN_TO_ID[w] for w in words]


def decode(ids):
    return " ".join(VOCAB[i] for i in ids)


# ---------------------------------------------------------------------------
# samples

@dataclass
class Sample:
    modality: str  # "image_caption" | "text_only"
    image: Image | None
    prompt_tokens: list
    answer_tokens: list

    def __post_init__(self):
        if (self.image is not None) != (self.modality == "image_caption"):
            raise ValueError("image present iff modality == image_caption")
        if not self.answer_tokens:
            raise ValueError("answer must be nonempty")


PALETTE = np.array(
    [
        (0.90, 0.10, 0.10),  # red
        (0.10, 0.20, 0.90),  # blue
        (0.10, 0.80, 0.20),  # green
        (0.95, 0.90, 0.10),  # yellow
        (0.60, 0.15, 0.80),  # purple
        (0.95, 0.55, 0.10),  # orange
        (0.95, 0.55, 0.75),  # pink
        (0.55, 0.35, 0.15),  # brown
        (0.50, 0.50, 0.50),  # gray
        (0.10, 0.85, 0.90),  # cyan
    ],
    dtype=np.float32,
)
BACKGROUND = np.float32(0.92)

MIN_EDGE = 8
MAX_EDGE = 96


@dataclass
class SceneShape:
    kind: int  # index into SHAPE_NAMES
    color: int  # index into PALETTE / COLOR_NAMES
    cx: float
    cy: float
    radius: float


def _relation_tokens(first, second):
    dx = second.cx - first.cx
    dy = second.cy - first.cy
    if abs(dx) >= abs(dy):
        return ["left", "of"] if dx > 0 else ["right", "of"]
    return ["above"] if dy > 0 else ["below"]


def caption_tokens(shapes):
    """Fixed grammar over the scene graph; pure function of the shapes."""
    words = ["a", COLOR_NAMES[shapes[0].color], SHAPE_NAMES[shapes[0].kind]]
    if len(shapes) >= 2:
        words += _relation_tokens(shapes[0], shapes[1])
        words += ["a", COLOR_NAMES[shapes[1].color], SHAPE_NAMES[shapes[1].kind]]
    for extra in shapes[2:]:
        words += ["and", "a", COLOR_NAMES[extra.color], SHAPE_NAMES[extra.kind]]
    return words


def render_scene(shapes, height, width):
    """Hard-edged rasterization onto a plain background."""
    px = np.full((height, width, 3), BACKGROUND, dtype=np.float32)
    yy, xx = np.mgrid[0:height, 0:width]
    yy = yy + 0.5
    xx = xx + 0.5
    for sh in shapes:
        if sh.kind == 0:  # circle
            mask = (xx - sh.cx) ** 2 + (yy - sh.cy) ** 2 <= sh.radius**2
        elif sh.kind == 1:  # square
            mask = np.maximum(np.abs(xx - sh.cx), np.abs(yy - sh.cy)) <= 0.9 * sh.radius
        else:  # triangle, apex up
            mask = (yy >= sh.cy - sh.radius) & (yy <= sh.cy + sh.radius)
            mask &= np.abs(xx - sh.cx) <= (yy - (sh.cy - sh.radius)) / 2.0
        px[mask] = PALETTE[sh.color]
    return px


def make_scene(rng, height, width, n_shapes=None):
    """Place 1-4 distinctly-colored shapes on a 2x2 cell grid (no overlap)."""
    n = int(rng.integers(1, 5)) if n_shapes is None else n_shapes
    cells = rng.permutation(4)[:n]
    colors = rng.choice(len(PALETTE), size=n, replace=False)
    kinds = rng.integers(0, len(SHAPE_NAMES), size=n)
    cell_h, cell_w = height / 2.0, width / 2.0
    shapes = []
    for cell, color, kind in zip(cells, colors, kinds):
        r, c = divmod(int(cell), 2)
        jitter_y = rng.uniform(-0.08, 0.08) * cell_h
        jitter_x = rng.uniform(-0.08, 0.08) * cell_w
        cy = r * cell_h + cell_h / 2.0 + jitter_y
        cx = c * cell_w + cell_w / 2.0 + jitter_x
        radius = rng.uniform(0.22, 0.38) * min(cell_h, cell_w)
        shapes.append(SceneShape(int(kind), int(color), float(cx), float(cy), float(radius)))
    return shapes


def gen_image_caption(seed, resolution=(32, 32), patch=8):
    """Deterministic scene + caption; same seed gives identical pixels."""
    h, w = resolution
    if h % patch or w % patch:
        raise ValueError(f"resolution {resolution} not a multiple of patch {patch}")
    if not (MIN_EDGE <= h <= MAX_EDGE and MIN_EDGE <= w <= MAX_EDGE):
        raise ValueError(f"resolution {resolution} out of bounds [{MIN_EDGE}, {MAX_EDGE}]")
    rng = np.random.default_rng([seed, 1])
    shapes = make_scene(rng, h, w)
    image = Image(render_scene(shapes, h, w))
    return Sample(
        modality="image_caption",
        image=image,
        prompt_tokens=[BOS],
        answer_tokens=encode(caption_tokens(shapes)),
    )


_CONTENT_POOL = COLOR_NAMES + SHAPE_NAMES + SIZE_NAMES


def gen_text_sample(seed):
    """Templated QA with a deterministic answer (results stay in 0..20)."""
    rng = np.random.default_rng([seed, 2])
    kind = int(rng.integers(0, 5))
    if kind == 0:  # addition
        a = int(rng.integers(0, 21))
        b = int(rng.integers(0, 21 - a))
        prompt = ["what", "is", NUMBER_WORDS[a], "plus", NUMBER_WORDS[b]]
        answer = [NUMBER_WORDS[a + b]]
    elif kind == 1:  # subtraction
        a = int(rng.integers(0, 21))
        b = int(rng.integers(0, a + 1))
        prompt = ["what", "is", NUMBER_WORDS[a], "minus", NUMBER_WORDS[b]]
        answer = [NUMBER_WORDS[a - b]]
    elif kind == 2:  # multiplication
        a = int(rng.integers(0, 7))
        b = int(rng.integers(0, 21 if a == 0 else 20 // a + 1))
        prompt = ["what", "is", NUMBER_WORDS[a], "times", NUMBER_WORDS[b]]
        answer = [NUMBER_WORDS[a * b]]
    elif kind == 3:  # copy
        k = int(rng.integers(1, 4))
        words = [str(w) for w in rng.choice(_CONTENT_POOL, size=k, replace=False)]
        prompt = ["repeat", ":"] + words
        answer = list(words)
    else:  # reversal
        k = int(rng.integers(1, 4))
        words = [str(w) for w in rng.choice(_CONTENT_POOL, size=k, replace=False)]
        prompt = ["reverse", ":"] + words
        answer = list(reversed(words))
    return Sample(
        modality="text_only",
        image=None,
        prompt_tokens=[BOS] + encode(prompt),
        answer_tokens=encode(answer),
    )


# ---------------------------------------------------------------------------
# batching

HELDOUT_BASE = 1 << 30  # held-out samples draw seeds at or above this


@dataclass
class DataConfig:
    image_fraction: float = 0.82
    resolution: tuple = (32, 32)
    patch: int = 8
    anyres: bool = False
    anyres_min: int = 16
    anyres_max: int = 48


@dataclass
class PackedBatch:
    tokens: np.ndarray  # [B, S] int64, IMG in vision spans, PAD tail
    layouts: list
    images: list  # Image | None per sequence; image samples come first
    grids: list  # (rows, cols) | None per sequence
    n_image: int


def _pick_resolution(rng, dcfg):
    if not dcfg.anyres:
        return dcfg.resolution
    lo = max(1, dcfg.anyres_min // dcfg.patch)
    hi = max(lo, dcfg.anyres_max // dcfg.patch)
    h = int(rng.integers(lo, hi + 1)) * dcfg.patch
    w = int(rng.integers(lo, hi + 1)) * dcfg.patch
    return (h, w)


def pack_samples(samples, patch, max_seq):
    """[IMG-span][prompt][answer][EOS] per sequence, PAD to the batch max."""
    rows = []
    layouts = []
    images = []
    grids = []
    for sample in samples:
        if sample.image is not None:
            grid = (sample.image.height // patch, sample.image.width // patch)
            s_v = grid[0] * grid[1]
        else:
            grid, s_v = None, 0
        ids = [IMG] * s_v + list(sample.prompt_tokens) + list(sample.answer_tokens) + [EOS]
        if len(ids) > max_seq:
            raise ValueError(f"packed length {len(ids)} exceeds max_seq {max_seq}")
        layouts.append(SequenceLayout((0, s_v), (s_v, len(ids)), s_v + len(sample.prompt_tokens)))
        rows.append(ids)
        images.append(sample.image)
        grids.append(grid)
    s_max = max(len(r) for r in rows)
    tokens = np.full((len(rows), s_max), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        tokens[i, : len(r)] = r
    return PackedBatch(tokens=tokens, layouts=layouts, images=images, grids=grids,
                       n_image=sum(im is not None for im in images))


def make_batch(rng, batch_size, image_fraction=None, dcfg=None, max_seq=160, heldout=False):
    """Draw a packed batch; image samples first, counts match the fraction
    within rounding. ``rng`` drives both sample selection and resolutions."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    dcfg = dcfg or DataConfig()
    frac = dcfg.image_fraction if image_fraction is None else image_fraction
    if not 0.0 <= frac <= 1.0:
        raise ValueError("image_fraction must lie in [0, 1]")
    n_img = int(round(batch_size * frac))
    base = HELDOUT_BASE if heldout else 0
    samples = []
    for i in range(batch_size):
        idx = base + int(rng.integers(0, HELDOUT_BASE))
        if i < n_img:
            samples.append(gen_image_caption(idx, _pick_resolution(rng, dcfg), patch=dcfg.patch))
        else:
            samples.append(gen_text_sample(idx))
    return pack_samples(samples, dcfg.patch, max_seq)


def dump_dataset(out_dir, count, seed=0, dcfg=None):
    """Write a manifest + raw images for inspection / cross-checking.

    manifest.jsonl, one record per sample:
      index     int   sample position in the dump
      seed      int   generator seed of the sample
      modality  str   "image_caption" | "text_only"
      prompt    str   space-joined prompt words (without <bos>)
      answer    str   space-joined answer words
      height    int   image rows (image samples only)
      width     int   image cols (image samples only)
      image     str   relative path to raw pixels (image samples only)

    Raw image files are float32 little-endian, HWC row-major, values in
    [0, 1], exactly height*width*3 floats.
    """
    dcfg = dcfg or DataConfig()
    rng = np.random.default_rng([seed, 3])
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.jsonl"), "w") as mf:
        for i in range(count):
            idx = int(rng.integers(0, HELDOUT_BASE))
            if rng.random() < dcfg.image_fraction:
                sample = gen_image_caption(idx, _pick_resolution(rng, dcfg), patch=dcfg.patch)
            else:
                sample = gen_text_sample(idx)
            rec = {
                "index": i,
                "seed": idx,
                "modality": sample.modality,
                "prompt": decode(sample.prompt_tokens[1:]),
                "answer": decode(sample.answer_tokens),
            }
            if sample.image is not None:
                rel = f"images/{i}.rgb"
                rec.update(height=sample.image.height, width=sample.image.width, image=rel)
                with open(os.path.join(out_dir, rel), "wb") as imf:
                    imf.write(sample.image.pixels.astype("<f4").tobytes())
            mf.write(json.dumps(rec) + "\n")
