"""Flat key=value run configuration.

One ``key=value`` per line, ``#`` starts a comment, unknown keys are
errors. Every key has a documented default except ``seed``, which must
be set explicitly: all randomness flows from it. ``normalize`` renders
the resolved config in a canonical form that parses back identically.
"""

from dataclasses import dataclass

from .data import DataConfig
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigFileError(ValueError):
    pass


def _bool(raw):
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _str_list(raw):
    return tuple(x.strip() for x in raw.split(",") if x.strip())


def _int_list(raw):
    return tuple(int(x) for x in _str_list(raw))


def _float_list(raw):
    return tuple(float(x) for x in _str_list(raw))


# key -> (default, parser, help). A None default marks a required key.
SCHEMA = {
    # model
    "n_llm": (6, int, "student block count"),
    "n_vit": (4, int, "teacher block count (= distilled student blocks)"),
    "d_model": (64, int, "student width"),
    "d_vit": (48, int, "teacher width"),
    "n_heads": (4, int, "student attention heads"),
    "d_ff": (256, int, "student FFN inner width"),
    "vocab": (200, int, "vocabulary size (builtin vocabulary has 200)"),
    "patch": (8, int, "patch edge length, pixels"),
    "rank": (8, int, "adapter rank"),
    "alpha": (0.0, float, "adapter scale; 0 means alpha = rank"),
    "max_seq": (160, int, "packing limit"),
    "vembed_hidden": (0, int, "vision-embed hidden width; 0 means d_model/2"),
    "vit_heads": (4, int, "teacher attention heads"),
    "vit_ff": (0, int, "teacher FFN inner width; 0 means 4*d_vit"),
    # training
    "lr": (2e-4, float, "learning rate (constant after warmup)"),
    "warmup_steps": (100, int, "linear warmup length"),
    "batch_size": (16, int, "sequences per step"),
    "total_steps": (500, int, "optimizer steps; 0 writes the init checkpoint only"),
    "mode": ("pretrain", str, "pretrain | finetune | full_llm_unstable"),
    "distill_mode": ("block_wise", str, "none | last_block | block_wise"),
    "mask_mode": ("hybrid", str, "hybrid | causal"),
    "seed": (None, int, "root seed; required, no default"),
    "weight_decay": (0.01, float, "decoupled decay (0 on norms/embedding)"),
    "log_window": (100, int, "smoothing window for loss curves"),
    "teacher_warm": (False, _bool, "briefly train the teacher before freezing"),
    "teacher_warm_steps": (200, int, "teacher warm-up steps"),
    "distill_weight": (1.0, float, "ablation-only scale on the distill term (1 = the plain sum)"),
    # data
    "image_fraction": (0.82, float, "share of image-caption samples per batch"),
    "resolution_h": (32, int, "image height (fixed-resolution mode)"),
    "resolution_w": (32, int, "image width (fixed-resolution mode)"),
    "anyres": (False, _bool, "sample a random patch-multiple resolution per image"),
    "anyres_min": (16, int, "smallest anyres edge, pixels"),
    "anyres_max": (48, int, "largest anyres edge, pixels"),
    # evaluation
    "eval_captions": (8, int, "held-out caption samples"),
    "eval_texts": (8, int, "held-out text samples"),
    "eval_max_new": (24, int, "decode budget per caption"),
    # ablation
    "ablate_masks": (("hybrid",), _str_list, "mask modes in the ablation grid"),
    "ablate_distills": (("none", "block_wise"), _str_list, "distill modes in the grid"),
    "ablate_ranks": ((8,), _int_list, "adapter ranks in the grid"),
    "thresholds": ((4.8, 4.4, 4.0), _float_list, "LM-loss thresholds to scan"),
    "ablate_steps": (400, int, "training budget per ablation cell"),
}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def model_config(self):
        v = self.values
        return ModelConfig(
            n_llm=v["n_llm"], n_vit=v["n_vit"], d_model=v["d_model"], d_vit=v["d_vit"],
            n_heads=v["n_heads"], d_ff=v["d_ff"], vocab=v["vocab"], patch=v["patch"],
            rank=v["rank"], alpha=v["alpha"], max_seq=v["max_seq"],
            vembed_hidden=v["vembed_hidden"], vit_heads=v["vit_heads"], vit_ff=v["vit_ff"],
        )

    def train_config(self, mode=None):
        v = self.values
        return TrainConfig(
            lr=v["lr"], warmup_steps=v["warmup_steps"], batch_size=v["batch_size"],
            total_steps=v["total_steps"], mode=mode or v["mode"],
            distill_mode=v["distill_mode"], mask_mode=v["mask_mode"], rank=v["rank"],
            seed=v["seed"], weight_decay=v["weight_decay"], log_window=v["log_window"],
            teacher_warm=v["teacher_warm"], teacher_warm_steps=v["teacher_warm_steps"],
            distill_weight=v["distill_weight"],
        )

    def data_config(self):
        v = self.values
        return DataConfig(
            image_fraction=v["image_fraction"],
            resolution=(v["resolution_h"], v["resolution_w"]),
            patch=v["patch"], anyres=v["anyres"],
            anyres_min=v["anyres_min"], anyres_max=v["anyres_max"],
        )


def parse_text(text, source="<config>"):
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in SCHEMA:
            raise ConfigFileError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigFileError(f"{source}:{lineno}: duplicate key {key!r}")
        if not value:
            raise ConfigFileError(f"{source}:{lineno}: missing value for key {key!r}")
        default, caster, _ = SCHEMA[key]
        try:
            seen[key] = caster(value)
        except (TypeError, ValueError) as exc:
            raise ConfigFileError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
    values = {}
    for key, (default, _, _) in SCHEMA.items():
        if key in seen:
            values[key] = seen[key]
        elif default is None:
            raise ConfigFileError(f"{source}: missing required key 'seed'")
        else:
            values[key] = default
    return RunConfig(values)


def parse_file(path):
    try:
        with open(path) as f:
            return parse_text(f.read(), source=str(path))
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc}") from exc


def _render(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def normalize(cfg):
    """Canonical text form; parses back to an identical RunConfig."""
    lines = [f"{key}={_render(cfg.values[key])}" for key in sorted(cfg.values)]
    return "\n".join(lines) + "\n"
