"""Two-stage training: pre-training (frozen base; adapters + vision embed
+ aux heads trainable; distill + LM objective) and fine-tuning (adapters
merged; distillation removed; full model + vision embed trainable). Plus
AdamW, the ablation runner, held-out metrics, and the full-unfreeze
instability probe.
"""

import csv
import statistics
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as D
from . import distill, kernels, lora, vision
from . import tensor as T
from .model import BlockTap, Model, build_attention_mask, decode_greedy
from .tensor import Tensor

BETA1, BETA2 = 0.9, 0.999
ADAM_EPS = 1e-8

TRAIN_MODES = ("pretrain", "finetune", "full_llm_unstable")


class TrainAbort(RuntimeError):
    """Raised when the loss goes non-finite; carries the step diagnostics."""

    def __init__(self, step, lm, dist):
        super().__init__(f"non-finite loss at step {step}: lm={lm} distill={dist}")
        self.step = step
        self.lm = lm
        self.distill = dist


@dataclass
class TrainConfig:
    lr: float = 2e-4
    warmup_steps: int = 100
    batch_size: int = 16
    total_steps: int = 500
    mode: str = "pretrain"
    distill_mode: str = "block_wise"
    mask_mode: str = "hybrid"
    rank: int = 8
    seed: int = 0
    weight_decay: float = 0.01
    log_window: int = 100
    teacher_warm: bool = False
    teacher_warm_steps: int = 200
    distill_weight: float = 1.0  # ablation-only; the objective itself is the plain sum

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.distill_weight < 0:
            raise ValueError("distill_weight must be >= 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        # total_steps == 0 is the explicit no-op run (init checkpoint only)
        if self.total_steps != 0 and self.total_steps <= self.warmup_steps:
            raise ValueError("total_steps must exceed warmup_steps")
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.distill_mode not in distill.DISTILL_MODES:
            raise ValueError(f"unknown distill_mode {self.distill_mode!r}")
        if self.mask_mode not in ("hybrid", "causal"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")


@dataclass
class Pipeline:
    cfg: object
    model: Model
    adapters: object  # AdapterSet | None
    vembed: vision.VisionEmbed
    teacher: vision.Teacher
    heads: list


def build_pipeline(cfg, seed=0, teacher_warm=False, teacher_warm_steps=200):
    model = Model.init(cfg, seed=seed)
    adapters = lora.attach(cfg, seed=seed + 1)
    vembed = vision.VisionEmbed.init(cfg, seed=seed + 2)
    teacher = vision.Teacher.init(cfg, seed=seed + 3)
    if teacher_warm:
        warm_teacher(teacher, cfg, steps=teacher_warm_steps, seed=seed + 5)
    heads = distill.init_heads(cfg, seed=seed + 4)
    return Pipeline(cfg, model, adapters, vembed, teacher, heads)


def collect_state(pipe):
    """Every named tensor of the pipeline, for checkpointing."""
    tensors = {}
    tensors.update(pipe.model.params)
    if pipe.adapters is not None and not pipe.adapters.merged:
        tensors.update(pipe.adapters.tensors())
    tensors.update(pipe.vembed.params)
    tensors.update(pipe.teacher.params)
    for head in pipe.heads:
        tensors.update(head.tensors())
    return tensors


def pipeline_from_state(cfg, tensors, meta=None):
    """Rebuild a pipeline from checkpoint arrays (names as in collect_state)."""
    meta = meta or {}

    def wrap(name, trainable=False):
        return Tensor(np.array(tensors[name], dtype=np.float32), requires_grad=trainable, name=name)

    model_params = {n: wrap(n) for n in tensors if n.startswith("llm.")}
    model = Model(cfg, model_params)
    adapters = None
    if any(n.startswith("lora.") for n in tensors):
        ads = {}
        for block in range(cfg.n_vit):
            for layer in lora.LAYER_NAMES:
                a_name = f"lora.{block}.{layer}.a"
                if a_name not in tensors:
                    continue
                ads[(block, layer)] = lora.LoraAdapter(
                    wrap(a_name, True), wrap(f"lora.{block}.{layer}.b", True),
                    cfg.rank, cfg.alpha, (block, layer))
        adapters = lora.AdapterSet(ads)
        adapters.merged = meta.get("merged", "false") == "true"
    vembed = vision.VisionEmbed(cfg, {n: wrap(n, True) for n in ("vembed.fc1", "vembed.fc2")})
    teacher_params = {n: wrap(n) for n in tensors if n.startswith("teacher.")}
    teacher = vision.Teacher(cfg, teacher_params) if teacher_params else vision.Teacher.init(cfg, seed=103)
    heads = []
    for i in range(cfg.n_vit):
        gname = f"aux.{i}.gain"
        if gname in tensors:
            heads.append(distill.AuxHead(i, wrap(gname, True), wrap(f"aux.{i}.proj", True)))
    return Pipeline(cfg, model, adapters, vembed, teacher, heads)


# ---------------------------------------------------------------------------
# batch forward

def pack_embedded(pipe, batch):
    """Differentiable splice: vision embeddings at the vision span, token
    embeddings elsewhere (image rows sit first in the batch)."""
    cfg = pipe.cfg
    b, s = batch.tokens.shape
    n_img = batch.n_image
    if n_img == 0:
        return pipe.model.embed_tokens(batch.tokens)
    grids = {batch.grids[i] for i in range(n_img)}
    if len(grids) == 1:
        # uniform resolution: one batched vision MLP, one embedding lookup
        grid = next(iter(grids))
        s_v = grid[0] * grid[1]
        patches = np.stack([vision.patchify(batch.images[i], cfg.patch) for i in range(n_img)])
        vis = pipe.vembed.forward(patches, grid)
        tok = pipe.model.embed_tokens(batch.tokens)
        img_rows = T.concat([vis, T.slice_axis(T.slice_axis(tok, 0, 0, n_img), 1, s_v, s)], axis=1)
        if n_img == b:
            return img_rows
        return T.concat([img_rows, T.slice_axis(tok, 0, n_img, b)], axis=0)
    rows = []
    for i in range(b):
        v0, v1 = batch.layouts[i].vision_span
        parts = []
        if v1 > v0:
            patches = vision.patchify(batch.images[i], cfg.patch)
            parts.append(pipe.vembed.forward(patches, batch.grids[i]))
        parts.append(pipe.model.embed_tokens(batch.tokens[i][v1:]))
        rows.append(T.reshape(T.concat(parts, axis=0), (1, s, cfg.d_model)))
    return T.concat(rows, axis=0)


def batch_masks(batch, mask_mode):
    b, s = batch.tokens.shape
    return np.stack([build_attention_mask(lay, s, mask_mode) for lay in batch.layouts])


@dataclass
class LossOut:
    total: Tensor
    lm: Tensor
    dist: Tensor
    per_block: list = field(default_factory=list)


def _teacher_state_groups(pipe, batch):
    """Per-image teacher states grouped by grid; returns {img_idx: [per-block [S,d_vit]]}."""
    groups = {}
    for i in range(batch.n_image):
        groups.setdefault(batch.grids[i], []).append(i)
    out = {}
    for grid, idxs in groups.items():
        states = pipe.teacher.forward_batch([batch.images[i] for i in idxs])
        for j, i in enumerate(idxs):
            out[i] = [st[j] for st in states]
    return out


def compute_losses(pipe, batch, mask_mode, distill_mode, collect_taps=None):
    cfg = pipe.cfg
    need_distill = distill_mode != "none" and batch.n_image > 0 and cfg.n_vit > 0
    if collect_taps is None:
        collect_taps = need_distill
    embedded = pack_embedded(pipe, batch)
    masks = batch_masks(batch, mask_mode)
    logits, taps = pipe.model.forward(embedded, masks, pipe.adapters, collect_taps=collect_taps)
    lm = distill.lm_loss(logits, batch.layouts, batch.tokens)

    per_block = []
    if not need_distill:
        dist = T.constant(np.zeros((), dtype=np.float32))
        return LossOut(distill.total_loss(dist, lm), lm, dist, per_block), logits

    if len(pipe.heads) < cfg.n_vit:
        raise T.ShapeError(f"{len(pipe.heads)} aux heads for {cfg.n_vit} distilled blocks")
    grids = {batch.grids[i] for i in range(batch.n_image)}
    tstates = _teacher_state_groups(pipe, batch)
    if len(grids) == 1:
        s_v = batch.layouts[0].vision_span[1]
        states = [np.stack([tstates[i][blk] for i in range(batch.n_image)]) for blk in range(cfg.n_vit)]
        vis_taps = [
            BlockTap(t.block_index, T.slice_axis(T.slice_axis(t.hidden, 0, 0, batch.n_image), 1, 0, s_v))
            for t in taps
        ]
        if distill_mode == "block_wise":
            per_block_t = [distill.block_distill_loss(vis_taps[i].hidden, states[i], pipe.heads[i])
                           for i in range(cfg.n_vit)]
        else:
            i = cfg.n_vit - 1
            per_block_t = [distill.block_distill_loss(vis_taps[i].hidden, states[i], pipe.heads[i])]
    else:
        # mixed resolutions: per-image losses, averaged uniformly
        blocks = range(cfg.n_vit) if distill_mode == "block_wise" else [cfg.n_vit - 1]
        per_block_t = []
        for blk in blocks:
            acc = None
            for i in range(batch.n_image):
                s_v = batch.layouts[i].vision_span[1]
                tap_i = T.reshape(T.slice_axis(T.slice_axis(taps[blk].hidden, 0, i, i + 1), 1, 0, s_v),
                                  (s_v, cfg.d_model))
                term = distill.block_distill_loss(tap_i, tstates[i][blk], pipe.heads[blk])
                acc = term if acc is None else acc + term
            per_block_t.append(T.scale(acc, 1.0 / batch.n_image))

    per_block = [float(t.data) for t in per_block_t]
    if len(per_block_t) == 1:
        dist = per_block_t[0]
    else:
        acc = per_block_t[0]
        for t in per_block_t[1:]:
            acc = acc + t
        dist = T.scale(acc, 1.0 / len(per_block_t))
    return LossOut(distill.total_loss(dist, lm), lm, dist, per_block), logits


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class TrainState:
    step: int
    trainable: dict
    frozen: dict
    m: dict
    v: dict

    @classmethod
    def create(cls, trainable, frozen):
        overlap = set(trainable) & set(frozen)
        if overlap:
            raise ValueError(f"tensors both frozen and trainable: {sorted(overlap)}")
        return cls(
            step=0,
            trainable=dict(trainable),
            frozen=dict(frozen),
            m={n: np.zeros(t.data.size, dtype=np.float32) for n, t in trainable.items()},
            v={n: np.zeros(t.data.size, dtype=np.float32) for n, t in trainable.items()},
        )


def decay_for(name, weight_decay):
    """Decoupled decay: zero on norm gains and the token embedding."""
    if "norm" in name or name.endswith(".gain") or name == "llm.embed":
        return 0.0
    return weight_decay


def adamw_step(state, lr, cfg):
    """One AdamW update over the trainable set; frozen tensors untouched."""
    t = state.step + 1
    bc1 = 1.0 - BETA1**t
    bc2 = 1.0 - BETA2**t
    for name, p in state.trainable.items():
        if p.grad is None:
            raise ValueError(f"missing gradient for trainable tensor {name}")
        kernels.adamw_update(
            p.data.reshape(-1), p.grad.reshape(-1).astype(np.float32),
            state.m[name], state.v[name],
            lr, BETA1, BETA2, ADAM_EPS, decay_for(name, cfg.weight_decay), bc1, bc2,
        )
    state.step = t


def lr_at(cfg, step):
    """Linear warmup 0 -> lr over warmup_steps (0-indexed), then constant."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    return cfg.lr


def _set_requires_grad(tensors, flag):
    for t in tensors.values():
        t.requires_grad = flag
        t.grad = None


def _partition(pipe, tcfg):
    """(trainable, frozen) name->Tensor maps for the configured mode."""
    base = dict(pipe.model.params)
    extras = {}
    extras.update(pipe.vembed.params)
    use_heads = tcfg.mode != "finetune" and tcfg.distill_mode != "none"
    head_tensors = {}
    for head in pipe.heads:
        head_tensors.update(head.tensors())
    adapter_tensors = pipe.adapters.tensors() if (pipe.adapters and not pipe.adapters.merged) else {}

    if tcfg.mode == "pretrain":
        trainable = {**adapter_tensors, **extras}
        if use_heads:
            trainable.update(head_tensors)
        frozen = {**base, **pipe.teacher.params}
        if not use_heads:
            frozen.update(head_tensors)
    elif tcfg.mode == "finetune":
        trainable = {**base, **extras}
        frozen = {**pipe.teacher.params, **head_tensors}
    else:  # full_llm_unstable: everything in the student unfrozen, no adapters
        trainable = {**base, **extras}
        if use_heads:
            trainable.update(head_tensors)
        frozen = {**pipe.teacher.params, **adapter_tensors}
        if not use_heads:
            frozen.update(head_tensors)
    _set_requires_grad(trainable, True)
    _set_requires_grad(frozen, False)
    return trainable, frozen


# ---------------------------------------------------------------------------
# training loops

def _zero_grads(state):
    for p in state.trainable.values():
        p.grad = None


def train_loop(pipe, tcfg, dcfg, adapters_active=True, metrics_sink=None):
    """Shared step loop; returns the per-step metrics list."""
    trainable, frozen = _partition(pipe, tcfg)
    state = TrainState.create(trainable, frozen)
    rng_data = np.random.default_rng([tcfg.seed, 10])
    if not adapters_active:
        pipe = replace(pipe, adapters=None)
    use_distill = tcfg.mode != "finetune" and tcfg.distill_mode != "none"
    metrics = []
    for step in range(tcfg.total_steps):
        batch = D.make_batch(rng_data, tcfg.batch_size, dcfg=dcfg, max_seq=pipe.cfg.max_seq)
        _zero_grads(state)
        T.active_tape().reset()
        out, _ = compute_losses(pipe, batch, tcfg.mask_mode,
                                tcfg.distill_mode if use_distill else "none")
        lm_val = float(out.lm.data)
        dist_val = float(out.dist.data)
        if not (np.isfinite(lm_val) and np.isfinite(dist_val)):
            raise TrainAbort(step, lm_val, dist_val)
        objective = out.total
        if use_distill and tcfg.distill_weight != 1.0:
            objective = distill.total_loss(T.scale(out.dist, tcfg.distill_weight), out.lm)
        T.backward(objective)
        lr = lr_at(tcfg, step)
        adamw_step(state, lr, tcfg)
        rec = {"step": step, "lr": lr, "total_loss": float(out.total.data), "lm_loss": lm_val}
        if use_distill:
            rec["distill_loss"] = dist_val
            rec["per_block"] = out.per_block
        metrics.append(rec)
        if metrics_sink is not None:
            metrics_sink(rec)
    return metrics


def pretrain(pipe, tcfg, dcfg, metrics_sink=None):
    """Frozen base; adapters, vision embed and aux heads learn Eq-style
    combined objective. Returns (checkpoint tensors, metrics)."""
    if tcfg.mode != "pretrain":
        raise ValueError("pretrain requires mode == 'pretrain'")
    if pipe.adapters is None or pipe.adapters.merged:
        raise lora.MergeStateError("pretrain needs unmerged adapters")
    metrics = train_loop(pipe, tcfg, dcfg, metrics_sink=metrics_sink)
    return collect_state(pipe), metrics


def finetune(pipe, tcfg, dcfg, metrics_sink=None):
    """Merge adapters, drop distillation heads, train the full student +
    vision embed on the LM loss only."""
    if tcfg.mode != "finetune":
        raise ValueError("finetune requires mode == 'finetune'")
    if pipe.adapters is None or pipe.adapters.merged:
        raise lora.MergeStateError("finetune needs a checkpoint with unmerged adapters")
    lora.merge_all(pipe.model, pipe.adapters)
    pipe.adapters = None
    pipe.heads = []
    metrics = train_loop(pipe, tcfg, dcfg, metrics_sink=metrics_sink)
    return collect_state(pipe), metrics


def full_llm_probe(pipe, tcfg, dcfg, metrics_sink=None, spike_window=50, spike_factor=2.0):
    """Unfreeze everything (no adapters) and report whether the loss spikes
    above spike_factor x the trailing median. Reporting only."""
    if tcfg.mode != "full_llm_unstable":
        raise ValueError("full_llm_probe requires mode == 'full_llm_unstable'")
    metrics = train_loop(pipe, tcfg, dcfg, adapters_active=False, metrics_sink=metrics_sink)
    losses = [m["total_loss"] for m in metrics]
    spike_at = None
    for s in range(5, len(losses)):
        med = statistics.median(losses[max(0, s - spike_window):s])
        if losses[s] > spike_factor * med:
            spike_at = s
            break
    return collect_state(pipe), metrics, {"spike_detected": spike_at is not None, "spike_step": spike_at}


# ---------------------------------------------------------------------------
# evaluation

def smoothed(values, window):
    """Trailing-window moving average (window truncated at the start)."""
    out = []
    acc = 0.0
    for i, x in enumerate(values):
        acc += x
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def steps_to_threshold(losses, threshold, window):
    """Completed-step count when the smoothed loss first reaches the
    threshold; -1 when it never does."""
    for i, v in enumerate(smoothed(losses, window)):
        if v <= threshold:
            return i + 1
    return -1


def eval_metrics(pipe, dcfg, tcfg, n_caption=8, n_text=8, max_new=24):
    """Held-out metrics: greedy caption token accuracy, text perplexity,
    and (when heads exist) mean per-block cosine alignment."""
    if n_caption < 1 or n_text < 1:
        raise ValueError("empty heldout")
    cfg = pipe.cfg
    rng = np.random.default_rng([tcfg.seed, 11])
    # caption accuracy
    correct = total = 0
    for _ in range(n_caption):
        idx = D.HELDOUT_BASE + int(rng.integers(0, D.HELDOUT_BASE))
        sample = D.gen_image_caption(idx, dcfg.resolution, patch=dcfg.patch)
        batch = D.pack_samples([sample], dcfg.patch, cfg.max_seq)
        lay = batch.layouts[0]
        with T.no_grad():
            emb = pack_embedded(pipe, batch)
            prefix = T.constant(emb.data[0, : lay.supervise_from])
        decoded = decode_greedy(pipe.model, prefix, lay, D.EOS, max_new,
                                adapters=pipe.adapters, mask_mode=tcfg.mask_mode)
        target = list(sample.answer_tokens) + [D.EOS]
        total += len(target)
        correct += sum(1 for a, b in zip(decoded, target) if a == b)
    caption_acc = correct / total

    # text perplexity over supervised positions
    text_batches = max(1, n_text // 8)
    nlls = []
    for _ in range(text_batches):
        batch = D.make_batch(rng, min(n_text, 8), image_fraction=0.0, dcfg=dcfg,
                             max_seq=cfg.max_seq, heldout=True)
        with T.no_grad():
            out, _ = compute_losses(pipe, batch, tcfg.mask_mode, "none")
        nlls.append(float(out.lm.data))
    ppl = float(np.exp(np.mean(nlls)))

    result = {"caption_token_accuracy": caption_acc, "text_perplexity": ppl}

    if pipe.heads and pipe.cfg.n_vit > 0:
        batch = D.make_batch(rng, 4, image_fraction=1.0, dcfg=dcfg, max_seq=cfg.max_seq, heldout=True)
        with T.no_grad():
            out, _ = compute_losses(pipe, batch, tcfg.mask_mode, "block_wise")
        result["distill_alignment"] = 1.0 - float(out.dist.data)  # mean cosine
    return result


# ---------------------------------------------------------------------------
# ablation

ABLATION_CSV_HEADER = ("mask_mode", "distill_mode", "rank", "threshold", "steps_to_threshold", "final_loss")


def run_ablation(cfg, tcfg, dcfg, grid, thresholds, budget_steps, csv_path=None):
    """Train one cell per (mask_mode, distill_mode, rank) with a fixed data
    order and scan the smoothed LM loss for each threshold.

    grid: iterable of (mask_mode, distill_mode, rank). Returns the CSV
    rows (list of dicts). steps_to_threshold is -1 when unreached.
    """
    rows = []
    curves = {}
    for mask_mode, distill_mode, rank in grid:
        cell_cfg = replace(cfg, rank=rank, alpha=0.0)  # alpha re-resolves to rank
        cell_t = replace(tcfg, mask_mode=mask_mode, distill_mode=distill_mode,
                         rank=rank, total_steps=budget_steps)
        pipe = build_pipeline(cell_cfg, seed=cell_t.seed, teacher_warm=cell_t.teacher_warm,
                              teacher_warm_steps=cell_t.teacher_warm_steps)
        _, metrics = pretrain(pipe, cell_t, dcfg)
        lm_curve = [m["lm_loss"] for m in metrics]
        curves[(mask_mode, distill_mode, rank)] = metrics
        final = smoothed(lm_curve, tcfg.log_window)[-1]
        for thr in thresholds:
            rows.append({
                "mask_mode": mask_mode,
                "distill_mode": distill_mode,
                "rank": rank,
                "threshold": thr,
                "steps_to_threshold": steps_to_threshold(lm_curve, thr, tcfg.log_window),
                "final_loss": final,
            })
    if csv_path:
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=ABLATION_CSV_HEADER)
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
    return rows, curves


def overfit_pair(pipe, sample, steps=300, lr=3e-3, mask_mode="hybrid", distill_mode="none"):
    """Repeat one sample until memorized; returns (metrics, decoded ids).

    The decode starts from the packed prefix ([vision span][prompt]) and
    should reproduce the answer exactly once the pair is learned.
    """
    tcfg = TrainConfig(lr=lr, warmup_steps=10, batch_size=1, total_steps=steps,
                       mask_mode=mask_mode, distill_mode=distill_mode, seed=0)
    batch = D.pack_samples([sample], pipe.cfg.patch, pipe.cfg.max_seq)
    trainable, frozen = _partition(pipe, tcfg)
    state = TrainState.create(trainable, frozen)
    metrics = []
    for step in range(steps):
        _zero_grads(state)
        T.active_tape().reset()
        out, _ = compute_losses(pipe, batch, mask_mode, distill_mode)
        if not np.isfinite(float(out.total.data)):
            raise TrainAbort(step, float(out.lm.data), float(out.dist.data))
        T.backward(out.total)
        adamw_step(state, lr_at(tcfg, step), tcfg)
        metrics.append({"step": step, "lm_loss": float(out.lm.data)})
    lay = batch.layouts[0]
    with T.no_grad():
        emb = pack_embedded(pipe, batch)
        prefix = T.constant(emb.data[0, : lay.supervise_from])
    decoded = decode_greedy(pipe.model, prefix, lay, D.EOS,
                            max_new=len(sample.answer_tokens) + 4,
                            adapters=pipe.adapters, mask_mode=mask_mode)
    return metrics, decoded


# ---------------------------------------------------------------------------
# teacher warming

def warm_teacher(teacher, cfg, steps=200, seed=7, lr=1e-3, batch_size=16):
    """Briefly train the toy ViT on single-shape (kind, color) classification
    so its features carry the attributes captions talk about, then freeze it."""
    rng = np.random.default_rng([seed, 20])
    d_vit = cfg.d_vit
    n_classes = len(D.SHAPE_NAMES) * len(D.COLOR_NAMES)
    head = Tensor((0.02 * rng.standard_normal((n_classes, d_vit))).astype(np.float32),
                  requires_grad=True, name="warm.head")
    _set_requires_grad(teacher.params, True)
    trainable = dict(teacher.params)
    trainable["warm.head"] = head
    state = TrainState.create(trainable, {})
    warm_cfg = TrainConfig(lr=lr, warmup_steps=0, total_steps=max(steps, 1), seed=seed)
    h, w = cfg.patch * 4, cfg.patch * 4
    for step in range(steps):
        patches = []
        labels = []
        for _ in range(batch_size):
            shapes = D.make_scene(rng, h, w, n_shapes=1)
            labels.append(shapes[0].kind * len(D.COLOR_NAMES) + shapes[0].color)
            patches.append(vision.patchify(D.render_scene(shapes, h, w), cfg.patch))
        grid = (h // cfg.patch, w // cfg.patch)
        _zero_grads(state)
        T.active_tape().reset()
        pe = vision.sincos_grid(grid[0], grid[1], d_vit)
        x = T.matmul(T.constant(np.stack(patches)), T.transpose(teacher.params["teacher.patch_embed"]))
        x = x + T.constant(pe)
        states = teacher.blocks_forward(x)
        pooled = T.tmean(states[-1], axis=1)  # [B, d_vit]
        logits = T.matmul(pooled, T.transpose(head))
        loss = T.cross_entropy(logits, np.asarray(labels))
        T.backward(loss)
        adamw_step(state, lr, warm_cfg)
    _set_requires_grad(teacher.params, False)
