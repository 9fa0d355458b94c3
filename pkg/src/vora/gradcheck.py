"""Finite-difference gradient verification for every tape op.

The oracle only ever evaluates forward passes (central differences,
h=1e-3), so it stays independent of the backward implementations it
checks. Error metric per element: |analytic - fd| / max(1, |fd|).
"""

import zlib

import numpy as np

from . import tensor as T


def fd_gradient(value_fn, t, h=1e-3):
    """Central-difference gradient of float-valued value_fn() w.r.t. t."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            hi = value_fn()
            flat[i] = keep - h
            lo = value_fn()
            flat[i] = keep
            gflat[i] = (hi - lo) / (2.0 * h)
    return g


def max_rel_error(fn, inputs, h=1e-3):
    """Compare tape gradients of scalar fn() against finite differences.

    Returns the worst |analytic - fd| / max(1, |fd|) over all entries of
    all requires_grad inputs.
    """
    for t in inputs:
        t.grad = None
    loss = fn()
    T.backward(loss)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        fd = fd_gradient(lambda: float(fn().data), t, h=h)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        err = np.abs(analytic - fd) / np.maximum(1.0, np.abs(fd))
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst


def _check_projected(make_out, inputs, r, h):
    """Gradients of sum(out * r): tape vs finite differences.

    The analytic side runs entirely on the float32 tape; the fd side
    reduces the op's float32 output in float64, so the check measures
    the op's own precision, not cancellation noise in the test's sum.
    """
    for t in inputs:
        t.grad = None
    out = make_out()
    T.backward(T.tsum(T.mul(out, T.constant(r))))

    def value():
        with T.no_grad():
            return float(np.sum(make_out().data.astype(np.float64) * r))

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        fd = fd_gradient(value, t, h=h)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        err = np.abs(analytic - fd) / np.maximum(1.0, np.abs(fd))
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst


def _rand(rng, *shape):
    return T.param((0.5 * rng.standard_normal(shape)).astype(np.float32))


def op_suite(seed=0, trials=50, tol=1e-3, h=1e-3):
    """Run the per-op finite-difference suite.

    Returns a list of (op_name, worst_error, passed). Shapes use extents
    <= 8 throughout.
    """
    results = []

    def run(name, make_case):
        # crc32, not hash(): case draws must not depend on PYTHONHASHSEED
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        worst = 0.0
        for _ in range(trials):
            make_out, inputs = make_case(rng)
            with T.no_grad():
                shape = make_out().data.shape
            r = rng.standard_normal(shape).astype(np.float32)
            worst = max(worst, _check_projected(make_out, inputs, r, h))
        results.append((name, worst, worst <= tol))

    def case_add(rng):
        a = _rand(rng, 3, 4)
        b = _rand(rng, 4) if rng.random() < 0.5 else _rand(rng, 3, 4)
        return (lambda: T.add(a, b)), [a, b]

    def case_mul(rng):
        a = _rand(rng, 2, 3, 4)
        b = _rand(rng, 1, 3, 4) if rng.random() < 0.5 else _rand(rng, 2, 3, 4)
        return (lambda: T.mul(a, b)), [a, b]

    def case_scale(rng):
        a = _rand(rng, 5)
        c = float(rng.uniform(-2, 2))
        return (lambda: T.scale(a, c)), [a]

    def case_matmul(rng):
        if rng.random() < 0.5:
            a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
        else:
            a, b = _rand(rng, 2, 3, 4), _rand(rng, 4, 5)
        return (lambda: T.matmul(a, b)), [a, b]

    def case_transpose(rng):
        a = _rand(rng, 2, 3, 4)
        return (lambda: T.transpose(a, (2, 0, 1))), [a]

    def case_reshape(rng):
        a = _rand(rng, 2, 6)
        return (lambda: T.reshape(a, (3, 4))), [a]

    def case_concat(rng):
        a, b = _rand(rng, 2, 3), _rand(rng, 4, 3)
        return (lambda: T.concat([a, b], axis=0)), [a, b]

    def case_slice(rng):
        a = _rand(rng, 5, 4)
        return (lambda: T.slice_axis(a, 0, 1, 3)), [a]

    def case_embedding(rng):
        table = _rand(rng, 6, 4)
        ids = rng.integers(0, 6, size=7)
        return (lambda: T.embedding(table, ids)), [table]

    def case_gelu(rng):
        a = _rand(rng, 3, 5)
        return (lambda: T.gelu(a)), [a]

    def case_silu(rng):
        a = _rand(rng, 3, 5)
        return (lambda: T.silu(a)), [a]

    def case_rms_norm(rng):
        a = _rand(rng, 3, 6)
        gain = _rand(rng, 6)
        return (lambda: T.rms_norm(a, gain, eps=1e-5)), [a, gain]

    def case_softmax(rng):
        a = _rand(rng, 4, 5)
        mask = np.zeros((4, 5), dtype=np.float32)
        drop = rng.random((4, 5)) < 0.3
        drop[:, 0] = False  # keep every row alive
        mask[drop] = T.NEG_MASK
        return (lambda: T.softmax_rows(a, mask)), [a]

    def case_cross_entropy(rng):
        logits = _rand(rng, 6, 5)
        targets = rng.integers(0, 5, size=6)
        ignore = rng.random(6) < 0.3
        ignore[0] = False
        return (lambda: T.cross_entropy(logits, targets, ignore)), [logits]

    def case_tsum(rng):
        a = _rand(rng, 3, 4)
        if rng.random() < 0.5:
            return (lambda: T.tsum(a)), [a]
        return (lambda: T.tsum(a, axis=1)), [a]

    def case_power(rng):
        a = T.param((rng.random((3, 4)) + 0.75).astype(np.float32))
        c = float(rng.choice([0.5, 2.0, -1.0]))
        return (lambda: T.power(a, c)), [a]

    run("add", case_add)
    run("mul", case_mul)
    run("scale", case_scale)
    run("matmul", case_matmul)
    run("transpose", case_transpose)
    run("reshape", case_reshape)
    run("concat", case_concat)
    run("slice_axis", case_slice)
    run("embedding", case_embedding)
    run("gelu", case_gelu)
    run("silu", case_silu)
    run("rms_norm", case_rms_norm)
    run("softmax_rows", case_softmax)
    run("cross_entropy", case_cross_entropy)
    run("tsum", case_tsum)
    run("power", case_power)
    return results


def nano_config():
    """Smallest end-to-end model: every internal extent 8 or less."""
    from .model import ModelConfig

    return ModelConfig(n_llm=2, n_vit=1, d_model=8, d_vit=8, n_heads=2, d_ff=8,
                       patch=4, rank=2, max_seq=64, vembed_hidden=4, vit_heads=2, vit_ff=8)


def end_to_end_check(seed=0, h=1e-3, tol=1e-3, max_entries=48):
    """Finite-difference the combined objective on the nano model.

    Checks a deterministic entry sample of every trainable tensor (all
    entries when a tensor has at most max_entries). Returns
    (results, all_passed) with per-tensor worst errors.
    """
    from . import data as D
    from . import trainer

    cfg = nano_config()
    dcfg = D.DataConfig(resolution=(8, 8), patch=4)
    pipe = trainer.build_pipeline(cfg, seed=seed)
    rng = np.random.default_rng([seed, 42])
    batch = D.make_batch(rng, 2, image_fraction=0.5, dcfg=dcfg, max_seq=cfg.max_seq)

    def fn():
        out, _ = trainer.compute_losses(pipe, batch, "hybrid", "block_wise")
        return out.total

    trainable = {}
    trainable.update(pipe.adapters.tensors())
    trainable.update(pipe.vembed.params)
    for head in pipe.heads:
        trainable.update(head.tensors())

    for t in trainable.values():
        t.grad = None
    T.active_tape().reset()
    loss = fn()
    T.backward(loss)

    pick = np.random.default_rng(seed)
    results = []
    with T.no_grad():
        for name in sorted(trainable):
            t = trainable[name]
            flat = t.data.reshape(-1)
            analytic = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
            idxs = np.arange(flat.size)
            if flat.size > max_entries:
                idxs = np.sort(pick.choice(flat.size, size=max_entries, replace=False))
            worst = 0.0
            for i in idxs:
                keep = flat[i]
                flat[i] = keep + h
                hi = float(fn().data)
                flat[i] = keep - h
                lo = float(fn().data)
                flat[i] = keep
                fd = (hi - lo) / (2.0 * h)
                err = abs(analytic[i] - fd) / max(1.0, abs(fd))
                worst = max(worst, err)
            results.append((name, worst, worst <= tol))
    return results, all(ok for _, _, ok in results)
