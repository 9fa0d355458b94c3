"""Benchmark the numba kernels against the pure-numpy fallbacks.

Run: python benchmarks/bench_kernels.py

Times each kernel pair on training-shaped inputs and one full training
step per path (VORA_NUMBA=0 selects the numpy path for a whole process;
here both implementations are called directly).
"""

import time

import numpy as np

from vora import kernels


def timeit(fn, *args, repeats=200, warmup=3):
    for _ in range(warmup):
        fn(*args)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats * 1e6  # us


def compare(name, nb_fn, np_fn, args, tol=1e-5):
    a = nb_fn(*args)
    b = np_fn(*args)
    if isinstance(a, tuple):
        err = max(float(np.abs(x - y).max()) for x, y in zip(a, b))
    else:
        err = float(np.abs(a - b).max())
    t_nb = timeit(nb_fn, *args)
    t_np = timeit(np_fn, *args)
    status = "ok" if err <= tol else "MISMATCH"
    print(f"{name:<16} numba {t_nb:8.1f} us   numpy {t_np:8.1f} us   "
          f"speedup {t_np / t_nb:5.2f}x   max|diff| {err:.1e} {status}")
    return err <= tol


def main():
    if not kernels.HAS_NUMBA:
        print("numba unavailable; nothing to compare (numpy fallback is the only path)")
        return 0
    rng = np.random.default_rng(0)
    rows, cols, d, v = 64 * 4 * 48, 48, 64, 200  # batch 16 x 4 heads x seq 48

    x = rng.standard_normal((rows, cols)).astype(np.float32)
    mask = np.zeros((rows, cols), dtype=np.float32)
    mask[rng.random((rows, cols)) < 0.4] = np.finfo(np.float32).min
    mask[:, 0] = 0.0
    probs = kernels._np_softmax_fwd(x.copy(), mask)
    g = rng.standard_normal((rows, cols)).astype(np.float32)

    flat = rng.standard_normal(rows * 8).astype(np.float32)
    gflat = rng.standard_normal(rows * 8).astype(np.float32)

    xr = rng.standard_normal((512, d)).astype(np.float32)
    gain = rng.standard_normal(d).astype(np.float32)
    _, inv = kernels._np_rmsnorm_fwd(xr, gain, 1e-6)
    gr = rng.standard_normal((512, d)).astype(np.float32)

    logits = rng.standard_normal((512, v)).astype(np.float32)
    targets = rng.integers(0, v, size=512)
    live = rng.random(512) < 0.5
    live[0] = True
    _, cprobs = kernels._np_ce_fwd(logits, targets, live)

    p = rng.standard_normal(50_000).astype(np.float32)
    pg = rng.standard_normal(50_000).astype(np.float32)
    m = np.zeros(50_000, dtype=np.float32)
    vv = np.zeros(50_000, dtype=np.float32)

    ok = True
    ok &= compare("softmax_fwd", kernels._nb_softmax_fwd, kernels._np_softmax_fwd, (x, mask))
    ok &= compare("softmax_bwd", kernels._nb_softmax_bwd, kernels._np_softmax_bwd, (probs, g))
    ok &= compare("gelu_fwd", kernels._nb_gelu_fwd, kernels._np_gelu_fwd, (flat,))
    ok &= compare("gelu_bwd", kernels._nb_gelu_bwd, kernels._np_gelu_bwd, (flat, gflat))
    ok &= compare("silu_fwd", kernels._nb_silu_fwd, kernels._np_silu_fwd, (flat,))
    ok &= compare("silu_bwd", kernels._nb_silu_bwd, kernels._np_silu_bwd, (flat, gflat))
    ok &= compare("rmsnorm_fwd", kernels._nb_rmsnorm_fwd, kernels._np_rmsnorm_fwd, (xr, gain, 1e-6))
    ok &= compare("rmsnorm_bwd", kernels._nb_rmsnorm_bwd, kernels._np_rmsnorm_bwd, (xr, gain, inv, gr))
    ok &= compare("ce_fwd", kernels._nb_ce_fwd, kernels._np_ce_fwd, (logits, targets, live))
    ok &= compare("ce_bwd", kernels._nb_ce_bwd, kernels._np_ce_bwd, (cprobs, targets, live, 0.01))

    # adamw mutates in place: time fresh copies, compare end states
    def run_adamw(fn):
        args = (p.copy(), pg, m.copy(), vv.copy(), 1e-3, 0.9, 0.999, 1e-8, 0.01, 0.1, 0.001)
        fn(*args)
        return args[0]

    a_state = run_adamw(kernels._nb_adamw)
    b_state = run_adamw(kernels._np_adamw)
    err = float(np.abs(a_state - b_state).max())
    t_nb = timeit(lambda: run_adamw(kernels._nb_adamw), repeats=50)
    t_np = timeit(lambda: run_adamw(kernels._np_adamw), repeats=50)
    print(f"{'adamw_update':<16} numba {t_nb:8.1f} us   numpy {t_np:8.1f} us   "
          f"speedup {t_np / t_nb:5.2f}x   max|diff| {err:.1e} {'ok' if err <= 1e-5 else 'MISMATCH'}")
    ok &= err <= 1e-5

    print()
    bench_train_step()
    return 0 if ok else 1


def bench_train_step(steps=20):
    """Whole-step comparison via subprocesses (the path is fixed at import)."""
    import subprocess
    import sys

    code = (
        "import time, numpy as np\n"
        "from vora.model import ModelConfig\n"
        "from vora import trainer, data, kernels\n"
        "pipe = trainer.build_pipeline(ModelConfig(), seed=0)\n"
        f"tcfg = trainer.TrainConfig(total_steps={steps}, warmup_steps=5, batch_size=16, seed=0)\n"
        "trainer.pretrain(pipe, trainer.TrainConfig(total_steps=3, warmup_steps=1, batch_size=16, seed=0), data.DataConfig())\n"
        "pipe = trainer.build_pipeline(ModelConfig(), seed=0)\n"
        "t0 = time.perf_counter()\n"
        "trainer.pretrain(pipe, tcfg, data.DataConfig())\n"
        f"print(f'{{\"numba\" if kernels.USE_NUMBA else \"numpy\"}} path: '\n"
        f"      f'{{(time.perf_counter() - t0) / {steps} * 1000:.1f}} ms/step')\n"
    )
    for flag in ("1", "0"):
        out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                             env={"VORA_NUMBA": flag, "PATH": "/usr/bin:/bin:/usr/local/bin"})
        print("train step,", out.stdout.strip() or out.stderr.strip().splitlines()[-1])


if __name__ == "__main__":
    raise SystemExit(main())
