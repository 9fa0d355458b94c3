"""The two kernel paths must agree within float32 rounding."""

import numpy as np
import pytest

from vora import kernels as K

pytestmark = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba unavailable")

RNG = np.random.default_rng(0)


def close(a, b, tol=1e-5):
    if isinstance(a, tuple):
        return all(np.abs(x - y).max() <= tol for x, y in zip(a, b))
    return np.abs(a - b).max() <= tol


def test_softmax_pair():
    x = RNG.standard_normal((40, 12)).astype(np.float32)
    mask = np.zeros((40, 12), dtype=np.float32)
    mask[RNG.random((40, 12)) < 0.4] = np.finfo(np.float32).min
    mask[:, 0] = 0.0
    pa = K._nb_softmax_fwd(x, mask)
    pb = K._np_softmax_fwd(x.copy(), mask)
    assert close(pa, pb, 1e-6)
    g = RNG.standard_normal((40, 12)).astype(np.float32)
    assert close(K._nb_softmax_bwd(pa, g), K._np_softmax_bwd(pa, g), 1e-6)


def test_activation_pairs():
    x = RNG.standard_normal(500).astype(np.float32)
    g = RNG.standard_normal(500).astype(np.float32)
    assert close(K._nb_gelu_fwd(x), K._np_gelu_fwd(x), 1e-6)
    assert close(K._nb_gelu_bwd(x, g), K._np_gelu_bwd(x, g), 1e-6)
    assert close(K._nb_silu_fwd(x), K._np_silu_fwd(x), 1e-6)
    assert close(K._nb_silu_bwd(x, g), K._np_silu_bwd(x, g), 1e-6)


def test_rmsnorm_pair():
    x = RNG.standard_normal((30, 16)).astype(np.float32)
    gain = RNG.standard_normal(16).astype(np.float32)
    ya, inva = K._nb_rmsnorm_fwd(x, gain, 1e-6)
    yb, invb = K._np_rmsnorm_fwd(x, gain, 1e-6)
    assert close((ya, inva), (yb, invb), 1e-6)
    g = RNG.standard_normal((30, 16)).astype(np.float32)
    assert close(K._nb_rmsnorm_bwd(x, gain, inva, g), K._np_rmsnorm_bwd(x, gain, inva, g), 1e-5)


def test_cross_entropy_pair():
    logits = RNG.standard_normal((25, 40)).astype(np.float32)
    targets = RNG.integers(0, 40, size=25)
    live = RNG.random(25) < 0.7
    live[0] = True
    nll_a, pa = K._nb_ce_fwd(logits, targets, live)
    nll_b, pb = K._np_ce_fwd(logits, targets, live)
    assert close((nll_a, pa), (nll_b, pb), 1e-5)
    assert close(K._nb_ce_bwd(pa, targets, live, 0.05), K._np_ce_bwd(pb, targets, live, 0.05), 1e-6)


def test_adamw_pair():
    p = RNG.standard_normal(300).astype(np.float32)
    g = RNG.standard_normal(300).astype(np.float32)
    args = (g, np.zeros(300, np.float32), np.zeros(300, np.float32),
            1e-3, 0.9, 0.999, 1e-8, 0.01, 0.1, 0.001)
    pa, pb = p.copy(), p.copy()
    K._nb_adamw(pa, args[0], args[1].copy(), args[2].copy(), *args[3:])
    K._np_adamw(pb, args[0], args[1].copy(), args[2].copy(), *args[3:])
    assert close(pa, pb, 1e-6)
