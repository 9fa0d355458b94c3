import numpy as np
import numpy.testing as npt
import pytest

import vora.tensor as T
from vora.model import (LayoutError, Model, ModelConfig, SequenceLayout,
                        build_attention_mask, build_hybrid_mask)

NEG = T.NEG_MASK


def allowed_set(mask):
    return {(q, k) for q in range(mask.shape[0]) for k in range(mask.shape[1]) if mask[q, k] == 0.0}


def oracle_allowed(v0, v1, q, k, mode):
    """Independent statement of the visibility rule."""
    if mode == "causal":
        return k <= q
    if v0 <= q < v1:
        return v0 <= k < v1
    return k <= q


class TestHybridMask:
    def test_hand_enumerated_5x5(self):
        lay = SequenceLayout((0, 3), (3, 5), 4)
        mask = build_hybrid_mask(lay, 5)
        expect = {
            0: {0, 1, 2},
            1: {0, 1, 2},
            2: {0, 1, 2},
            3: {0, 1, 2, 3},
            4: {0, 1, 2, 3, 4},
        }
        for q in range(5):
            assert {k for k in range(5) if mask[q, k] == 0.0} == expect[q]

    def test_empty_vision_is_causal(self):
        lay = SequenceLayout((0, 0), (0, 4), 1)
        mask = build_hybrid_mask(lay, 4)
        tri = np.where(np.tril(np.ones((4, 4), dtype=bool)), 0.0, NEG).astype(np.float32)
        npt.assert_array_equal(mask, tri)

    def test_causal_mode_row_zero(self):
        lay = SequenceLayout((0, 3), (3, 5), 4)
        mask = build_attention_mask(lay, 5, mode="causal")
        assert {k for k in range(5) if mask[0, k] == 0.0} == {0}

    def test_exhaustive_small_layouts(self):
        # every layout with total_len <= 8 against the rule oracle
        for total in range(1, 9):
            for v1 in range(0, total + 1):
                sup = min(v1 + 1, total)
                if sup >= total and v1 >= total:
                    continue
                lay = SequenceLayout((0, v1), (v1, total), min(max(v1, 1), total))
                for mode in ("hybrid", "causal"):
                    mask = build_attention_mask(lay, total, mode)
                    for q in range(total):
                        for k in range(total):
                            want = oracle_allowed(0, v1, q, k, mode)
                            assert (mask[q, k] == 0.0) == want, (lay, mode, q, k)

    def test_overlapping_spans_error(self):
        with pytest.raises(LayoutError):
            SequenceLayout((0, 4), (3, 6), 4)

    def test_hybrid_vs_causal_differ_only_in_vision_block(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            total = int(rng.integers(2, 13))
            v1 = int(rng.integers(0, total))
            lay = SequenceLayout((0, v1), (v1, total), min(v1 + 1, total))
            hybrid = allowed_set(build_attention_mask(lay, total, "hybrid"))
            causal = allowed_set(build_attention_mask(lay, total, "causal"))
            diff = hybrid ^ causal
            above_diag_vision = {(q, k) for q in range(v1) for k in range(v1) if k > q}
            assert diff == above_diag_vision


class TestMaskSoundness:
    def test_disallowed_probabilities_exactly_zero(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            total = int(rng.integers(2, 13))
            v1 = int(rng.integers(0, total))
            lay = SequenceLayout((0, v1), (v1, total), min(v1 + 1, total))
            mask = build_hybrid_mask(lay, total)
            scores = T.constant(rng.standard_normal((total, total)).astype(np.float32))
            probs = T.softmax_rows(scores, mask).data
            assert (probs[mask < 0] == 0.0).all()
            npt.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_attention_probs_zero_through_model(self, monkeypatch):
        cfg = ModelConfig(n_llm=2, n_vit=1, d_model=8, d_vit=8, n_heads=2, d_ff=8,
                          patch=4, rank=2, vembed_hidden=4, vit_heads=2, vit_ff=8)
        model = Model.init(cfg, seed=0)
        lay = SequenceLayout((0, 3), (3, 6), 4)
        mask = build_hybrid_mask(lay, 6)
        rng = np.random.default_rng(0)
        emb = T.constant(rng.standard_normal((6, cfg.d_model)).astype(np.float32) * 0.1)
        # observe every attention softmax the model computes
        seen = []
        orig = T.softmax_rows

        def spy(x, m):
            out = orig(x, m)
            marr = m.data if hasattr(m, "data") and not isinstance(m, np.ndarray) else np.asarray(m)
            seen.append((out.data, np.broadcast_to(marr, x.data.shape)))
            return out

        monkeypatch.setattr(T, "softmax_rows", spy)
        model.forward(emb, mask, collect_taps=False)
        assert len(seen) == cfg.n_llm
        for probs, m in seen:
            assert (probs[m < 0] == 0.0).all()


def test_empty_vision_no_adapters_equals_plain_causal_lm():
    cfg = ModelConfig()
    model = Model.init(cfg, seed=3)
    ids = np.array([5, 9, 17, 30, 8])
    lay = SequenceLayout((0, 0), (0, 5), 1)
    emb = model.embed_tokens(ids)
    hybrid_logits, _ = model.forward(emb, build_hybrid_mask(lay, 5), collect_taps=False)
    causal_logits, _ = model.forward(model.embed_tokens(ids),
                                     build_attention_mask(lay, 5, "causal"), collect_taps=False)
    npt.assert_array_equal(hybrid_logits.data, causal_logits.data)


def test_tap_count_and_shapes():
    cfg = ModelConfig()
    model = Model.init(cfg, seed=1)
    rng = np.random.default_rng(2)
    emb = T.constant(rng.standard_normal((7, cfg.d_model)).astype(np.float32) * 0.1)
    lay = SequenceLayout((0, 4), (4, 7), 5)
    _, taps = model.forward(emb, build_hybrid_mask(lay, 7))
    assert len(taps) == cfg.n_vit
    for i, tap in enumerate(taps):
        assert tap.block_index == i
        assert tap.hidden.shape == (7, cfg.d_model)
