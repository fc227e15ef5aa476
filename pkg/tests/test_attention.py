import math

import numpy as np
import pytest

from grape.additive import UnipotentLift
from grape.attention import (AttentionConfig, HeadEncoder, StreamingCache, attention_batch, logits_batch,
                             softmax_row, step_streaming)
from grape.checks import demo_encoders, stream_batch_residual
from grape.multiplicative import MultiSubspaceMap

from oracles import fox_double_loop, path_bias_double_loop, rope_complex, softmax


def qkv(rng, L, H, d):
    return rng.normal(size=(3, L, H, d))


class TestSoftmax:
    def test_examples(self):
        assert softmax_row([3.0]).tolist() == [1.0]
        assert softmax_row([2.0, 2.0]).tolist() == [0.5, 0.5]
        assert np.allclose(softmax_row([0.0, math.log(3.0)]), [0.25, 0.75], atol=1e-15)

    def test_mask(self):
        w = softmax_row([1.0, 5.0, -np.inf])
        assert w[2] == 0.0 and w.sum() == pytest.approx(1.0)
        assert softmax_row([1.0, 5.0], mask=[True, False]).tolist() == [1.0, 0.0]

    def test_all_masked(self):
        with pytest.raises(ValueError):
            softmax_row([-np.inf, -np.inf])
        with pytest.raises(ValueError):
            softmax_row([1.0, 2.0], mask=[False, False])

    def test_large_logits_are_stable(self, rng):
        x = rng.normal(size=8) * 1e3
        assert np.allclose(softmax_row(x), softmax(x), rtol=1e-12, atol=1e-300)


class TestConfig:
    def test_broadcast_and_validation(self):
        cfg = AttentionConfig(3, 4, encoders=[HeadEncoder("none")])
        assert len(cfg.encoders) == 3
        with pytest.raises(ValueError):
            AttentionConfig(2, 4, encoders=[HeadEncoder()] * 3)
        with pytest.raises(ValueError):
            AttentionConfig(1, 4, encoders=[HeadEncoder("multiplicative", ms=MultiSubspaceMap.rope(6))])
        with pytest.raises(ValueError):
            HeadEncoder("multiplicative")
        with pytest.raises(ValueError):
            HeadEncoder("joint", ms=MultiSubspaceMap.rope(4), lift=UnipotentLift("alibi", 4, beta=1.0))
        with pytest.raises(ValueError):
            HeadEncoder("path", alpha=0.0)
        with pytest.raises(ValueError):
            HeadEncoder("sinusoid")


class TestBatchLogits:
    def test_none_is_scaled_dot_product(self, rng):
        L, H, d = 6, 2, 8
        Q, K, _ = qkv(rng, L, H, d)
        logits = logits_batch(AttentionConfig(H, d), Q, K)
        for h in range(H):
            ref = Q[:, h] @ K[:, h].T / math.sqrt(d)
            tri = np.tril_indices(L)
            assert np.max(np.abs(logits[..., h][tri] - ref[tri])) < 1e-14
            assert np.all(np.isneginf(logits[..., h][np.triu_indices(L, 1)]))

    def test_rope_matches_complex_reference(self, rng):
        L, H, d = 10, 2, 8
        Q, K, _ = qkv(rng, L, H, d)
        cfg = AttentionConfig(H, d, encoders=[HeadEncoder("multiplicative", ms=MultiSubspaceMap.rope(d))])
        logits = logits_batch(cfg, Q, K)
        for h in range(H):
            for t in range(L):
                for j in range(t + 1):
                    ref = float(rope_complex(Q[t, h], t) @ rope_complex(K[j, h], j)) / math.sqrt(d)
                    assert abs(logits[t, j, h] - ref) <= 1e-12

    def test_alibi_offsets(self):
        # uniform q and k: every causal logit differs from the diagonal by (j - t) beta
        L, d, beta = 7, 4, 0.375
        Q = np.ones((L, 1, d))
        cfg = AttentionConfig(1, d, encoders=[HeadEncoder("additive", lift=UnipotentLift("alibi", d, beta=beta))])
        logits = logits_batch(cfg, Q, Q)[..., 0]
        for t in range(L):
            for j in range(t + 1):
                assert logits[t, j] - logits[t, t] == pytest.approx((j - t) * beta, abs=1e-14)

    def test_fox_bias_matches_double_loop(self, rng):
        L, d = 12, 4
        Q, K, _ = qkv(rng, L, 1, d)
        f = rng.uniform(0.3, 1.0, size=(L, 1))
        cfg = AttentionConfig(1, d, encoders=[HeadEncoder("fox")])
        logits = logits_batch(cfg, Q, K, forget=f)[..., 0]
        for t in range(L):
            for j in range(t + 1):
                ref = float(Q[t, 0] @ K[j, 0]) / 2.0 + fox_double_loop(f[:, 0], t, j)
                assert abs(logits[t, j] - ref) < 1e-12

    def test_path_bias_matches_double_loop(self, rng):
        L, d = 10, 4
        Q, K, _ = qkv(rng, L, 1, d)
        P = rng.normal(size=(L, 1, d))
        cfg = AttentionConfig(1, d, encoders=[HeadEncoder("path", alpha=0.5)])
        logits = logits_batch(cfg, Q, K, probes=P)[..., 0]
        for t in range(L):
            for j in range(t + 1):
                ref = float(Q[t, 0] @ K[j, 0]) / 2.0 + path_bias_double_loop(P[:, 0], t, j, 0.5)
                assert abs(logits[t, j] - ref) < 1e-12

    def test_shape_errors(self, rng):
        cfg = AttentionConfig(2, 4)
        with pytest.raises(ValueError):
            logits_batch(cfg, np.zeros((3, 2, 4)), np.zeros((3, 2, 5)))
        with pytest.raises(ValueError):
            logits_batch(cfg, np.zeros((3, 2, 4)), np.zeros((4, 2, 4)))
        with pytest.raises(ValueError):
            logits_batch(AttentionConfig(2, 4, L_max=2), np.zeros((3, 2, 4)), np.zeros((3, 2, 4)))
        fox = AttentionConfig(2, 4, encoders=[HeadEncoder("fox")])
        with pytest.raises(ValueError):
            logits_batch(fox, np.zeros((3, 2, 4)), np.zeros((3, 2, 4)), forget=np.ones((3, 1)))

    def test_threads_do_not_change_results(self, rng):
        L, H, d = 9, 8, 8
        Q, K, _ = qkv(rng, L, H, d)
        encoders = [row[0] for row in demo_encoders(rng, d, 1)]
        cfg = AttentionConfig(H, d, encoders=encoders)
        kw = dict(forget=rng.uniform(0.5, 1.0, size=(L, H)), probes=rng.normal(size=(L, H, d)))
        assert np.array_equal(logits_batch(cfg, Q, K, **kw), logits_batch(cfg, Q, K, max_workers=4, **kw),
                              equal_nan=True)


class TestOutputs:
    def test_single_token(self, rng):
        Q, K, V = qkv(rng, 1, 2, 4)
        _, Y = attention_batch(AttentionConfig(2, 4), Q, K, V)
        assert np.array_equal(Y[0], V[0])
        cfg = AttentionConfig(2, 4)
        row, y = step_streaming(StreamingCache(cfg), cfg, Q[0], K[0], V[0], 0)
        assert row.shape == (1, 2)
        assert np.array_equal(y, V[0])

    def test_outputs_are_convex_combinations(self, rng):
        Q, K, V = qkv(rng, 8, 1, 4)
        logits, Y = attention_batch(AttentionConfig(1, 4), Q, K, V)
        w = softmax(logits[5, :6, 0])
        assert np.allclose(Y[5, 0], w @ V[:6, 0], atol=1e-14)


class TestStreaming:
    @pytest.mark.parametrize("family", range(8))
    def test_stream_equals_batch(self, rng, family):
        d, H = 8, 2
        encoders = demo_encoders(rng, d, H)[family]
        cfg = AttentionConfig(H, d, L_max=16, encoders=encoders)
        assert stream_batch_residual(cfg, rng, 16) <= 1e-12

    def test_fox_stream_matches_double_loop(self, rng):
        L, d = 16, 4
        cfg = AttentionConfig(1, d, encoders=[HeadEncoder("fox")])
        Q, K, V = qkv(rng, L, 1, d)
        f = rng.uniform(0.2, 1.0, size=(L, 1))
        cache = StreamingCache(cfg)
        for t in range(L):
            row, _ = step_streaming(cache, cfg, Q[t], K[t], V[t], t, forget_t=f[t])
            ref = [float(Q[t, 0] @ K[j, 0]) / 2.0 + fox_double_loop(f[:, 0], t, j) for j in range(t + 1)]
            assert np.max(np.abs(row[:, 0] - ref)) <= 1e-12

    def test_out_of_order(self, rng):
        cfg = AttentionConfig(1, 4)
        cache = StreamingCache(cfg)
        Q, K, V = qkv(rng, 2, 1, 4)
        step_streaming(cache, cfg, Q[0], K[0], V[0], 5)
        for bad in (5, 4):
            with pytest.raises(ValueError):
                step_streaming(cache, cfg, Q[1], K[1], V[1], bad)
        assert len(cache) == 1

    def test_capacity_and_config_checks(self, rng):
        cfg = AttentionConfig(1, 4, L_max=1)
        cache = StreamingCache(cfg)
        Q, K, V = qkv(rng, 2, 1, 4)
        step_streaming(cache, cfg, Q[0], K[0], V[0], 0)
        with pytest.raises(ValueError):
            step_streaming(cache, cfg, Q[1], K[1], V[1], 1)
        with pytest.raises(ValueError):
            step_streaming(cache, AttentionConfig(1, 4, L_max=1), Q[1], K[1], V[1], 1)

    def test_bad_forget_gate(self, rng):
        cfg = AttentionConfig(1, 4, encoders=[HeadEncoder("fox")])
        Q, K, V = qkv(rng, 1, 1, 4)
        with pytest.raises(ValueError):
            step_streaming(StreamingCache(cfg), cfg, Q[0], K[0], V[0], 0, forget_t=[0.0])

    def test_cache_is_append_only(self, rng):
        d = 8
        cfg = AttentionConfig(1, d, encoders=[HeadEncoder("multiplicative", ms=MultiSubspaceMap.rope(d))])
        cache = StreamingCache(cfg)
        Q, K, V = qkv(rng, 6, 1, d)
        step_streaming(cache, cfg, Q[0], K[0], V[0], 0)
        before = cache.cached_keys(0).copy()
        for t in range(1, 6):
            step_streaming(cache, cfg, Q[t], K[t], V[t], t)
        assert np.array_equal(cache.cached_keys(0)[:1], before)
        with pytest.raises(ValueError):
            cache.cached_keys(0)[0, 0] = 0.0
        with pytest.raises(ValueError):
            cache.cached_values(0)[0, 0] = 0.0


class TestOriginInvariance:
    @pytest.mark.parametrize("family", [0, 1, 2, 3, 4, 7])
    def test_shifted_positions(self, rng, family):
        L, H, d = 10, 2, 8
        cfg = AttentionConfig(H, d, encoders=demo_encoders(rng, d, H)[family])
        Q, K, _ = qkv(rng, L, H, d)
        pos = np.arange(L, dtype=np.float64)
        base = logits_batch(cfg, Q, K, positions=pos)
        moved = logits_batch(cfg, Q, K, positions=pos + 512.0)
        mask = np.isfinite(base)
        assert np.max(np.abs(base[mask] - moved[mask])) <= 1e-10

    def test_families_flagged(self, rng):
        flags = [row[0].one_parameter for row in demo_encoders(rng, 4, 1)]
        assert flags == [True, True, True, True, True, False, False, True]
