import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grape.multiplicative import (MultiSubspaceMap, ThinCompression, apply_2d, apply_3d, apply_ms,
                                  canonical_planes, log_uniform_thetas, noncommuting_spectrum,
                                  rope_reference, schur_mode_angles)

from oracles import block_rotation, expm, rope_complex


def random_orthogonal(rng, d):
    Q, R = np.linalg.qr(rng.normal(size=(d, d)))
    return Q * np.sign(np.diag(R))


class TestMap:
    def test_defaults(self):
        m = MultiSubspaceMap.rope(8)
        assert np.array_equal(m.planes, [[0, 1], [2, 3], [4, 5], [6, 7]])
        assert m.thetas[0] == 1.0
        assert m.thetas[-1] == pytest.approx(10000 ** (-6 / 8))

    def test_validation(self, rng):
        with pytest.raises(ValueError):
            MultiSubspaceMap(4, [1.0, 0.0])
        with pytest.raises(ValueError):
            MultiSubspaceMap(4, [1.0, 1.0, 1.0])
        with pytest.raises(ValueError):
            MultiSubspaceMap(4, [1.0, 1.0], planes=[[0, 1], [1, 2]])
        with pytest.raises(ValueError):
            MultiSubspaceMap(4, [1.0], planes=[[0, 4]])
        B = random_orthogonal(rng, 4)
        B[0, 0] += 1e-6
        with pytest.raises(ValueError):
            MultiSubspaceMap(4, [1.0, 1.0], basis=B)

    def test_commuting_generators(self, rng):
        m = MultiSubspaceMap(6, [0.3, 1.1, 2.0], basis=random_orthogonal(rng, 6))
        gens = []
        for th, (u, w) in zip(m.thetas, m.plane_vectors()):
            gens.append(th * (np.outer(w, u) - np.outer(u, w)))
        for i in range(3):
            for j in range(i + 1, 3):
                assert np.max(np.abs(gens[i] @ gens[j] - gens[j] @ gens[i])) < 1e-10

    def test_json_round_trip(self, rng):
        m = MultiSubspaceMap(6, [0.5, 0.25], planes=[[0, 3], [1, 5]], basis=random_orthogonal(rng, 6), head_id=3)
        doc = json.loads(json.dumps(m.to_json()))
        m2 = MultiSubspaceMap.from_json(doc)
        x = rng.normal(size=6)
        assert np.array_equal(apply_ms(m, 7.0, x), apply_ms(m2, 7.0, x))
        assert m2.head_id == 3

    def test_json_base_only(self):
        m = MultiSubspaceMap.from_json({"d": 8, "base": 500.0})
        assert np.allclose(m.thetas, log_uniform_thetas(8, 500.0))


class TestApplyMS:
    def test_identity_at_zero(self, rng, backend):
        x = rng.normal(size=8)
        assert np.array_equal(apply_ms(MultiSubspaceMap.rope(8), 0, x), x)

    def test_small_example(self, rng, backend):
        # [DERIVED] blockdiag(R2(1), R2(0.01)) assembled densely
        m = MultiSubspaceMap(4, [1.0, 0.01])
        x = rng.normal(size=4)
        oracle = block_rotation([1.0, 0.01], 1.0, 4) @ x
        assert np.max(np.abs(apply_ms(m, 1.0, x) - oracle)) < 1e-15
        assert np.max(np.abs(apply_ms(m, 1.0, x) - expm(m.generator()) @ x)) < 1e-14

    def test_identity_basis(self, rng):
        x = rng.normal(size=6)
        a = apply_ms(MultiSubspaceMap.rope(6), 11.0, x)
        b = apply_ms(MultiSubspaceMap.rope(6, basis=np.eye(6)), 11.0, x)
        assert np.max(np.abs(a - b)) < 1e-15

    def test_basis_conjugation(self, rng):
        B = random_orthogonal(rng, 8)
        x = rng.normal(size=8)
        with_basis = apply_ms(MultiSubspaceMap.rope(8, basis=B), 5.0, x)
        conj = B @ apply_ms(MultiSubspaceMap.rope(8), 5.0, B.T @ x)
        assert np.max(np.abs(with_basis - conj)) < 1e-10

    def test_odd_dimension_fixes_last(self, rng):
        x = rng.normal(size=5)
        y = apply_ms(MultiSubspaceMap.rope(5), 3.0, x)
        assert y[-1] == x[-1]
        assert np.max(np.abs(y - rope_reference(5, 10000.0, 3.0, x))) < 1e-15

    def test_batch_positions(self, rng, backend):
        m = MultiSubspaceMap.rope(8)
        X = rng.normal(size=(6, 8))
        pos = np.arange(6) * 101.0
        Y = apply_ms(m, pos, X)
        for i in range(6):
            assert np.array_equal(Y[i], apply_ms(m, pos[i], X[i]))

    def test_rejects_bad_input(self):
        m = MultiSubspaceMap.rope(4)
        with pytest.raises(ValueError):
            apply_ms(m, 1.0, np.ones(5))
        with pytest.raises(ValueError):
            apply_ms(m, 1.0, [1.0, np.nan, 0.0, 0.0])

    def test_relative_law_dense(self, rng):
        m = MultiSubspaceMap.rope(8, basis=random_orthogonal(rng, 8))
        I = np.eye(8)
        for s, t in rng.integers(-500, 500, size=(10, 2)):
            Gs = apply_ms(m, float(s), I).T
            Gt = apply_ms(m, float(t), I).T
            Gts = apply_ms(m, float(t - s), I).T
            assert np.max(np.abs(Gs.T @ Gt - Gts)) < 1e-9


class TestRopeRecovery:
    @pytest.mark.parametrize("d", [4, 64, 128])
    def test_matches_reference(self, rng, backend, d):
        m = MultiSubspaceMap.rope(d)
        for n in list(rng.integers(0, 4097, size=40)) + [0, 4096]:
            x = rng.normal(size=d)
            assert np.max(np.abs(apply_ms(m, int(n), x) - rope_reference(d, 10000.0, int(n), x))) <= 1e-12

    def test_reference_matches_complex_oracle(self, rng):
        # [PAPER] base-10000 RoPE as complex rotation of consecutive pairs
        for d in (4, 16):
            x = rng.normal(size=d)
            assert np.max(np.abs(rope_reference(d, 10000.0, 7, x) - rope_complex(x, 7))) < 1e-13

    def test_reference_half_turn(self, rng):
        # [DERIVED] d=2: theta_1 = 1 and n = pi gives exact negation up to rounding
        x = rng.normal(size=2)
        assert np.max(np.abs(rope_reference(2, 10000.0, math.pi, x) + x)) < 1e-15

    def test_reference_identity(self, rng):
        x = rng.normal(size=6)
        assert np.array_equal(rope_reference(6, 500.0, 0, x), x)

    def test_reference_rejects_small_base(self):
        with pytest.raises(ValueError):
            rope_reference(4, 1.0, 1, np.ones(4))


@settings(max_examples=50, deadline=None)
@given(half=st.integers(1, 32), n=st.floats(-1e4, 1e4), seed=st.integers(0, 2 ** 32 - 1))
def test_isometry_property(half, n, seed):
    x = np.random.default_rng(seed).normal(size=2 * half)
    y = apply_ms(MultiSubspaceMap.rope(2 * half), n, x)
    assert abs(np.linalg.norm(y) - np.linalg.norm(x)) <= 1e-10 * np.linalg.norm(x)


class TestCoordinates:
    def maps(self):
        gx = MultiSubspaceMap(12, [1.0, 0.1], planes=[[0, 1], [2, 3]])
        gy = MultiSubspaceMap(12, [0.5, 0.05], planes=[[4, 5], [6, 7]])
        gz = MultiSubspaceMap(12, [0.3, 0.03], planes=[[8, 9], [10, 11]])
        return gx, gy, gz

    def test_2d(self, rng):
        gx, gy, _ = self.maps()
        x = rng.normal(size=12)
        assert np.array_equal(apply_2d(gx, gy, 0, 0, x), x)
        assert np.max(np.abs(apply_2d(gx, gy, 3.0, 0.0, x) - apply_ms(gx, 3.0, x))) < 1e-15
        swapped = apply_ms(gy, 2.0, apply_ms(gx, 3.0, x))
        assert np.max(np.abs(apply_2d(gx, gy, 3.0, 2.0, x) - swapped)) < 1e-12

    def test_3d_order_free(self, rng):
        import itertools
        maps = self.maps()
        pos = (3.0, -2.0, 5.0)
        x = rng.normal(size=12)
        ref = apply_3d(*maps, *pos, x)
        assert np.max(np.abs(apply_3d(*maps, pos[0], pos[1], 0.0, x) - apply_2d(maps[0], maps[1], pos[0], pos[1], x))) == 0.0
        for order in itertools.permutations(range(3)):
            y = x
            for i in order:
                y = apply_ms(maps[i], pos[i], y)
            assert np.max(np.abs(y - ref)) < 1e-12

    def test_overlap_rejected(self):
        gx = MultiSubspaceMap(4, [1.0], planes=[[0, 1]])
        with pytest.raises(ValueError):
            apply_2d(gx, gx, 1.0, 1.0, np.ones(4))
        gy = MultiSubspaceMap(4, [1.0], planes=[[2, 3]])
        with pytest.raises(ValueError):
            apply_3d(gx, gy, gx, 1, 1, 1, np.ones(4))


class TestThinCompression:
    def make(self, rng, d, r):
        E = np.linalg.qr(rng.normal(size=(d, r)))[0]
        M = rng.normal(size=(r, r))
        return ThinCompression(E, M - M.T)

    def test_validation(self, rng):
        with pytest.raises(ValueError):
            ThinCompression(rng.normal(size=(5, 2)), np.zeros((2, 2)))
        E = np.linalg.qr(rng.normal(size=(5, 2)))[0]
        with pytest.raises(ValueError):
            ThinCompression(E, np.eye(2))

    def test_zero_generator(self, rng):
        E = np.linalg.qr(rng.normal(size=(6, 4)))[0]
        tc = ThinCompression(E, np.zeros((4, 4)))
        assert noncommuting_spectrum(tc, 3.0) == [1.0] * 6

    def test_single_plane(self, rng):
        # [DERIVED] dense eigensolve of exp(n E (theta J2) E^T)
        d, theta, n = 7, 0.6, 2.5
        E = np.linalg.qr(rng.normal(size=(d, 2)))[0]
        tc = ThinCompression(E, theta * np.array([[0.0, -1.0], [1.0, 0.0]]))
        closed = noncommuting_spectrum(tc, n)
        assert closed[:2] == [complex(math.cos(n * theta), math.sin(n * theta)),
                              complex(math.cos(n * theta), -math.sin(n * theta))]
        dense = np.linalg.eigvals(expm(n * tc.generator()))
        assert match(closed, dense) < 1e-7

    def test_zero_position(self, rng):
        assert noncommuting_spectrum(self.make(rng, 6, 4), 0.0) == [1.0] * 6

    @pytest.mark.parametrize("d,r", [(8, 4), (16, 6), (32, 8), (9, 5)])
    def test_spectrum_preserved(self, rng, d, r):
        tc = self.make(rng, d, r)
        n = rng.uniform(-3, 3)
        dense = np.linalg.eigvals(expm(n * tc.generator()))
        assert match(noncommuting_spectrum(tc, n), dense) < 1e-7
        if r % 2:
            assert tc.zero_modes >= 1

    def test_apply_matches_dense(self, rng):
        tc = self.make(rng, 10, 4)
        x = rng.normal(size=10)
        assert np.max(np.abs(tc.apply(1.7, x) - expm(1.7 * tc.generator()) @ x)) < 1e-12

    def test_schur_angles(self):
        L = np.zeros((4, 4))
        L[0, 1], L[1, 0], L[2, 3], L[3, 2] = -2.0, 2.0, -0.5, 0.5
        assert np.allclose(schur_mode_angles(L), [2.0, 0.5])


def match(a, b):
    from scipy.optimize import linear_sum_assignment
    a, b = np.asarray(a, dtype=complex), np.asarray(b, dtype=complex)
    cost = np.abs(a[:, None] - b[None, :])
    r, c = linear_sum_assignment(cost)
    return cost[r, c].max()


def test_canonical_planes_helper():
    assert canonical_planes(6, 2).tolist() == [[0, 1], [2, 3]]
