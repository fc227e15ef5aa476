import csv
import io
import math

import numpy as np
import pytest

from grape.path_integral import (PathBiasRow, ProbeStore, bias_row, bias_triangle, check_link, edge_potential,
                                 endpoint_independent_row, log_sigmoid, make_probes, path_product_check,
                                 phase_modulated_bias, rotate_probe)

from oracles import log_sigmoid as ref_log_sigmoid, path_bias_double_loop, rotate_pairs


def store_from(P, alpha=1.0, link=None):
    store = ProbeStore(P.shape[1], alpha=alpha, link=link, capacity=4)
    store.extend(P)
    return store


def random_probes(rng, L, d):
    return make_probes(rng.normal(size=(L, 3 * d)), d, rng=rng)


class TestProbes:
    def test_rms_normalised(self, rng):
        P = random_probes(rng, 10, 8)
        assert np.allclose(np.mean(P * P, axis=1), 1.0, atol=1e-5)

    def test_weights_shape(self, rng):
        with pytest.raises(ValueError):
            make_probes(rng.normal(size=(4, 6)), 4, weights=np.ones((4, 5)))

    def test_rotation_matches_pairwise_reference(self, rng):
        for l in (0, 1, 7, 1000):
            p = rng.normal(size=6)
            r = rotate_probe(p, l)
            assert np.max(np.abs(r - rotate_pairs(p, l))) < 1e-13
            assert abs(np.linalg.norm(r) - np.linalg.norm(p)) < 1e-10

    def test_store_grows_and_is_read_only(self, rng):
        P = random_probes(rng, 20, 4)
        store = store_from(P)
        assert len(store) == 20
        assert np.array_equal(store.probes, P)
        with pytest.raises(ValueError):
            store.rotated[0, 0] = 1.0

    def test_store_rejects_bad_probe(self):
        store = ProbeStore(4)
        with pytest.raises(ValueError):
            store.append(np.ones(3))
        with pytest.raises(ValueError):
            store.append([1.0, np.nan, 0.0, 0.0])


class TestLink:
    def test_log_sigmoid(self):
        for z in (-30.0, -1.0, 0.0, 2.5, 40.0):
            assert log_sigmoid(z) == pytest.approx(ref_log_sigmoid(z), rel=1e-14)
        assert log_sigmoid(0.0) == math.log(0.5)

    def test_check_link(self):
        check_link(log_sigmoid)
        with pytest.raises(ValueError):
            check_link(lambda z: -abs(z) - 1.0)
        with pytest.raises(ValueError):
            check_link(lambda z: 0.5 * z)
        with pytest.raises(ValueError):
            check_link(lambda z: log_sigmoid(3.0 * z))

    def test_alpha_must_be_positive(self):
        for alpha in (0.0, -1.0, float("nan")):
            with pytest.raises(ValueError):
                ProbeStore(4, alpha=alpha)


class TestEdgePotential:
    def test_orthogonal_pair(self):
        # p_1 is chosen so that R_1 p_1 = e2, orthogonal to p_2 = e1
        P = np.array([[1.0, 0.0], rotate_pairs(np.array([0.0, 1.0]), -1.0), [1.0, 0.0]])
        store = store_from(P, alpha=3.0)
        assert edge_potential(store, 2, 1) == pytest.approx(3.0 * math.log(0.5), abs=1e-15)

    def test_matches_scalar_reference(self, rng):
        P = random_probes(rng, 12, 6)
        store = store_from(P, alpha=0.7)
        for t in range(12):
            for l in range(1, t + 1):
                ref = 0.7 * ref_log_sigmoid(float(P[t] @ rotate_pairs(P[l], l)) / 6)
                assert abs(edge_potential(store, t, l) - ref) < 1e-14
                assert edge_potential(store, t, l) < 0

    def test_causality(self, rng):
        store = store_from(random_probes(rng, 5, 4))
        with pytest.raises(ValueError):
            edge_potential(store, 2, 3)
        with pytest.raises(IndexError):
            edge_potential(store, 5, 1)


class TestBiasRow:
    def test_first_row_is_empty(self, rng):
        row = bias_row(store_from(random_probes(rng, 3, 4)), 0)
        assert row.t == 0 and len(row.psi) == 0
        assert row.b(0) == 0.0

    def test_constant_potential_is_alibi(self):
        theta = 0.3
        row = PathBiasRow.from_potentials(np.full(40, -theta))
        for j in range(41):
            assert row.b(j) == pytest.approx(-theta * (40 - j), abs=1e-12)
        row = endpoint_independent_row(np.full(41, -theta), 40)
        assert row.b(0) == pytest.approx(-theta * 40, abs=1e-12)

    def test_double_loop(self, rng):
        L, d = 48, 8
        P = random_probes(rng, L, d)
        store = store_from(P, alpha=1.3)
        for t in range(L):
            row = bias_row(store, t)
            ref = np.array([path_bias_double_loop(P, t, j, 1.3) for j in range(t + 1)])
            assert np.max(np.abs(row.bias - ref)) <= 1e-12

    def test_custom_link(self, rng):
        P = random_probes(rng, 10, 4)
        link = lambda z: log_sigmoid(z) - 0.5
        store = store_from(P, link=link)
        row = bias_row(store, 9)
        ref = math.fsum(link(float(P[9] @ rotate_pairs(P[l], l)) / 4) for l in range(1, 10))
        assert row.b(0) == pytest.approx(ref, abs=1e-12)

    def test_non_positive_and_semigroup(self, rng):
        P = random_probes(rng, 30, 6)
        store = store_from(P)
        for t in range(30):
            row = bias_row(store, t)
            assert row.b(t) == 0.0
            assert np.all(row.bias <= 0.0)
            assert np.all(np.diff(row.bias) >= 0.0)
            for j in range(t + 1):
                for m in range(j, t + 1):
                    partial = math.fsum(row.psi[j: m])
                    assert abs(row.b(j) - (row.b(m) + partial)) <= 1e-12

    def test_streaming_matches_batch(self, rng):
        L, d = 64, 8
        P = random_probes(rng, L, d)
        batch = store_from(P)
        live = ProbeStore(d, capacity=1)
        for t in range(L):
            live.append(P[t])
            a, b = bias_row(live, t), bias_row(batch, t)
            assert np.max(np.abs(a.bias - b.bias), initial=0.0) <= 1e-12

    def test_rows_are_frozen(self, rng):
        row = bias_row(store_from(random_probes(rng, 4, 4)), 3)
        with pytest.raises(ValueError):
            row.bias[0] = 0.0
        with pytest.raises(IndexError):
            row.b(4)

    def test_triangle_csv(self, rng):
        store = store_from(random_probes(rng, 5, 4))
        rows = bias_triangle(store)
        assert len(rows) == 15
        buf = io.StringIO()
        csv.writer(buf).writerows(rows)
        parsed = list(csv.reader(io.StringIO(buf.getvalue())))
        assert [int(r[0]) for r in parsed] == [t for t in range(5) for _ in range(t + 1)]
        assert float(parsed[-1][2]) == 0.0

    def test_endpoint_independent_errors(self):
        with pytest.raises(IndexError):
            endpoint_independent_row([0.0, -1.0], 2)


class TestPathProduct:
    def test_empty(self):
        assert np.array_equal(path_product_check([]), np.eye(4))

    def test_single(self):
        P = path_product_check([-0.25], d=3)
        expected = np.eye(5)
        expected[4, 3] = 0.25
        assert np.array_equal(P, expected)

    def test_random(self, rng):
        psi = -rng.exponential(size=100)
        P = path_product_check(psi, d=4)
        ref = np.eye(6)
        for v in psi:
            E = np.zeros((6, 6))
            E[5, 4] = 1.0
            ref = ref @ (np.eye(6) - v * E)
        assert np.array_equal(P, ref)
        assert P[5, 4] == pytest.approx(-math.fsum(psi), rel=1e-13)


class TestPhase:
    def test_unit_phase_is_alibi(self):
        omega = np.ones(20)
        for t, j in [(20, 0), (7, 3), (11, 11)]:
            assert phase_modulated_bias(omega, 0.4, t, j) == pytest.approx(-0.4 * (t - j), abs=1e-15)

    def test_zero_offset(self, rng):
        assert phase_modulated_bias(rng.uniform(size=5), 2.0, 3, 3) == 0.0

    def test_worked_example(self):
        # [DERIVED] Phi_2 - Phi_0 = 0.5 + 1.5 = 2
        assert phase_modulated_bias([0.5, 1.5], 2.0, 2, 0) == -4.0

    def test_errors(self):
        with pytest.raises(ValueError):
            phase_modulated_bias([0.5, -0.1], 1.0, 2, 0)
        with pytest.raises(ValueError):
            phase_modulated_bias([0.5], -1.0, 1, 0)
        with pytest.raises(IndexError):
            phase_modulated_bias([0.5], 1.0, 0, 1)
