"""Stacked PCA: first PCs, sign rule, sphere-to-plane map, incremental PCA, affinity."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import subspace_angles

from iepkd.spca import (DegenerateInputError, IpcaState, UninitializedStateError, affinity, center_vector,
                        compress, first_pc, ipca_update, run_spca, sign_correct, stereographic)
from iepkd.tensor import NumericalError


def power_iteration(m, iters=2000):
    v = np.ones(m.shape[0]) / np.sqrt(m.shape[0])
    for _ in range(iters):
        v = m @ v
        v /= np.linalg.norm(v)
    return v


def plane_data(n, d, seed, gap=2.0):
    """Rows on the plane orthogonal to the center vector with a clear spectral gap at d/2."""
    rng = np.random.default_rng(seed)
    o = center_vector(d)
    basis = np.linalg.qr(np.column_stack([o, rng.normal(size=(d, d - 1))]))[0][:, 1:]
    k = d // 2
    scales = np.concatenate([np.linspace(4.0, 2.0 * gap, k), np.linspace(1.0, 0.2, d - 1 - k)])
    return (rng.normal(size=(n, d - 1)) * scales) @ basis.T + 0.3 * (basis @ rng.normal(size=d - 1))


def batch_pca(x, k):
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    return s[:k], vt[:k].T


class TestFirstPc:
    def test_matches_power_iteration(self):
        f = np.random.default_rng(0).normal(size=(16, 8))
        v = power_iteration(f.T @ f)
        got = first_pc(f)
        np.testing.assert_allclose(np.abs(got @ v), 1.0, atol=1e-10)
        np.testing.assert_allclose(got, sign_correct(v), atol=1e-6)

    def test_batched_matches_single(self):
        f = np.random.default_rng(1).normal(size=(3, 9, 6))
        np.testing.assert_allclose(first_pc(f), np.stack([first_pc(x) for x in f]), atol=1e-12)

    def test_all_zero_map(self):
        with pytest.raises(DegenerateInputError):
            first_pc(np.zeros((4, 4)))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (6, 4), elements=st.floats(-10, 10)).filter(lambda a: np.abs(a).max() > 1e-3))
    def test_rows_unit_and_sign_corrected(self, f):
        p = first_pc(f)
        assert np.linalg.norm(p) == pytest.approx(1.0, abs=1e-10)
        assert p.max() + p.min() >= 0


class TestSignCorrect:
    def test_flips_negative(self):
        np.testing.assert_array_equal(sign_correct(np.array([-3.0, 1.0])), [3.0, -1.0])

    def test_tie_keeps_sign(self):
        np.testing.assert_array_equal(sign_correct(np.array([1.0, -1.0])), [1.0, -1.0])

    def test_rows_independently(self):
        m = np.array([[-2.0, 1.0], [2.0, -1.0]])
        np.testing.assert_array_equal(sign_correct(m), [[2.0, -1.0], [2.0, -1.0]])


class TestStereographic:
    def test_center_maps_to_origin(self):
        o = center_vector(6)
        np.testing.assert_allclose(stereographic(o, o), 0.0, atol=1e-12)

    def test_orthogonal_doubles(self):
        o = center_vector(4)
        p = np.array([1.0, -1.0, 0.0, 0.0]) / np.sqrt(2)
        np.testing.assert_allclose(stereographic(p, o), 2 * p, atol=1e-12)

    def test_matches_arccos_form(self):
        rng = np.random.default_rng(2)
        o = center_vector(5)
        p = rng.normal(size=(20, 5))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        p = p[p @ o > -0.9]
        literal = (p + o) / (np.cos(np.arccos(p @ o) / 2) ** 2)[:, None] - 2 * o
        np.testing.assert_allclose(stereographic(p, o), literal, atol=1e-10)

    def test_antipode_raises(self):
        o = center_vector(4)
        with pytest.raises(NumericalError):
            stereographic(-o, o)

    def test_orthogonal_to_center_over_many_trials(self):
        rng = np.random.default_rng(3)
        for d in (4, 16, 64):
            o = center_vector(d)
            p = rng.normal(size=(10_000, d))
            p /= np.linalg.norm(p, axis=1, keepdims=True)
            p = p[p @ o > -1 + 1e-3]
            assert np.abs(stereographic(p, o) @ o).max() < 1e-9


class TestIpca:
    def test_first_update_equals_batch_pca(self):
        x = plane_data(40, 12, seed=4)
        state = ipca_update(IpcaState.empty(12), x)
        s, v = batch_pca(x, 6)
        np.testing.assert_allclose(state.S, s, atol=1e-10)
        np.testing.assert_allclose(np.abs(np.sum(state.V * v, axis=0)), 1.0, atol=1e-10)
        np.testing.assert_allclose(state.mu, 0.9 * x.mean(axis=0), atol=1e-14)
        assert state.updates_seen == 1

    def test_same_batch_twice_gets_closer(self):
        x = plane_data(64, 16, seed=5)
        _, v_ref = batch_pca(x, 8)
        # start from a state fitted to different data
        state = ipca_update(IpcaState.empty(16), plane_data(64, 16, seed=6))
        angles = [np.max(subspace_angles(state.V, v_ref))]
        for _ in range(2):
            state = ipca_update(state, x)
            angles.append(np.max(subspace_angles(state.V, v_ref)))
        assert angles[0] > angles[1] > angles[2]

    def test_identical_rows(self):
        x = np.tile(plane_data(1, 8, seed=7), (5, 1))
        state = ipca_update(IpcaState.empty(8), x)
        np.testing.assert_allclose(state.S, 0.0, atol=1e-12)
        np.testing.assert_allclose(state.V.T @ state.V, np.eye(4), atol=1e-8)
        assert state.rank == 0

    def test_small_first_batch_zero_pads(self):
        x = plane_data(3, 16, seed=8)
        state = ipca_update(IpcaState.empty(16), x)
        assert state.S.shape == (8,) and state.partially_ranked
        assert np.all(state.S[2:] < 1e-10)

    def test_convergence_to_full_batch_pca(self):
        data = plane_data(256, 32, seed=9)
        _, v_ref = batch_pca(data, 16)
        state = IpcaState.empty(32)
        rng = np.random.default_rng(10)
        for _ in range(50):
            state = ipca_update(state, data[rng.choice(256, 64, replace=False)])
        assert np.degrees(np.max(subspace_angles(state.V, v_ref))) < 5.0

    def test_invariants_after_every_update(self):
        state = IpcaState.empty(10)
        for seed in range(8):
            state = ipca_update(state, plane_data(7, 10, seed=seed))
            np.testing.assert_allclose(state.V.T @ state.V, np.eye(5), atol=1e-8)
            assert np.all(np.diff(state.S) <= 0)
            assert np.all(state.V.max(axis=0) + state.V.min(axis=0) >= 0)

    def test_deterministic_trajectory(self):
        def run():
            s = IpcaState.empty(8)
            for seed in range(5):
                s = ipca_update(s, plane_data(9, 8, seed=seed))
            return s
        a, b = run(), run()
        for name in ("V", "S", "mu"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()

    def test_odd_depth_rejected(self):
        with pytest.raises(ValueError):
            IpcaState.empty(7)


class TestCompress:
    def test_identity_projection(self):
        state = IpcaState(0, 6, np.eye(6)[:, :3], np.ones(3), np.zeros(6), updates_seen=1)
        x = np.random.default_rng(11).normal(size=(4, 6))
        np.testing.assert_array_equal(compress(x, state), x[:, :3])

    def test_mean_row_is_zero(self):
        state = ipca_update(IpcaState.empty(6), plane_data(10, 6, seed=12))
        np.testing.assert_allclose(compress(state.mu[None], state), 0.0, atol=1e-15)

    def test_matches_direct_evaluation(self):
        state = ipca_update(IpcaState.empty(8), plane_data(20, 8, seed=13))
        x = plane_data(5, 8, seed=14)
        expected = np.array([[sum((x[n, i] - state.mu[i]) * state.V[i, k] for i in range(8)) * state.S[k]
                              for k in range(4)] for n in range(5)])
        np.testing.assert_allclose(compress(x, state), expected, atol=1e-12)

    def test_uninitialized(self):
        with pytest.raises(UninitializedStateError):
            compress(np.zeros((2, 4)), IpcaState.empty(4))


class TestAffinity:
    @pytest.mark.parametrize("rows,off", [([[1, 0], [0, 1]], 0.0), ([[1, 1], [2, 2]], 1.0),
                                          ([[1, 0], [-1, 0]], -1.0)])
    def test_small_cases(self, rows, off):
        a = affinity(np.array(rows, dtype=float))
        np.testing.assert_allclose(a, [[1, off], [off, 1]], atol=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (5, 3), elements=st.floats(-100, 100))
           .filter(lambda c: np.linalg.norm(c, axis=1).min() > 1e-2))
    def test_properties(self, c):
        a = affinity(c)
        np.testing.assert_allclose(a, a.T, atol=1e-10)
        np.testing.assert_allclose(np.diag(a), 1.0, atol=1e-10)
        assert np.all(np.abs(a) <= 1 + 1e-10)


class TestRunSpca:
    def test_equal_rank_one_maps(self):
        rng = np.random.default_rng(15)
        one = np.outer(rng.uniform(0.5, 1, 9), rng.uniform(0.5, 1, 4)).reshape(3, 3, 4)
        maps = np.stack([one] * 4)
        # a state fitted elsewhere so that C is non-degenerate
        state = ipca_update(IpcaState.empty(4), plane_data(10, 4, seed=16))
        out = run_spca(maps, state, training=False)
        np.testing.assert_allclose(out.A, 1.0, atol=1e-10)

    def test_inference_is_pure(self):
        maps = np.random.default_rng(17).normal(size=(6, 3, 3, 8))
        state = run_spca(maps, IpcaState.empty(8), training=True).state
        before = state.copy()
        out = run_spca(maps, state, training=False)
        assert out.state is state
        for name in ("V", "S", "mu"):
            assert getattr(state, name).tobytes() == getattr(before, name).tobytes()
        assert state.updates_seen == before.updates_seen

    def test_plane_rows_orthogonal_to_center(self):
        maps = np.random.default_rng(18).normal(size=(6, 3, 3, 8))
        out = run_spca(maps, IpcaState.empty(8), training=True)
        np.testing.assert_allclose(np.linalg.norm(out.P, axis=1), 1.0, atol=1e-10)
        assert np.abs(out.Pbar @ center_vector(8)).max() < 1e-9
