import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from erba.diffcore import ModelParams, Tensor, grad_check
from erba.esda import (
    BatchTooSmallError,
    KernelConfig,
    StageSummaries,
    esda_bandwidths,
    esda_loss,
    median_bandwidth,
    mmd2,
    rbf_kernel,
    stage_summaries,
)


def mmd2_loops(a, b, sigma):
    """Double-loop reference for the diagonal-free estimator with 1/N² normalization."""
    def k(x, y):
        return math.exp(-sum((xi - yi) ** 2 for xi, yi in zip(x, y)) / (2 * sigma * sigma))

    na, nb = len(a), len(b)
    saa = sum(k(a[p], a[q]) for p in range(na) for q in range(na) if p != q)
    sbb = sum(k(b[p], b[q]) for p in range(nb) for q in range(nb) if p != q)
    sab = sum(k(a[p], b[q]) for p in range(na) for q in range(nb))
    return saa / na**2 + sbb / nb**2 - 2 * sab / (na * nb)


def summaries(rng, n, d=3):
    return [StageSummaries(*(Tensor(rng.normal(size=(1, d))) for _ in range(3))) for _ in range(n)]


class TestStageSummaries:
    def test_pooling(self):
        h0 = Tensor([[1.0, 0.0], [3.0, 2.0]])
        s = stage_summaries(h0, h0, Tensor([[5.0, 6.0]]))
        np.testing.assert_array_equal(s.z0.data, [[2.0, 1.0]])
        assert s.z1.data.tobytes() == s.z0.data.tobytes()
        np.testing.assert_array_equal(s.z2.data, [[5.0, 6.0]])
        one = stage_summaries(Tensor([[4.0, 2.0]]), Tensor([[0.0, 0.0]]), Tensor([[0.0, 0.0]]))
        np.testing.assert_array_equal(one.z0.data, [[4.0, 2.0]])


class TestKernel:
    def test_values(self):
        a = Tensor([[1.0, 2.0]])
        assert rbf_kernel(a, a, 0.7).item() == 1.0
        sigma = 1.3
        b = Tensor([[1.0 + sigma * math.sqrt(2.0), 2.0]])
        assert rbf_kernel(a, b, sigma).item() == pytest.approx(math.exp(-1.0), abs=1e-15)
        far = [rbf_kernel(a, Tensor([[1.0 + t, 2.0]]), 1.0).item() for t in (1, 2, 4, 8, 40)]
        assert all(x > y for x, y in zip(far, far[1:])) and far[-1] < 1e-300

    def test_rejects_bad_sigma(self):
        with pytest.raises(ValueError):
            rbf_kernel(Tensor([[0.0]]), Tensor([[0.0]]), 0.0)


class TestMedianBandwidth:
    def test_examples(self):
        assert median_bandwidth(np.array([[0.0], [2.0], [4.0]])) == 2.0
        assert median_bandwidth(np.array([[1.0, 1.0], [1.0, 1.0]])) == 1.0
        assert median_bandwidth(np.array([[0.0, 0.0], [3.0, 4.0]])) == 5.0

    def test_zero_distances_excluded(self):
        assert median_bandwidth(np.array([[0.0], [0.0], [0.0], [3.0]])) == 3.0

    def test_too_few_points(self):
        with pytest.raises(BatchTooSmallError):
            median_bandwidth(np.array([[1.0]]))


class TestMmd2:
    @pytest.mark.parametrize("n", [2, 4, 9])
    def test_identical_sets(self, n):
        a = Tensor(np.random.default_rng(n).normal(size=(n, 3)))
        assert abs(mmd2(a, a, 0.8).item() + 2.0 / n) <= 1e-12
        if n == 4:
            assert abs(mmd2(a, a, 0.8).item() + 0.5) <= 1e-12

    def test_separated_clusters(self):
        rng = np.random.default_rng(0)
        n = 6
        a = Tensor(rng.normal(0.0, 1e-3, (n, 2)))
        b = Tensor(rng.normal(0.0, 1e-3, (n, 2)) + 100.0)
        assert mmd2(a, b, 1.0).item() == pytest.approx(2 * (n - 1) / n, abs=1e-5)

    def test_too_small(self):
        with pytest.raises(BatchTooSmallError):
            mmd2(Tensor([[0.0]]), Tensor([[0.0], [1.0]]), 1.0)

    @settings(max_examples=40)
    @given(st.integers(2, 12), st.integers(2, 12), st.integers(1, 5), st.integers(0, 10_000))
    def test_matches_loops_symmetric_and_rigid_invariant(self, na, nb, d, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(na, d)), rng.normal(size=(nb, d))
        sigma = float(rng.uniform(0.3, 3.0))
        val = mmd2(Tensor(a), Tensor(b), sigma).item()
        assert abs(val - mmd2_loops(a.tolist(), b.tolist(), sigma)) <= 1e-12
        assert abs(val - mmd2(Tensor(b), Tensor(a), sigma).item()) <= 1e-12
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        t = rng.normal(size=d)
        moved = mmd2(Tensor(a @ q + t), Tensor(b @ q + t), sigma).item()
        assert abs(val - moved) <= 1e-12

    def test_monotone_separation(self):
        rng = np.random.default_rng(1)
        shifts = [0.0, 0.5, 1.0, 2.0, 4.0]
        means = []
        for s in shifts:
            vals = [mmd2(Tensor(rng.normal(size=(16, 2))), Tensor(rng.normal(size=(16, 2)) + [s, 0.0]), 1.0).item()
                    for _ in range(100)]
            means.append(np.mean(vals))
        assert all(x <= y for x, y in zip(means, means[1:]))


class TestEsdaLoss:
    def test_identical_stages(self):
        rng = np.random.default_rng(0)
        batch = []
        for _ in range(5):
            z = Tensor(rng.normal(size=(1, 3)))
            batch.append(StageSummaries(z, z, z))
        assert abs(esda_loss(batch).item() - 2 * (-2 / 5)) <= 1e-12

    def test_batch_of_two_matches_loops(self):
        batch = summaries(np.random.default_rng(3), 2)
        cfg = KernelConfig()
        s1, s2 = esda_bandwidths(batch, cfg)
        z = {k: [getattr(s, k).data[0].tolist() for s in batch] for k in ("z0", "z1", "z2")}
        ref = mmd2_loops(z["z1"], z["z0"], s1) + mmd2_loops(z["z2"], z["z0"], s2)
        assert abs(esda_loss(batch, cfg).item() - ref) <= 1e-12

    def test_per_term_median_over_union(self):
        batch = summaries(np.random.default_rng(4), 4)
        s1, s2 = esda_bandwidths(batch, KernelConfig())
        z0 = np.vstack([s.z0.data for s in batch])
        assert s1 == median_bandwidth(np.vstack([np.vstack([s.z1.data for s in batch]), z0]))
        assert s2 == median_bandwidth(np.vstack([np.vstack([s.z2.data for s in batch]), z0]))
        assert esda_bandwidths(batch, KernelConfig("fixed", 2.5)) == (2.5, 2.5)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(5)
        batch = summaries(rng, 6)
        r = Rotation.random(random_state=rng).as_matrix()
        moved = [StageSummaries(*(Tensor(getattr(s, k).data @ r.T) for k in ("z0", "z1", "z2"))) for s in batch]
        assert abs(esda_loss(batch).item() - esda_loss(moved).item()) <= 1e-12

    def test_too_small(self):
        with pytest.raises(BatchTooSmallError):
            esda_loss(summaries(np.random.default_rng(0), 1))

    def test_gradients_with_frozen_bandwidth(self):
        p = ModelParams()
        rng = np.random.default_rng(6)
        batch = []
        for j in range(4):
            batch.append(StageSummaries(Tensor(rng.normal(size=(1, 3))), p.add(f"z1_{j}", rng.normal(size=(1, 3))),
                                        p.add(f"z2_{j}", rng.normal(size=(1, 3)))))
        sigmas = esda_bandwidths(batch, KernelConfig())
        for r in grad_check(lambda _: esda_loss(batch, sigmas=sigmas), p):
            assert r.max_rel_error < 1e-4, r
