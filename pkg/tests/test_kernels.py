import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hsplid.kernels import (
    KernelConfig,
    KernelError,
    center,
    gaussian_gram,
    gram,
    hsic,
    linear_gram,
    median_bandwidth,
    nocco,
    normalized_gram,
    one_hot,
)


def psd(rng, n, rank=None):
    A = rng.normal(size=(n, rank or n))
    return A @ A.T


def hsic_double_sum(Kx, Kz):
    # independent oracle: explicit H and index-by-index trace of Kx H Kz H
    n = len(Kx)
    H = np.eye(n) - np.ones((n, n)) / n
    A = H @ Kx @ H
    Bm = Kz @ H @ H
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += A[i, j] * Bm[j, i]
    return total / (n - 1) ** 2


class TestGram:
    def test_identical_vectors(self):
        K = gaussian_gram(np.array([[1.0, 2.0], [1.0, 2.0]]))
        assert torch.equal(K, torch.ones(2, 2, dtype=torch.float64))

    def test_unit_distance_value(self):
        K = gaussian_gram(np.array([[0.0], [1.0]]), 1.0)
        assert abs(K[0, 1].item() - math.exp(-0.5)) < 1e-15
        assert abs(K[0, 1].item() - 0.60653) < 1e-5

    def test_linear_one_hot(self):
        y = np.array([0, 1, 0, 2])
        K = linear_gram(one_hot(y, 3)).numpy()
        assert np.array_equal(K, (y[:, None] == y[None, :]).astype(float))

    def test_gaussian_matches_direct(self, rng):
        v = rng.normal(size=(7, 3))
        K = gaussian_gram(v, 0.7).numpy()
        ref = np.exp(-((v[:, None] - v[None]) ** 2).sum(-1) / (2 * 0.49))
        assert np.allclose(K, ref, atol=1e-14)

    def test_errors(self):
        with pytest.raises(KernelError, match="insufficient samples"):
            gaussian_gram(np.zeros((1, 3)))
        with pytest.raises(KernelError):
            gaussian_gram(np.zeros((3, 3)), 0.0)
        with pytest.raises(KernelError):
            KernelConfig(bandwidth=0.0)
        with pytest.raises(KernelError):
            KernelConfig(nocco_reg=0.0)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(1, 4)),
                  elements=st.floats(-50, 50, allow_nan=False)))
    def test_symmetric_unit_diagonal(self, v):
        K = gram(v).numpy()
        assert np.abs(K - K.T).max() <= 1e-12
        assert np.all(np.diag(K) == 1.0)
        assert np.linalg.eigvalsh(K).min() >= -1e-8 * max(1.0, len(K))


class TestMedianBandwidth:
    @pytest.mark.parametrize("pts,expected", [([0, 1, 2], 1.0), ([0, 4], 4.0), ([3, 3, 3], 1.0)])
    def test_examples(self, pts, expected):
        assert median_bandwidth(np.array(pts, dtype=float)).item() == expected

    def test_matches_scipy(self, rng):
        from scipy.spatial.distance import pdist

        v = rng.normal(size=(11, 4))
        assert abs(median_bandwidth(v).item() - np.median(pdist(v))) < 1e-12

    def test_needs_two(self):
        with pytest.raises(KernelError):
            median_bandwidth(np.zeros((1, 2)))


class TestHsic:
    def test_constant_kernel_zero(self, rng):
        assert abs(hsic(psd(rng, 6), np.full((6, 6), 3.0)).item()) < 1e-12

    @pytest.mark.parametrize("a,b", [(0.3, -0.2), (0.9, 0.9), (-1.0, 0.5)])
    def test_two_sample_closed_form(self, a, b):
        Kx = np.array([[1, a], [a, 1]])
        Kz = np.array([[1, b], [b, 1]])
        assert abs(hsic(Kx, Kz).item() - (1 - a) * (1 - b)) <= 1e-12
        assert abs(hsic_double_sum(Kx, Kz) - (1 - a) * (1 - b)) <= 1e-12

    @pytest.mark.parametrize("n", [2, 3, 8, 16])
    def test_double_sum_oracle(self, rng, n):
        for _ in range(5):
            Kx, Kz = psd(rng, n), psd(rng, n)
            assert abs(hsic(Kx, Kz).item() - hsic_double_sum(Kx, Kz)) <= 1e-10

    def test_mismatch(self, rng):
        with pytest.raises(KernelError, match="dimension mismatch"):
            hsic(psd(rng, 3), psd(rng, 4))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 10), st.integers(0, 2**31 - 1))
    def test_symmetric_and_nonnegative(self, n, seed):
        r = np.random.default_rng(seed)
        Kx, Kz = psd(r, n, 2), psd(r, n, 3)
        h1, h2 = hsic(Kx, Kz).item(), hsic(Kz, Kx).item()
        assert h1 == h2
        assert h1 >= -1e-10


class TestNocco:
    def test_constant_zero(self, rng):
        assert abs(nocco(psd(rng, 5), np.ones((5, 5))).item()) < 1e-12

    def test_self_dependence_rank(self, rng):
        n = 6
        v = rng.normal(size=(n, 3))
        K = gaussian_gram(v, 1.0).numpy()
        rank = np.linalg.matrix_rank(center(K).numpy(), tol=1e-9)
        assert rank == n - 1
        val = nocco(K, K, 1e-6).item()
        assert abs(val - rank) < 1e-2

    @pytest.mark.parametrize("c", [0.1, 10.0])
    def test_scale_insensitive(self, rng, c):
        # holds when the nonzero spectrum of HKH sits well above n*eps
        X, Z = rng.normal(size=(20, 3)), rng.normal(size=(20, 2))
        Kx, Kz = linear_gram(X).numpy(), linear_gram(Z).numpy()
        assert abs(nocco(c * Kx, Kz).item() - nocco(Kx, Kz).item()) <= 1e-3

    def test_scale_insensitive_in_ridge_limit(self, rng):
        X, Z = rng.normal(size=(20, 3)), rng.normal(size=(20, 2))
        Kx, Kz = gaussian_gram(X, 0.5).numpy(), gaussian_gram(Z, 0.5).numpy()
        gaps = [abs(nocco(10 * Kx, Kz, eps).item() - nocco(Kx, Kz, eps).item()) for eps in (1e-3, 1e-5, 1e-7)]
        assert gaps[0] > gaps[1] > gaps[2]

    def test_matches_explicit_inverse(self, rng):
        n, eps = 7, 1e-3
        Kx, Kz = psd(rng, n), psd(rng, n)
        H = np.eye(n) - 1 / n
        def norm(K):
            Kc = H @ K @ H
            return Kc @ np.linalg.inv(Kc + n * eps * np.eye(n))
        ref = np.trace(norm(Kx) @ norm(Kz))
        assert abs(nocco(Kx, Kz, eps).item() - ref) < 1e-9

    def test_range(self, rng):
        for _ in range(5):
            v = nocco(psd(rng, 8), psd(rng, 8)).item()
            assert -1e-9 <= v <= 8

    def test_singular_reports_condition(self):
        # center(-n eps I) + n eps I = eps 11^T, which is rank one
        n, eps = 4, 1e-2
        with pytest.raises(KernelError, match="condition number"):
            normalized_gram(-n * eps * np.eye(n), eps)


def test_independence_decay():
    med = []
    for n in (64, 128, 256, 512):
        vals = []
        for seed in range(20):
            r = np.random.default_rng(seed)
            X, Z = r.normal(size=(n, 2)), r.normal(size=(n, 2))
            vals.append(hsic(gaussian_gram(X), gaussian_gram(Z)).item())
        med.append(np.median(vals))
    assert all(a > b for a, b in zip(med, med[1:]))
    assert med[-1] < 0.05
