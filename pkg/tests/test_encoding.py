import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semflow.encoding import (
    N_CLUSTERS, PCA_DIM, VLAD_DIM, Codebook, apply_pca, fit_kmeans, fit_pca, load_codebook, load_pca,
    normalize_vlad, save_codebook, save_pca, vlad_encode,
)


def test_encoding_constants():
    assert (PCA_DIM, N_CLUSTERS, VLAD_DIM) == (64, 256, 16384)


def test_full_size_vlad_length():
    rng = np.random.default_rng(0)
    cb = Codebook(rng.normal(size=(N_CLUSTERS, PCA_DIM)))
    assert vlad_encode(rng.normal(size=(50, PCA_DIM)), cb).shape == (VLAD_DIM,)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12), st.integers(1, 6))
def test_pca_matches_covariance_eigenvectors(seed, d, k):
    k = min(k, d)
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, d)) @ rng.normal(size=(d, d)) + rng.normal(size=d)
    m = fit_pca(X, k)
    cov = np.cov(X, rowvar=False)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    assert np.allclose(m.explained_variance, vals[order], rtol=1e-8, atol=1e-10)
    ref = vecs[:, order].T
    ref *= np.sign(ref[np.arange(k), np.abs(ref).argmax(axis=1)])[:, None]
    # Directions are only unique when the leading eigenvalues are distinct.
    gaps = -np.diff(np.sort(vals)[::-1][: k + 1])
    if np.all(gaps > 1e-6 * vals.max()):
        assert np.allclose(m.basis, ref, atol=1e-6)
    assert np.allclose(m.basis @ m.basis.T, np.eye(k), atol=1e-10)


def test_pca_full_rank_reconstruction():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(30, 6))
    m = fit_pca(X, 6)
    Z = apply_pca(m, X)
    assert np.allclose(Z @ m.basis + m.mean, X)


def test_pca_errors():
    with pytest.raises(ValueError):
        fit_pca(np.random.default_rng(0).normal(size=(10, 20)), 10)
    with pytest.raises(ValueError):
        fit_pca(np.random.default_rng(0).normal(size=(100, 8)), 16)
    with pytest.raises(ValueError):
        fit_pca(np.ones((100, 8)), 4)
    m = fit_pca(np.random.default_rng(0).normal(size=(100, 8)), 4)
    with pytest.raises(ValueError):
        apply_pca(m, np.zeros((3, 7)))


def _blobs(rng, k=5, per=40, d=3):
    centres = rng.uniform(-50, 50, (k, d))
    return centres, np.vstack([c + rng.normal(0, 0.5, (per, d)) for c in centres])


def test_kmeans_recovers_blobs():
    rng = np.random.default_rng(2)
    centres, X = _blobs(rng)
    cb = fit_kmeans(X, 5, seed=0)
    for c in centres:
        assert np.min(np.linalg.norm(cb.centers - c, axis=1)) < 0.5


def test_kmeans_single_cluster_is_mean():
    X = np.random.default_rng(3).normal(size=(50, 4))
    assert np.allclose(fit_kmeans(X, 1).centers[0], X.mean(axis=0))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12))
def test_kmeans_inertia_monotone_and_order_invariant(seed, k):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(80, 3))
    cb = fit_kmeans(X, k, seed=seed)
    assert all(b <= a * (1 + 1e-12) for a, b in zip(cb.inertia, cb.inertia[1:]))
    shuffled = fit_kmeans(X[rng.permutation(len(X))], k, seed=seed)
    assert np.array_equal(cb.centers, shuffled.centers)


def test_kmeans_too_few_points():
    with pytest.raises(ValueError):
        fit_kmeans(np.zeros((3, 2)), 4)
    with pytest.raises(ValueError):
        fit_kmeans(np.vstack([np.zeros((5, 2)), np.ones((5, 2))]), 3)


def brute_vlad(D, C):
    out = np.zeros_like(C)
    for x in D:
        j = int(np.argmin([np.sum((x - c) ** 2) for c in C]))
        out[j] += x - C[j]
    v = out.ravel()
    v = np.sign(v) * np.sqrt(np.abs(v))
    n = np.linalg.norm(v)
    return v / n if n else v


def test_vlad_matches_brute_force_100_instances():
    rng = np.random.default_rng(7)
    cases = []
    for _ in range(100):
        k, d = int(rng.integers(2, 17)), int(rng.integers(2, 9))
        cases.append((rng.normal(size=(int(rng.integers(1, 60)), d)), rng.normal(size=(k, d))))
    t0 = time.perf_counter()
    for D, C in cases:
        got = vlad_encode(D, Codebook(C))
        want = brute_vlad(D, C)
        assert np.max(np.abs(got - want)) <= 1e-6 * max(np.max(np.abs(want)), 1e-12)
    assert time.perf_counter() - t0 < 10


def test_normalize_vlad_examples():
    v = normalize_vlad(np.array([4.0, -9.0, 0.0]))
    assert np.allclose(v, np.array([2.0, -3.0, 0.0]) / np.sqrt(13.0))
    assert np.array_equal(normalize_vlad(np.zeros(5)), np.zeros(5))
    assert np.linalg.norm(normalize_vlad(np.array([0.01, 100.0]))) == pytest.approx(1.0)


def test_vlad_empty_set_is_zero():
    cb = Codebook(np.eye(3))
    assert np.array_equal(vlad_encode(np.zeros((0, 3)), cb), np.zeros(9))
    with pytest.raises(ValueError):
        vlad_encode(np.zeros((2, 4)), cb)


def test_model_files_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(100, 10))
    m = fit_pca(X, 4)
    save_pca(m, tmp_path / "p.sfp", seed=3)
    back = load_pca(tmp_path / "p.sfp")
    assert np.allclose(back.basis, m.basis, atol=1e-6) and back.out_dim == 4
    cb = fit_kmeans(X, 6, seed=1)
    save_codebook(cb, tmp_path / "c.sfc")
    got = load_codebook(tmp_path / "c.sfc")
    assert got.k == 6 and got.seed == 1 and got.iterations == cb.iterations
    assert np.allclose(got.centers, cb.centers, atol=1e-5)
