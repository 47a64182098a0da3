import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import spearmanr

from morphflow import varifold as vf
from morphflow.autodiff import Tape
from morphflow.varifold import (
    CompressionConfig, KernelConfig, VarifoldError, VarifoldSurface,
)


def reference_inner_product(X, Y, k):
    """Naive double-loop oracle for the discrete product."""
    total = 0.0
    for xi, ni, wi in zip(X.points, X.normals, X.weights):
        for yj, mj, wj in zip(Y.points, Y.normals, Y.weights):
            kx = np.exp(-np.sum((xi - yj) ** 2) / (2 * k.ell_x ** 2))
            kn = np.exp(-np.sum((ni - mj) ** 2) / (2 * k.ell_n ** 2))
            total += kx * kn * wi * wj
    return total


def random_surface(rng, n, scale=1.0):
    pts = rng.normal(size=(n, 3)) * scale
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    w = rng.uniform(0.2, 1.5, size=n)
    return VarifoldSurface(pts, nrm, w)


def unit_sphere_surface(n, seed=0, radius=0.5):
    """Fibonacci sphere with per-point area weights."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + np.sqrt(5.0)) * i
    pts = radius * np.stack([np.sin(phi) * np.cos(theta),
                             np.sin(phi) * np.sin(theta),
                             np.cos(phi)], axis=1)
    normals = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    w = np.full(n, 4 * np.pi * radius ** 2 / n)
    return VarifoldSurface(pts, normals, w)


# ----------------------------------------------------------------------
# kernels and products
# ----------------------------------------------------------------------

def test_gaussian_kernel_identity():
    assert vf.gaussian_kernel(np.ones(3), np.ones(3), 0.7) == 1.0


def test_gaussian_kernel_reference_points():
    u = np.zeros(3)
    v = np.array([1.0, 1.0, 0.0])  # norm sqrt(2) = ell*sqrt(2) with ell=1
    assert vf.gaussian_kernel(u, v, 1.0) == pytest.approx(np.exp(-1.0), abs=1e-15)
    v2 = np.array([0.5, 0.0, 0.0])
    assert vf.gaussian_kernel(u, v2, 0.5) == pytest.approx(np.exp(-0.5), abs=1e-15)


def test_inner_product_single_atom():
    X = VarifoldSurface([[0, 0, 0]], [[0, 0, 1]], [1.0])
    k = KernelConfig(1.0, 1.0)
    assert vf.inner_product(X, X, k) == pytest.approx(1.0, abs=1e-15)


def test_inner_product_opposite_normals():
    X = VarifoldSurface([[0, 0, 0]], [[0, 0, 1]], [1.0])
    Y = VarifoldSurface([[0, 0, 0]], [[0, 0, -1]], [1.0])
    k = KernelConfig(1.0, 1.0)
    assert vf.inner_product(X, Y, k) == pytest.approx(np.exp(-2.0), abs=1e-15)


def test_inner_product_matches_double_loop():
    rng = np.random.default_rng(0)
    k = KernelConfig(0.8, 0.6)
    for _ in range(20):
        X = random_surface(rng, rng.integers(2, 50))
        Y = random_surface(rng, rng.integers(2, 50))
        got = vf.inner_product(X, Y, k)
        want = reference_inner_product(X, Y, k)
        assert abs(got - want) < 1e-12


def test_distance_identity_zero():
    rng = np.random.default_rng(1)
    X = random_surface(rng, 30)
    assert vf.distance(X, X, KernelConfig(0.5, 0.5)) == 0.0


def test_distance_flipped_normals():
    X = VarifoldSurface([[0, 0, 0]], [[0, 0, 1]], [1.0])
    Y = VarifoldSurface([[0, 0, 0]], [[0, 0, -1]], [1.0])
    d = vf.distance(X, Y, KernelConfig(1.0, 1.0))
    assert d == pytest.approx(2.0 - 2.0 * np.exp(-2.0), abs=1e-12)
    assert d == pytest.approx(1.7293, abs=1e-4)


def test_distance_symmetric():
    rng = np.random.default_rng(2)
    X, Y = random_surface(rng, 25), random_surface(rng, 35)
    k = KernelConfig(0.9, 0.9)
    assert vf.distance(X, Y, k) == pytest.approx(vf.distance(Y, X, k), rel=1e-12)


def test_distance_permutation_invariant():
    rng = np.random.default_rng(3)
    X, Y = random_surface(rng, 20), random_surface(rng, 20)
    k = KernelConfig(0.7, 0.7)
    perm = rng.permutation(20)
    Xp = VarifoldSurface(X.points[perm], X.normals[perm], X.weights[perm])
    assert vf.distance(Xp, Y, k) == pytest.approx(vf.distance(X, Y, k), rel=1e-12)


def test_distance_rigid_motion_invariant():
    rng = np.random.default_rng(4)
    X, Y = random_surface(rng, 22), random_surface(rng, 18)
    k = KernelConfig(0.8, 0.8)
    from morphflow.skeleton import quat_from_axis_angle, quat_to_matrix
    R = quat_to_matrix(quat_from_axis_angle(rng.normal(size=3), 1.1))
    t = rng.normal(size=3)

    def moved(S):
        return VarifoldSurface(S.points @ R.T + t, S.normals @ R.T, S.weights)

    d0 = vf.distance(X, Y, k)
    d1 = vf.distance(moved(X), moved(Y), k)
    assert abs(d0 - d1) < 1e-10 * max(1.0, d0)


def test_self_product_positive():
    rng = np.random.default_rng(5)
    X = random_surface(rng, 7)
    assert vf.inner_product(X, X, KernelConfig(0.5, 0.5)) > 0.0


def test_surface_validation():
    with pytest.raises(VarifoldError):
        VarifoldSurface([[0, 0, 0]], [[0, 0, 2.0]], [1.0])  # non-unit normal
    with pytest.raises(VarifoldError):
        VarifoldSurface([[0, 0, 0]], [[0, 0, 1.0]], [-1.0])  # negative raw weight
    # compressed surfaces may carry negative weights
    VarifoldSurface([[0, 0, 0]], [[0, 0, 1.0]], [-1.0], compressed=True)


def test_taped_inner_product_matches_numpy():
    rng = np.random.default_rng(6)
    X, Y = random_surface(rng, 15), random_surface(rng, 23)
    k = KernelConfig(0.6, 0.8)
    tape = Tape()
    got = vf.inner_product_t(
        tape,
        tape.constant(X.points), tape.constant(X.normals), tape.constant(X.weights),
        tape.constant(Y.points), tape.constant(Y.normals), tape.constant(Y.weights),
        k)
    assert float(got.value) == pytest.approx(vf.inner_product(X, Y, k), rel=1e-12)


def test_taped_product_gradient_matches_fd():
    rng = np.random.default_rng(7)
    X, Y = random_surface(rng, 6), random_surface(rng, 9)
    k = KernelConfig(0.7, 0.9)

    def f(points):
        Xp = VarifoldSurface(points, X.normals, X.weights)
        return vf.inner_product(Xp, Y, k)

    tape = Tape()
    px = tape.leaf(X.points)
    out = vf.inner_product_t(
        tape, px, tape.constant(X.normals), tape.constant(X.weights),
        tape.constant(Y.points), tape.constant(Y.normals), tape.constant(Y.weights),
        k)
    tape.backward(out)
    g = tape.grad(px)
    h = 1e-6
    fd = np.zeros_like(X.points)
    for i in range(X.points.shape[0]):
        for j in range(3):
            p = X.points.copy()
            p[i, j] += h
            up = f(p)
            p[i, j] -= 2 * h
            dn = f(p)
            fd[i, j] = (up - dn) / (2 * h)
    scale = np.max(np.abs(fd))
    assert np.max(np.abs(g - fd)) / scale < 1e-6


# ----------------------------------------------------------------------
# leverage scores and sampling
# ----------------------------------------------------------------------

def test_rls_single_point():
    Y = VarifoldSurface([[0, 0, 0]], [[0, 0, 1]], [1.0])
    s = vf.rls_scores(Y, KernelConfig(1.0, 1.0), CompressionConfig(1, lam=1.0))
    np.testing.assert_allclose(s, [0.5], atol=1e-12)


def test_rls_identical_points_equal_scores():
    Y = VarifoldSurface([[0, 0, 0], [0, 0, 0]], [[0, 0, 1], [0, 0, 1]], [1.0, 1.0])
    s = vf.rls_scores(Y, KernelConfig(1.0, 1.0), CompressionConfig(1, lam=1.0))
    assert s[0] == pytest.approx(s[1], rel=1e-12)


def test_rls_scores_match_dense_oracle():
    rng = np.random.default_rng(8)
    Y = random_surface(rng, 5)
    k = KernelConfig(0.9, 0.9)
    cfg = CompressionConfig(3, lam=1.0, seed=11)
    got = vf.rls_scores(Y, k, cfg)
    # dense oracle within each batch (batch split of 5 points: floor(sqrt)=2 -> 2 batches)
    rng2 = np.random.default_rng(cfg.seed)
    perm = rng2.permutation(5)
    for batch in np.array_split(perm, 5 // 2):
        sub = Y.subset(batch)
        K = vf.joint_kernel(sub, sub, k)
        oracle = np.diag(K @ np.linalg.inv(K + cfg.lam * np.eye(len(K))))
        np.testing.assert_allclose(got[batch], oracle, atol=1e-10)


def test_rls_scores_in_unit_interval():
    rng = np.random.default_rng(9)
    Y = random_surface(rng, 64)
    s = vf.rls_scores(Y, KernelConfig(0.5, 0.5), CompressionConfig(8))
    assert np.all(s > 0.0) and np.all(s < 1.0)


def test_rls_sample_deterministic_and_concentrated():
    scores = np.array([0.0, 1.0, 0.0, 0.0])
    idx = vf.rls_sample(scores, 10, seed=3)
    assert np.all(idx == 1)
    i1 = vf.rls_sample(np.ones(7), 20, seed=5)
    i2 = vf.rls_sample(np.ones(7), 20, seed=5)
    np.testing.assert_array_equal(i1, i2)


def test_rls_sample_uniform_frequencies():
    n, draws = 8, 100_000
    idx = vf.rls_sample(np.ones(n), draws, seed=12)
    counts = np.bincount(idx, minlength=n)
    p = 1.0 / n
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) < 3 * sigma)


# ----------------------------------------------------------------------
# compression
# ----------------------------------------------------------------------

def test_compression_weights_full_set_recovers_areas():
    rng = np.random.default_rng(13)
    Y = random_surface(rng, 40, scale=0.5)
    k = KernelConfig(0.5, 0.7)
    beta = vf.compression_weights(Y, np.arange(40), k, CompressionConfig(40))
    np.testing.assert_allclose(beta, Y.weights, atol=1e-8)


def test_compression_weights_single_point_hand_solve():
    Y = VarifoldSurface([[0, 0, 0], [1.0, 0, 0]],
                        [[0, 0, 1], [0, 0, 1]], [0.4, 0.7])
    k = KernelConfig(1.0, 1.0)
    cfg = CompressionConfig(1, jitter=0.0)
    beta = vf.compression_weights(Y, np.array([0]), k, cfg)
    k01 = np.exp(-0.5)
    want = (1.0 * 0.4 + k01 * 0.7) / 1.0
    assert beta[0] == pytest.approx(want, rel=1e-12)


def test_compress_quarter_sphere_accuracy():
    Y = unit_sphere_surface(500, radius=0.5)
    k = KernelConfig(0.4, 0.5)
    Yc = vf.compress(Y, k, CompressionConfig(125, seed=1))
    ref = vf.inner_product(Y, Y, k)
    err = abs(vf.distance(Yc, Y, k)) / ref
    assert err < 1e-2


def test_compress_m_equals_n_single_point():
    Y = VarifoldSurface([[0.1, 0.2, 0.3]], [[1.0, 0, 0]], [2.0])
    Yc = vf.compress(Y, KernelConfig(1.0, 1.0), CompressionConfig(1, seed=0))
    np.testing.assert_allclose(Yc.points, Y.points)
    np.testing.assert_allclose(Yc.weights, Y.weights, atol=1e-9)


def test_compress_error_decreases_with_m():
    Y = unit_sphere_surface(256, radius=0.5)
    X = unit_sphere_surface(100, seed=1, radius=0.45)
    k = KernelConfig(0.4, 0.5)
    full = vf.inner_product(X, Y, k)
    med_errs = []
    for m in (16, 32, 64, 128):
        errs = []
        for seed in range(10):
            Yc = vf.compress(Y, k, CompressionConfig(m, seed=seed))
            errs.append(abs(vf.inner_product(X, Yc, k) - full) / abs(full))
        med_errs.append(np.median(errs))
    assert all(a >= b for a, b in zip(med_errs, med_errs[1:])), med_errs


def test_compressed_product_time_scales_linearly():
    Y = unit_sphere_surface(2000, radius=0.5)
    X = unit_sphere_surface(400, seed=2, radius=0.5)
    k = KernelConfig(0.4, 0.5)
    ms, times = [], []
    for m in (125, 250, 500, 1000, 2000):
        Yc = Y.subset(np.arange(m))
        best = min(
            _timed(lambda: vf.inner_product(X, Yc, k)) for _ in range(5))
        ms.append(m)
        times.append(best)
    rho = spearmanr(ms, times).statistic
    assert rho > 0.9, (ms, times)


def _timed(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def test_compress_rejects_m_above_n():
    Y = unit_sphere_surface(10)
    with pytest.raises(VarifoldError):
        vf.compress(Y, KernelConfig(0.5, 0.5), CompressionConfig(11))


# ----------------------------------------------------------------------
# file round-trip
# ----------------------------------------------------------------------

def test_varifold_file_roundtrip(tmp_path):
    rng = np.random.default_rng(14)
    Y = unit_sphere_surface(64)
    k = KernelConfig(0.35, 0.55)
    cfg = CompressionConfig(32, lam=1.0, seed=9)
    Yc = vf.compress(Y, k, cfg)
    path = tmp_path / "c.vfd"
    vf.save_varifold(path, Yc, k, cfg)
    back, k2, cfg2 = vf.load_varifold(path)
    np.testing.assert_array_equal(back.points, Yc.points)
    np.testing.assert_array_equal(back.normals, Yc.normals)
    np.testing.assert_array_equal(back.weights, Yc.weights)
    assert (k2.ell_x, k2.ell_n) == (k.ell_x, k.ell_n)
    assert cfg2.seed == cfg.seed


def test_varifold_file_rejects_garbage(tmp_path):
    p = tmp_path / "bad.vfd"
    p.write_text("not a varifold\n")
    with pytest.raises(VarifoldError):
        vf.load_varifold(p)


@given(st.integers(min_value=0, max_value=30))
@settings(max_examples=15, deadline=None)
def test_product_symmetry_property(seed):
    rng = np.random.default_rng(seed)
    X = random_surface(rng, int(rng.integers(1, 12)))
    Y = random_surface(rng, int(rng.integers(1, 12)))
    k = KernelConfig(0.8, 0.8)
    assert vf.inner_product(X, Y, k) == pytest.approx(
        vf.inner_product(Y, X, k), rel=1e-12)
