import numpy as np
import pytest

from morphflow import autodiff as ad
from morphflow import flowfield as ff
from morphflow import networks as nets
from morphflow.autodiff import Tape


def curl_of_taped_potential(build_potential, x):
    """Run the production curl assembly over an arbitrary taped potential."""
    tape = Tape()
    xv = tape.constant(np.atleast_2d(x))
    a = build_potential(tape, xv)
    n = xv.shape[0]
    cols = []
    for j in range(3):
        key = f"x{j}@{xv.nid}"
        e = np.zeros((n, 3))
        e[:, j] = 1.0
        tape.set_tangent(key, xv, tape.constant(e))
        cols.append(tape.jvp_sweep(a, key))
    return ff._curl_from_cols(cols).value


def col(x, j):
    return ad.slice_(x, (slice(None), slice(j, j + 1)))


def test_curl_of_xy_potential():
    # a = (0, 0, x*y) -> curl = (x, -y, 0)
    def build(tape, xv):
        z = tape.constant(np.zeros((xv.shape[0], 1)))
        return ad.concat([z, z, ad.mul(col(xv, 0), col(xv, 1))], axis=1)

    v = curl_of_taped_potential(build, np.array([[1.0, 2.0, 3.0]]))
    np.testing.assert_allclose(v, [[1.0, -2.0, 0.0]], atol=1e-14)


def test_curl_rotation_potential():
    # a = (0, 0, -(x^2+y^2)/2) -> v = (-y, x, 0)
    def build(tape, xv):
        z = tape.constant(np.zeros((xv.shape[0], 1)))
        half = tape.constant(-0.5)
        s = ad.mul(half, ad.add(ad.mul(col(xv, 0), col(xv, 0)),
                                ad.mul(col(xv, 1), col(xv, 1))))
        return ad.concat([z, z, s], axis=1)

    pts = np.array([[1.0, 0.0, 0.0], [0.3, -0.7, 2.0]])
    v = curl_of_taped_potential(build, pts)
    want = np.stack([-pts[:, 1], pts[:, 0], np.zeros(2)], axis=1)
    np.testing.assert_allclose(v, want, atol=1e-14)


def test_constant_potential_zero_velocity_and_jacobian():
    net = nets.arcnet(widths=(8,), seed=0)
    for lyr in net.layers:
        lyr.W[:] = 0.0
    net.layers[-1].b[:] = 1.5  # constant potential
    field = ff.VelocityField(net)
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_allclose(ff.velocity(field, x, 0.2), np.zeros((4, 3)), atol=1e-15)
    np.testing.assert_allclose(ff.velocity_jacobian(field, x, 0.2),
                               np.zeros((4, 3, 3)), atol=1e-15)


def fd_divergence(field, x, t, h=1e-4):
    div = np.zeros(len(x))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        vp = ff.velocity(field, x + e, t)
        vm = ff.velocity(field, x - e, t)
        div += (vp[:, j] - vm[:, j]) / (2 * h)
    return div


def test_divergence_free_random_net():
    rng = np.random.default_rng(1)
    field = ff.VelocityField(nets.arcnet(widths=(24, 16), seed=7))
    x = rng.uniform(-0.5, 0.5, size=(100, 3))
    div = fd_divergence(field, x, t=0.37)
    assert np.max(np.abs(div)) < 1e-4


def test_velocity_jacobian_matches_fd():
    rng = np.random.default_rng(2)
    field = ff.VelocityField(nets.arcnet(widths=(16, 12), seed=8))
    x = rng.uniform(-0.5, 0.5, size=(10, 3))
    t = 0.21
    J = ff.velocity_jacobian(field, x, t)
    h = 1e-5
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (ff.velocity(field, x + e, t) - ff.velocity(field, x - e, t)) / (2 * h)
        scale = np.max(np.abs(fd)) + 1e-12
        assert np.max(np.abs(J[:, :, j] - fd)) / scale < 1e-4


def test_jacobian_trace_free():
    field = ff.VelocityField(nets.arcnet(widths=(20, 12), seed=9))
    x = np.random.default_rng(3).uniform(-0.5, 0.5, size=(50, 3))
    J = ff.velocity_jacobian(field, x, 0.7)
    tr = np.einsum("nii->n", J)
    assert np.max(np.abs(tr)) < 1e-8


def test_normal_rate_cases():
    np.testing.assert_array_equal(ff.normal_rate(np.array([1.0, 0, 0]), np.zeros((3, 3))),
                                  np.zeros(3))
    # skew J (rigid rotation): -J^T n = J n
    J = np.array([[0.0, -1.0, 0], [1.0, 0, 0], [0, 0, 0]])
    n = np.array([0.0, 1.0, 0.0])
    np.testing.assert_allclose(ff.normal_rate(n, J), J @ n, atol=1e-15)
    # shear
    J = np.array([[0.0, 1.0, 0], [0, 0, 0], [0, 0, 0]])
    np.testing.assert_allclose(ff.normal_rate(np.array([1.0, 0, 0]), J),
                               [0.0, -1.0, 0.0], atol=1e-15)


def test_basis_rate_cases():
    B = np.eye(3)
    np.testing.assert_array_equal(ff.basis_rate(B, np.zeros((3, 3))), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        ff.basis_rate(B, 0.5 * np.eye(3))
    J = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 0]])
    np.testing.assert_allclose(ff.basis_rate(B, J), J @ B)


def test_taped_transport_matches_numpy():
    field = ff.VelocityField(nets.arcnet(widths=(10, 6), seed=11))
    rng = np.random.default_rng(4)
    x = rng.uniform(-0.4, 0.4, size=(5, 3))
    n = rng.normal(size=(5, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    B = np.broadcast_to(np.eye(3), (5, 3, 3)).copy()
    t = 0.45

    tape = Tape()
    net = nets.bind_mlp(tape, field.potential, trainable=False)
    xv = tape.constant(x)
    v, cols = ff.velocity_jacobian_t(tape, net, xv, t)
    nr = ff.normal_rate_t(tape.constant(n), cols)
    br = ff.basis_rate_t(tape.constant(B), cols)

    J = ff.velocity_jacobian(field, x, t)
    np.testing.assert_allclose(v.value, ff.velocity(field, x, t), atol=1e-12)
    np.testing.assert_allclose(nr.value, ff.normal_rate(n, J), atol=1e-12)
    np.testing.assert_allclose(br.value, J @ B, atol=1e-12)


def test_velocity_gradient_wrt_params_matches_fd():
    # reverse mode through the curl: d/dW of sum(v) vs finite differences
    net = nets.arcnet(widths=(6,), seed=12)
    x = np.random.default_rng(5).uniform(-0.3, 0.3, size=(3, 3))
    t = 0.6

    tape = Tape()
    bound = nets.bind_mlp(tape, net, trainable=True)
    v = ff.velocity_t(tape, bound, tape.constant(x), t)
    y = ad.sum_(v)
    tape.backward(y)

    W0 = net.layers[0].W
    g = tape.grad(bound.layers[0][0])
    h = 1e-6
    field = ff.VelocityField(net)
    fd = np.zeros_like(W0)
    for i in range(W0.shape[0]):
        for j in range(W0.shape[1]):
            old = W0[i, j]
            W0[i, j] = old + h
            up = ff.velocity(field, x, t).sum()
            W0[i, j] = old - h
            dn = ff.velocity(field, x, t).sum()
            W0[i, j] = old
            fd[i, j] = (up - dn) / (2 * h)
    scale = np.max(np.abs(fd)) + 1e-12
    assert np.max(np.abs(g - fd)) / scale < 1e-6
