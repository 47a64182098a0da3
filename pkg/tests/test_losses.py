import numpy as np
import pytest

from morphflow import autodiff as ad
from morphflow import flowfield as ff
from morphflow import losses as ls
from morphflow import meshio as mio
from morphflow import networks as nets
from morphflow import odesolve as odes
from morphflow import skeleton as sk
from morphflow import synth
from morphflow import varifold as vf
from morphflow.autodiff import Tape
from morphflow.losses import (
    FlowModel, LossWeights, OptimizerState, ParamSet, Problem, Schedule,
    full_loss, full_loss_and_grads, full_loss_terms, loss_varifold,
    train, vector_adam_step,
)
from morphflow.odesolve import TimeGrid
from morphflow.skeleton import (
    BoneSampleParams, ConstraintSets, PoseParams, Skeleton,
    quat_from_axis_angle,
)
from morphflow.varifold import KernelConfig, VarifoldSurface


def zero_arc(widths=(6,)):
    net = nets.arcnet(widths=widths, seed=0)
    for lyr in net.layers:
        lyr.W[:] = 0.0
        lyr.b[:] = 0.0
    return net


def small_model(seed=0, widths=(8, 6), steps=4, zero=False, n_edges=1,
                head_gain=0.05):
    arc = zero_arc(widths) if zero else nets.arcnet(widths=widths, seed=seed,
                                                    head_gain=head_gain)
    return FlowModel(arc=arc,
                     qnet=nets.qnet(widths=(8, 8), seed=seed + 1),
                     pose=PoseParams.identity(n_edges),
                     grid=TimeGrid(1.0, steps))


def tiny_surface(n=6, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3)) * scale
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    w = rng.uniform(0.5, 1.0, size=n)
    return VarifoldSurface(pts, nrm, w)


# ----------------------------------------------------------------------
# loss terms: trivial examples
# ----------------------------------------------------------------------

def test_varifold_zero_field_identical_surfaces():
    model = small_model(zero=True)
    X = tiny_surface(8)
    val = loss_varifold(model, X, X, KernelConfig(0.5, 0.5))
    assert abs(val) < 1e-9


def test_varifold_zero_field_translated_target():
    model = small_model(zero=True)
    X = tiny_surface(10, seed=1)
    d = 0.01
    Y = VarifoldSurface(X.points + [d, 0, 0], X.normals, X.weights)
    k = KernelConfig(5.0, 1.0)  # ell_x >> d
    got = loss_varifold(model, X, Y, k)
    want = (vf.inner_product(X, X, k) - 2 * vf.inner_product(X, Y, k)
            + vf.inner_product(Y, Y, k))
    assert got == pytest.approx(want, abs=1e-10)
    assert 0 < got < 1e-3


def test_varifold_equals_distance_at_zero_deformation():
    model = small_model(zero=True)
    X = tiny_surface(7, seed=2)
    Y = tiny_surface(9, seed=3)
    k = KernelConfig(0.8, 0.8)
    assert loss_varifold(model, X, Y, k) == pytest.approx(
        vf.distance(X, Y, k), rel=1e-9)


def test_skeleton_zero_field_identity_pose():
    model = small_model(zero=True)
    skel = Skeleton(np.array([[0.0, 0, 0], [0.4, 0, 0]]), [(0, 1)], root=0)
    pts = [np.array([[0.1, 0.0, 0.0], [0.3, 0.02, 0.0]])]
    val = ls.loss_skeleton(model, skel, PoseParams.identity(1), pts, [1.0])
    assert val == pytest.approx(0.0, abs=1e-20)


def test_skeleton_zero_field_translating_pose():
    model = small_model(zero=True)
    skel = Skeleton(np.array([[0.0, 0, 0], [0.4, 0, 0]]), [(0, 1)], root=0)
    pose = PoseParams(np.array([1.0, 0, 0]), np.array([[1.0, 0, 0, 0]]))
    pts = [np.array([[0.2, 0.0, 0.0]])]
    val = ls.loss_skeleton(model, skel, pose, pts, [1.0])
    assert val == pytest.approx(1.0, abs=1e-12)


def identity_qnet():
    """Zero weights leave only the head bias: A = diag(-1,1,1,1), q = identity."""
    q = nets.qnet(widths=(8, 8), seed=5)
    for lyr in q.layers:
        lyr.W[:] = 0.0
    return q


def test_soft_zero_field_identity_q():
    model = small_model(zero=True)
    pts = np.random.default_rng(4).normal(size=(5, 3)) * 0.2
    val = ls.loss_soft(model, identity_qnet(), pts, [0.5, 1.0])
    assert val < 1e-12


def test_surf_zero_field_identity_q():
    model = small_model(zero=True)
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(5, 3)) * 0.2
    nrm = rng.normal(size=(5, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    val = ls.loss_surf(model, identity_qnet(), pts, nrm, [1.0])
    assert val < 1e-12


def test_conformal_term_scaled_basis_formula():
    # B = 2I under identity rotation: ||I||_F^2 + (1/3) * 3 * (2-1)^2 = 4
    grid = TimeGrid(1.0, 1)
    tape = Tape()
    qnetb = nets.bind_mlp(tape, identity_qnet(), trainable=False, prefix="qnet")
    batch = ls._Batch("soft", {"x": np.zeros((1, 3)),
                               "B": 2.0 * np.eye(3)[None]}, [1])
    batch.checkpoints = [batch.state0, batch.state0]
    batch.leaves[1] = {"x": tape.leaf(np.zeros((1, 3))),
                       "B": tape.leaf(2.0 * np.eye(3)[None])}
    val = ls._conformal_terms(tape, qnetb, batch, grid, None)
    assert float(val.value) == pytest.approx(4.0, abs=1e-10)


def test_surf_term_scaled_tangents_formula():
    # tangent columns scaled by 2: 2 * 1 + (1/2) * 2 * (2-1)^2 = 3
    grid = TimeGrid(1.0, 1)
    frames = ls.orthonormal_frames(np.array([[0.0, 0, 1.0]]))
    scaled = frames.copy()
    scaled[:, :, 1:] *= 2.0
    tape = Tape()
    qnetb = nets.bind_mlp(tape, identity_qnet(), trainable=False, prefix="qnet")
    batch = ls._Batch("surf", {"x": np.zeros((1, 3)), "B": scaled}, [1])
    batch.leaves[1] = {"x": tape.leaf(np.zeros((1, 3))),
                       "B": tape.leaf(scaled)}
    val = ls._conformal_terms(tape, qnetb, batch, grid, frames)
    assert float(val.value) == pytest.approx(3.0, abs=1e-10)


def test_soft_rotation_matched_by_q_is_zero():
    # transported basis = pure rotation R; q matching R gives zero loss
    grid = TimeGrid(1.0, 1)
    q = quat_from_axis_angle([0.3, 0.8, -0.2], 0.7)
    R = sk.quat_to_matrix(q)
    tape = Tape()
    Bv = tape.constant(R[None])
    qv = tape.constant(q[None])
    Rv = sk.quat_rotmat_t(qv)
    Bt = ad.matmul(ad.transpose(Rv), Bv)
    diff = ad.sub(Bt, tape.constant(np.eye(3)[None]))
    assert float(ad.sum_(ad.mul(diff, diff)).value) < 1e-12


def test_full_loss_zero_weights_equals_varifold():
    model = small_model(seed=7)
    X = tiny_surface(6, seed=8)
    Y = tiny_surface(6, seed=9)
    k = KernelConfig(0.6, 0.6)
    problem = Problem(X, Y, k, LossWeights(0, 0, 0))
    assert full_loss(model, problem) == pytest.approx(
        loss_varifold(model, X, Y, k), rel=1e-12)


def test_full_loss_linear_in_weights():
    mesh, skel = synth.capsule_arm(200)
    model = small_model(seed=10, n_edges=2)
    src = mio.to_varifold(mesh)
    problem = Problem(src, src, KernelConfig(0.5, 0.5), LossWeights(1, 1, 1),
                      skeleton=skel, source_mesh=mesh,
                      sample_params=BoneSampleParams(n_bone=5, n_tissue=5,
                                                     n_surface=10))
    cs = sk.sample_constraint_sets(skel, mesh, problem.sample_params, seed=0)
    t1 = full_loss_terms(model, problem, constraints=cs)
    problem2 = Problem(src, src, problem.kernel, LossWeights(2.0, 0.5, 3.0),
                       skeleton=skel, source_mesh=mesh,
                       sample_params=problem.sample_params)
    t2 = full_loss_terms(model, problem2, constraints=cs)
    want = t2.varifold + 2.0 * t1.skeleton + 0.5 * t1.soft + 3.0 * t1.surface
    assert t2.total == pytest.approx(want, rel=1e-10)
    assert t1.total >= 0 and t1.varifold >= 0 and t1.skeleton >= 0
    assert t1.soft >= 0 and t1.surface >= 0


# ----------------------------------------------------------------------
# gradient correctness
# ----------------------------------------------------------------------

def test_checkpointed_equals_single_tape_gradient():
    # same varifold objective built on one tape across all steps
    model = small_model(seed=11, widths=(6,), steps=3)
    X = tiny_surface(4, seed=12)
    Y = tiny_surface(5, seed=13)
    k = KernelConfig(0.7, 0.7)
    problem = Problem(X, Y, k, LossWeights(0, 0, 0))
    _, grads = full_loss_and_grads(model, problem)

    tape = Tape()
    bound = nets.bind_mlp(tape, model.arc, trainable=True, prefix="arc")
    state = {"x": tape.constant(X.points), "n": tape.constant(X.normals)}
    h = model.grid.h
    rate = odes.taped_flow_rate(tape, bound, 1.0 / model.grid.horizon)
    for s in range(model.grid.steps):
        state = odes.rk4_step(rate, state, s * h, h, odes._add_scaled_taped)
    yy = vf.inner_product(Y, Y, k)
    lv = ls._varifold_term(tape, state["x"], state["n"], X.weights, Y, k, yy)
    tape.backward(lv)
    for i, (Wv, bv, _) in enumerate(bound.layers):
        np.testing.assert_allclose(grads[f"arc.W{i}"], tape.grad(Wv),
                                   rtol=1e-9, atol=1e-13)
        np.testing.assert_allclose(grads[f"arc.b{i}"], tape.grad(bv),
                                   rtol=1e-9, atol=1e-13)


def fd_gradient_of_full_loss(model, problem, constraints, names, h=1e-5):
    params = ParamSet.from_model(model)
    out = {}
    for name in names:
        arr, _ = params.entries[name]
        g = np.zeros_like(arr)
        flat = arr.ravel()
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = full_loss(model, problem, constraints=constraints)
            flat[i] = old - h
            dn = full_loss(model, problem, constraints=constraints)
            flat[i] = old
            g.ravel()[i] = (up - dn) / (2 * h)
        out[name] = g
    return out


def test_full_gradient_matches_fd_small_problem():
    mesh, skel = synth.capsule_arm(150)
    model = small_model(seed=14, widths=(5,), steps=3, n_edges=2, head_gain=0.3)
    src_full = mio.to_varifold(mesh)
    idx = np.arange(0, len(src_full), len(src_full) // 8)[:8]
    src = VarifoldSurface(src_full.points[idx], src_full.normals[idx],
                          src_full.weights[idx])
    tgt = VarifoldSurface(src.points + [0.05, 0, 0], src.normals, src.weights)
    problem = Problem(src, tgt, KernelConfig(0.4, 0.6),
                      LossWeights(3.0, 2.0, 1.5),
                      skeleton=skel, source_mesh=mesh,
                      sample_params=BoneSampleParams(n_bone=3, n_tissue=3,
                                                     n_surface=4))
    # nudge the pose so pose gradients are generic
    model.pose.rotations[0] = quat_from_axis_angle([0, 0, 1.0], 0.3)
    model.pose.rotations[1] = quat_from_axis_angle([0, 1.0, 0], -0.2)
    model.pose.translation[:] = [0.02, -0.01, 0.03]
    cs = sk.sample_constraint_sets(skel, mesh, problem.sample_params, seed=3)

    _, grads = full_loss_and_grads(model, problem, constraints=cs)
    names = ["arc.W0", "arc.b1", "qnet.b2", "pose.trans", "pose.quats"]
    fd = fd_gradient_of_full_loss(model, problem, cs, names)
    for name in names:
        scale = max(np.max(np.abs(fd[name])), np.max(np.abs(grads[name])), 1e-12)
        denom = np.maximum(np.maximum(np.abs(fd[name]), np.abs(grads[name])),
                           1e-4 * scale)
        rel = np.max(np.abs(grads[name] - fd[name]) / denom)
        assert rel < 1e-3, (name, rel)


def test_gradients_deterministic():
    model = small_model(seed=15, widths=(6,), steps=3)
    X = tiny_surface(5, seed=16)
    Y = tiny_surface(5, seed=17)
    problem = Problem(X, Y, KernelConfig(0.6, 0.6), LossWeights(0, 0, 0))
    _, g1 = full_loss_and_grads(model, problem)
    _, g2 = full_loss_and_grads(model, problem)
    for k in g1:
        assert np.array_equal(g1[k], g2[k])


# ----------------------------------------------------------------------
# VectorAdam
# ----------------------------------------------------------------------

def reference_adam(p, g, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh = m / (1 - b1 ** t)
    vh = v / (1 - b2 ** t)
    return p - lr * mh / (np.sqrt(vh) + eps), m, v


def test_vector_adam_scalar_group_is_adam():
    rng = np.random.default_rng(18)
    p0 = rng.normal(size=(4, 3))
    ps = ParamSet()
    p = p0.copy()
    ps.entries["w"] = (p, ls.SCALAR)
    opt = OptimizerState.init(ps)
    p_ref, m_ref, v_ref = p0.copy(), np.zeros_like(p0), np.zeros_like(p0)
    for t in range(1, 6):
        g = rng.normal(size=(4, 3))
        vector_adam_step(opt, ps, {"w": g}, lr=0.05)
        p_ref, m_ref, v_ref = reference_adam(p_ref, g, m_ref, v_ref, t, 0.05)
        np.testing.assert_array_equal(p, p_ref)


def test_vector_adam_first_step_sign():
    ps = ParamSet()
    p = np.array([1.0, -2.0, 3.0])
    ps.entries["w"] = (p, ls.SCALAR)
    opt = OptimizerState.init(ps)
    g = np.array([0.4, -0.2, 0.9])
    vector_adam_step(opt, ps, {"w": g.copy()}, lr=0.1)
    step = p - np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(step, -0.1 * np.sign(g), rtol=1e-6)


def test_vector_adam_vector_group_normed_update():
    ps = ParamSet()
    p = np.zeros(3)
    ps.entries["w"] = (p, ls.VECTOR)
    opt = OptimizerState.init(ps)
    vector_adam_step(opt, ps, {"w": np.array([3.0, 4.0, 0.0])}, lr=0.1)
    np.testing.assert_allclose(p, -0.1 * np.array([0.6, 0.8, 0.0]), atol=1e-7)


def test_vector_adam_rotation_equivariance():
    from morphflow.skeleton import quat_to_matrix
    R = quat_to_matrix(quat_from_axis_angle([1.0, 0.4, -0.3], 1.2))
    rng = np.random.default_rng(19)
    p0 = rng.normal(size=(5, 3))
    gs = [rng.normal(size=(5, 3)) for _ in range(4)]

    def run(p_init, grads):
        ps = ParamSet()
        p = p_init.copy()
        ps.entries["w"] = (p, ls.VECTOR)
        opt = OptimizerState.init(ps)
        for g in grads:
            vector_adam_step(opt, ps, {"w": g.copy()}, lr=0.03)
        return p

    plain = run(p0, gs)
    rotated = run(p0 @ R.T, [g @ R.T for g in gs])
    np.testing.assert_allclose(rotated, plain @ R.T, atol=1e-10)


def test_vector_adam_quaternion_renormalised():
    model = small_model(n_edges=2)
    ps = ParamSet.from_model(model)
    opt = OptimizerState.init(ps)
    grads = {k: np.zeros_like(v) for k, (v, _) in ps.entries.items()}
    grads["pose.quats"] = np.full((2, 4), 0.3)
    vector_adam_step(opt, ps, grads, lr=0.5)
    model.pose.renormalise()
    np.testing.assert_allclose(np.linalg.norm(model.pose.rotations, axis=1),
                               1.0, atol=1e-12)


# ----------------------------------------------------------------------
# schedule
# ----------------------------------------------------------------------

def test_schedule_lr_warmup_and_decay():
    s = Schedule(epochs_main=100, epochs_ft=0, lr_init=1e-2, lr_final=1e-3,
                 warmup_epochs=10)
    assert s.lr_at(0) == pytest.approx(1e-3)
    assert s.lr_at(9) == pytest.approx(1e-2)
    assert s.lr_at(99) == pytest.approx(1e-3, rel=1e-2)
    lrs = [s.lr_at(e) for e in range(10, 100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_schedule_milestones_and_stages():
    s = Schedule(epochs_main=40, epochs_ft=20,
                 initial_kernel=KernelConfig(0.5, 0.5),
                 milestones=[(10, 0.25, 0.5), (20, 0.1, 0.4), (30, 0.1, 0.3)])
    assert s.kernel_at(0).ell_x == 0.5
    assert s.kernel_at(10).ell_x == 0.25
    assert s.kernel_at(25) == KernelConfig(0.1, 0.4)
    assert s.kernel_at(55).ell_n == 0.3
    assert s.weights_at(39).stage == ls.MAIN
    assert s.weights_at(40).stage == ls.FINE_TUNE
    with pytest.raises(ValueError):
        Schedule(epochs_main=10, milestones=[(5, 0.9, 0.5)],
                 initial_kernel=KernelConfig(0.5, 0.5))


def test_loss_weight_defaults_match_stage_table():
    m = LossWeights.main()
    assert (m.lambda1, m.lambda2, m.lambda3) == (2e2, 1e1, 5e3)
    f = LossWeights.fine_tune()
    assert (f.lambda1, f.lambda2, f.lambda3) == (1e3, 1e2, 5e3)


# ----------------------------------------------------------------------
# training smoke test
# ----------------------------------------------------------------------

@pytest.mark.slow
def test_train_sphere_translation_reduces_loss(tmp_path):
    src_mesh = synth.bumpy_sphere(220)
    tgt_mesh = src_mesh.with_vertices(src_mesh.vertices + [0.25, 0.0, 0.0])
    src = mio.to_varifold(src_mesh)
    tgt = mio.to_varifold(tgt_mesh)
    model = FlowModel(arc=nets.arcnet(widths=(16, 12), seed=0, head_gain=0.05),
                      qnet=nets.qnet(widths=(8, 8), seed=1),
                      pose=PoseParams.identity(1),
                      grid=TimeGrid(1.0, 5))
    problem = Problem(src, tgt, KernelConfig(0.5, 0.5), LossWeights(0, 0, 0),
                      seed=0)
    schedule = Schedule(epochs_main=200, epochs_ft=0, lr_init=5e-3,
                        lr_final=1e-3, warmup_epochs=20,
                        initial_kernel=KernelConfig(0.5, 0.5),
                        milestones=[(100, 0.25, 0.5)],
                        main_weights=LossWeights(0, 0, 0),
                        source_samples=120)
    log = tmp_path / "train.log"
    history = train(model, problem, schedule, log_file=log)
    first = history[0]["L_var"]
    last = history[-1]["L_var"]
    assert last < 0.1 * first, (first, last)
    text = log.read_text().splitlines()
    assert text[0].startswith("epoch")
    assert len(text) == 201
