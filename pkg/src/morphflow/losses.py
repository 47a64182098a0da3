"""Loss terms, the weighted objective, VectorAdam and the training driver.

Gradients come from unrolled RK4 with per-step rematerialisation: the forward
pass stores boundary states at every grid node, the loss is evaluated on one
tape with endpoint states as leaves, and a reverse sweep rebuilds one step at
a time, chaining vector-Jacobian products backwards while accumulating
parameter adjoints. Memory stays bounded by a single step's tape regardless
of the number of integration steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import flowfield as ff
from . import networks as nets
from . import odesolve as odes
from . import skeleton as sk
from . import varifold as vf
from .autodiff import Tape, Var
from .meshio import TriMesh
from .networks import MlpParams
from .odesolve import OdeError, TimeGrid
from .skeleton import BoneSampleParams, ConstraintSets, PoseParams, Skeleton
from .varifold import KernelConfig, VarifoldSurface

MAIN = "main"
FINE_TUNE = "fine_tune"


class TrainingAbort(Exception):
    pass


@dataclass
class LossWeights:
    lambda1: float
    lambda2: float
    lambda3: float
    stage: str = MAIN

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")

    @staticmethod
    def main() -> "LossWeights":
        return LossWeights(2e2, 1e1, 5e3, MAIN)

    @staticmethod
    def fine_tune() -> "LossWeights":
        return LossWeights(1e3, 1e2, 5e3, FINE_TUNE)


@dataclass
class Schedule:
    epochs_main: int
    epochs_ft: int = 0
    lr_init: float = 1e-2
    lr_final: float = 1e-3
    warmup_epochs: int = 50
    initial_kernel: KernelConfig = field(default_factory=lambda: KernelConfig(0.5, 0.5))
    # coarse-to-fine lengthscale milestones, non-increasing in ell_x
    milestones: list = field(default_factory=list)  # [(epoch, ell_x, ell_n)]
    main_weights: LossWeights = field(default_factory=LossWeights.main)
    ft_weights: LossWeights = field(default_factory=LossWeights.fine_tune)
    source_samples: Optional[int] = 500   # per-epoch varifold source subsample
    # constraint staging: before constraint_start_epoch the fit is
    # varifold-only; at the switch the pose is aligned to the learned flow
    # (high constraint weights on a fresh field freeze it at the identity)
    constraint_start_epoch: int = 0
    pose_align_steps: int = 0

    def __post_init__(self):
        ms = sorted(self.milestones)
        ells = [self.initial_kernel.ell_x] + [e for _, e, _ in ms]
        if any(a < b for a, b in zip(ells, ells[1:])):
            raise ValueError("lengthscale milestones must be non-increasing in ell_x")

    def kernel_at(self, epoch: int) -> KernelConfig:
        k = self.initial_kernel
        for e, ex, en in sorted(self.milestones):
            if epoch >= e:
                k = KernelConfig(ex, en)
        return k

    def weights_at(self, epoch: int) -> LossWeights:
        w = self.main_weights if epoch < self.epochs_main else self.ft_weights
        if epoch < self.constraint_start_epoch:
            return LossWeights(0.0, 0.0, 0.0, stage=w.stage)
        return w

    def lr_at(self, epoch: int) -> float:
        total = self.epochs_main + self.epochs_ft
        if self.warmup_epochs > 0 and epoch < self.warmup_epochs:
            return self.lr_init * (epoch + 1) / self.warmup_epochs
        span = max(total - self.warmup_epochs, 1)
        frac = min(max(epoch - self.warmup_epochs, 0) / span, 1.0)
        return self.lr_final + 0.5 * (self.lr_init - self.lr_final) * (
            1.0 + np.cos(np.pi * frac))


@dataclass
class FlowModel:
    arc: MlpParams
    qnet: MlpParams
    pose: PoseParams
    grid: TimeGrid

    @property
    def horizon(self) -> float:
        return self.grid.horizon

    def field(self) -> ff.VelocityField:
        return ff.VelocityField(self.arc, self.grid.horizon)


@dataclass
class Problem:
    source: VarifoldSurface
    target: VarifoldSurface
    kernel: KernelConfig
    weights: LossWeights
    skeleton: Optional[Skeleton] = None
    source_mesh: Optional[TriMesh] = None
    sample_params: BoneSampleParams = field(default_factory=BoneSampleParams)
    times: Optional[list[float]] = None   # constraint times, default (0, T] nodes
    seed: int = 0

    def constraint_times(self, grid: TimeGrid) -> list[float]:
        if self.times is not None:
            return list(self.times)
        return grid.nodes()[1:].tolist()


# ----------------------------------------------------------------------
# parameter registry
# ----------------------------------------------------------------------

VECTOR = "vector"
SCALAR = "scalar"


class ParamSet:
    """Ordered name -> (live array, group) registry for one model."""

    def __init__(self):
        self.entries: dict[str, tuple[np.ndarray, str]] = {}

    @staticmethod
    def from_model(model: FlowModel, train_pose: bool = True) -> "ParamSet":
        ps = ParamSet()
        for i, lyr in enumerate(model.arc.layers):
            ps.entries[f"arc.W{i}"] = (lyr.W, SCALAR)
            ps.entries[f"arc.b{i}"] = (lyr.b, SCALAR)
        for i, lyr in enumerate(model.qnet.layers):
            ps.entries[f"qnet.W{i}"] = (lyr.W, SCALAR)
            ps.entries[f"qnet.b{i}"] = (lyr.b, SCALAR)
        if train_pose:
            ps.entries["pose.trans"] = (model.pose.translation, VECTOR)
            ps.entries["pose.quats"] = (model.pose.rotations, VECTOR)
        return ps

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, (v, _) in self.entries.items()}


# ----------------------------------------------------------------------
# VectorAdam
# ----------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    groups: dict[str, str]
    step: int = 0

    @staticmethod
    def init(params: ParamSet) -> "OptimizerState":
        m, v, groups = {}, {}, {}
        for name, (arr, group) in params.entries.items():
            m[name] = np.zeros_like(arr)
            if group == VECTOR:
                v[name] = np.zeros(arr.shape[:-1] + (1,))
            else:
                v[name] = np.zeros_like(arr)
            groups[name] = group
        return OptimizerState(m, v, groups)


def vector_adam_step(state: OptimizerState, params: ParamSet,
                     grads: dict[str, np.ndarray], lr: float,
                     betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Adam whose second moment is shared across vector components.

    Vector groups track v as the squared gradient norm per vector, making the
    update direction parallel to the gradient and rotation-equivariant;
    scalar groups reduce to standard elementwise Adam. Updates in place.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, (p, group) in params.entries.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        if group == VECTOR:
            v *= b2
            v += (1 - b2) * np.sum(g * g, axis=-1, keepdims=True)
        else:
            v *= b2
            v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)


# ----------------------------------------------------------------------
# frames
# ----------------------------------------------------------------------

def orthonormal_frames(normals: np.ndarray) -> np.ndarray:
    """(N,3,3) bases with column 0 = normal, columns 1-2 an orthonormal pair."""
    n = np.asarray(normals, dtype=float).reshape(-1, 3)
    nrm = np.linalg.norm(n, axis=1)
    if np.any(nrm < 1e-12):
        raise ValueError("degenerate normal in frame construction")
    n = n / nrm[:, None]
    helper = np.where(np.abs(n[:, :1]) < 0.9,
                      np.tile([1.0, 0, 0], (len(n), 1)),
                      np.tile([0.0, 1.0, 0], (len(n), 1)))
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([n, t1, t2], axis=2)


# ----------------------------------------------------------------------
# checkpointed integration
# ----------------------------------------------------------------------

@dataclass
class _Batch:
    name: str
    state0: dict[str, np.ndarray]
    record_steps: list[int]
    checkpoints: list[dict] = field(default_factory=list)
    leaves: dict = field(default_factory=dict)  # step -> {component: Var}


def _taped_step(tape: Tape, bound_arc, state_vars: dict, t0: float, h: float,
                time_scale: float) -> dict:
    rate = odes.taped_flow_rate(tape, bound_arc, time_scale)
    return odes.rk4_step(rate, state_vars, t0, h, odes._add_scaled_taped)


def _forward_checkpoints(model: FlowModel, batch: _Batch) -> None:
    grid = model.grid
    h = grid.h
    field = model.field()
    state = {k: v.copy() for k, v in batch.state0.items()}
    batch.checkpoints = [state]
    n_steps = max(batch.record_steps)
    for s in range(n_steps):
        state = odes.rk4_step(lambda st, t: odes._rate_np(field, st, t),
                              state, s * h, h, odes._add_scaled_np)
        for k, v in state.items():
            if not np.all(np.isfinite(v)):
                raise OdeError(f"batch {batch.name!r}: non-finite {k!r} after step {s}")
        batch.checkpoints.append(state)


def _backward_through_flow(model: FlowModel, batch: _Batch, loss_tape: Tape,
                           grads: dict[str, np.ndarray]) -> None:
    grid = model.grid
    h = grid.h
    scale = 1.0 / grid.horizon
    keys = list(batch.state0.keys())
    adj = {k: np.zeros_like(batch.state0[k]) for k in keys}
    for s in range(max(batch.record_steps), 0, -1):
        if s in batch.leaves:
            for k, leaf in batch.leaves[s].items():
                adj[k] = adj[k] + loss_tape.grad(leaf)
        seg = Tape()
        bound = nets.bind_mlp(seg, model.arc, trainable=True, prefix="arc")
        svars = {k: seg.leaf(batch.checkpoints[s - 1][k]) for k in keys}
        out = _taped_step(seg, bound, svars, (s - 1) * h, h, scale)
        seg.backward_multi([(out[k], adj[k]) for k in keys])
        adj = {k: seg.grad(svars[k]).copy() for k in keys}
        for i, (Wv, bv, _) in enumerate(bound.layers):
            grads[f"arc.W{i}"] += seg.grad(Wv)
            grads[f"arc.b{i}"] += seg.grad(bv)


# ----------------------------------------------------------------------
# loss terms on the endpoint tape
# ----------------------------------------------------------------------

def _varifold_term(tape: Tape, x: Var, n: Var, w0: np.ndarray,
                   target: VarifoldSurface, kernel: KernelConfig,
                   yy: float) -> Var:
    """d(X_T, Y): transported atoms renormalised, weights scaled by the
    stretch of the area-weighted normal."""
    nrm = ad.norm(n)
    nhat = ad.div(n, ad.reshape(nrm, nrm.value.shape + (1,)))
    w_t = ad.mul(tape.constant(w0), nrm)
    xx = vf.inner_product_t(tape, x, nhat, w_t, x, nhat, w_t, kernel)
    xy = vf.inner_product_t(tape, x, nhat, w_t,
                            tape.constant(target.points),
                            tape.constant(target.normals),
                            tape.constant(target.weights), kernel)
    return ad.add(ad.sub(xx, ad.mul(xy, tape.constant(2.0))), tape.constant(yy))


def _skeleton_term(tape: Tape, skel: Skeleton, trans: Var, quats: Var,
                   batch: _Batch, bone_slices: list[tuple[int, int]],
                   bone_p0: list[np.ndarray], grid: TimeGrid) -> Var:
    s_vars, r_vars = sk.fwd_kinematics_t(tape, skel, trans, quats)
    total = None
    nodes = grid.nodes()
    for step in batch.record_steps:
        frac = nodes[step] / grid.horizon
        flowed = batch.leaves[step]["x"]
        for k, (lo, hi) in enumerate(bone_slices):
            if hi == lo:
                continue
            rigid = sk.rigid_points_at_t(tape, s_vars[k], r_vars[k], bone_p0[k], frac)
            d = ad.sub(rigid, ad.slice_(flowed, (slice(lo, hi), slice(None))))
            term = ad.sum_(ad.mul(d, d))
            total = term if total is None else ad.add(total, term)
    return total if total is not None else tape.constant(0.0)


def _conformal_terms(tape: Tape, qnetb, batch: _Batch, grid: TimeGrid,
                     base_frames: Optional[np.ndarray]) -> Var:
    """Shared body of the tissue and surface losses.

    ``base_frames`` None means the identity basis (tissue): all three columns
    enter, stretch scaled by 1/3. Otherwise columns 1-2 of the given initial
    frames are compared (surface), stretch scaled by 1/2.
    """
    n_pts = batch.state0["x"].shape[0]
    nodes = grid.nodes()
    total = None
    if base_frames is None:
        cols = [0, 1, 2]
        ref = np.broadcast_to(np.eye(3), (n_pts, 3, 3))
        stretch_w = 1.0 / 3.0
    else:
        cols = [1, 2]
        ref = base_frames
        stretch_w = 1.0 / 2.0
    for step in batch.record_steps:
        t_l = nodes[step]
        x_l = batch.leaves[step]["x"]
        B_l = batch.leaves[step]["B"]
        q = nets.qnet_on_tape(tape, qnetb, x_l, t_l / grid.horizon)
        R = sk.quat_rotmat_t(q)
        Bt = ad.matmul(ad.transpose(R), B_l)
        key = (slice(None), slice(None), slice(cols[0], cols[-1] + 1))
        diff = ad.sub(ad.slice_(Bt, key), tape.constant(ref[:, :, cols[0]:cols[-1] + 1]))
        term = ad.sum_(ad.mul(diff, diff))
        stretch = None
        for c in cols:
            colv = ad.slice_(Bt, (slice(None), slice(None), c))
            dlen = ad.sub(ad.norm(colv), tape.constant(1.0))
            sterm = ad.sum_(ad.mul(dlen, dlen))
            stretch = sterm if stretch is None else ad.add(stretch, sterm)
        term = ad.add(term, ad.mul(stretch, tape.constant(stretch_w)))
        total = term if total is None else ad.add(total, term)
    return total if total is not None else tape.constant(0.0)


# ----------------------------------------------------------------------
# assembled objective
# ----------------------------------------------------------------------

@dataclass
class LossBreakdown:
    varifold: float
    skeleton: float
    soft: float
    surface: float
    total: float

    def as_dict(self) -> dict:
        return {"L_var": self.varifold, "L_skel": self.skeleton,
                "L_soft": self.soft, "L_surf": self.surface, "L_full": self.total}


def _compute(model: FlowModel, problem: Problem, *,
             source: Optional[VarifoldSurface] = None,
             constraints: Optional[ConstraintSets] = None,
             kernel: Optional[KernelConfig] = None,
             weights: Optional[LossWeights] = None,
             yy_cache: Optional[dict] = None,
             want_grads: bool = False):
    """Evaluate the objective (and optionally its gradients).

    Gradient mode: loss built on endpoint leaves, then per-batch reverse
    sweeps chain VJPs through the unrolled steps.
    """
    grid = model.grid
    kernel = kernel or problem.kernel
    lam = weights or problem.weights
    src = source or problem.source
    times = problem.constraint_times(grid)
    steps = sorted({grid.index_of(t) for t in times})
    if steps and steps[0] == 0:
        raise OdeError("constraint times must lie in (0, T]")

    if constraints is None:
        counts_needed = (lam.lambda1 > 0 or lam.lambda2 > 0 or lam.lambda3 > 0)
        if counts_needed:
            constraints = sk.sample_constraint_sets(
                problem.skeleton, problem.source_mesh, problem.sample_params,
                problem.seed, epoch=0)
        else:
            constraints = ConstraintSets([], np.zeros((0, 3)), np.zeros((0, 3)),
                                         np.zeros((0, 3)))

    batches: list[_Batch] = []
    var_batch = _Batch("var", {"x": src.points.copy(), "n": src.normals.copy()},
                       [grid.steps])
    batches.append(var_batch)

    bone_slices: list[tuple[int, int]] = []
    bone_p0: list[np.ndarray] = []
    skel_batch = None
    if lam.lambda1 > 0 and problem.skeleton is not None and constraints.bone_points:
        off = 0
        parts = []
        for pts in constraints.bone_points:
            bone_slices.append((off, off + len(pts)))
            bone_p0.append(pts)
            parts.append(pts)
            off += len(pts)
        stacked = np.concatenate(parts, axis=0) if parts else np.zeros((0, 3))
        if len(stacked):
            skel_batch = _Batch("skel", {"x": stacked}, list(steps))
            batches.append(skel_batch)

    soft_batch = None
    if lam.lambda2 > 0 and len(constraints.tissue_points):
        n_t = len(constraints.tissue_points)
        soft_batch = _Batch("soft", {
            "x": constraints.tissue_points.copy(),
            "B": np.broadcast_to(np.eye(3), (n_t, 3, 3)).copy()}, list(steps))
        batches.append(soft_batch)

    surf_batch = None
    surf_frames = None
    if lam.lambda3 > 0 and len(constraints.surface_points):
        surf_frames = orthonormal_frames(constraints.surface_normals)
        surf_batch = _Batch("surf", {
            "x": constraints.surface_points.copy(),
            "B": surf_frames.copy()}, list(steps))
        batches.append(surf_batch)

    for b in batches:
        _forward_checkpoints(model, b)

    # target self-product is a constant of the optimisation
    if yy_cache is None:
        yy_cache = {}
    yk = (kernel.ell_x, kernel.ell_n)
    if yk not in yy_cache:
        yy_cache[yk] = vf.inner_product(problem.target, problem.target, kernel)
    yy = yy_cache[yk]

    tape = Tape()
    for b in batches:
        for s in b.record_steps:
            b.leaves[s] = {k: tape.leaf(b.checkpoints[s][k], name=f"{b.name}.{k}@{s}")
                           for k in b.state0}

    l_var = _varifold_term(tape, var_batch.leaves[grid.steps]["x"],
                           var_batch.leaves[grid.steps]["n"], src.weights,
                           problem.target, kernel, yy)

    trans_leaf = quats_leaf = None
    if skel_batch is not None:
        trans_leaf = tape.leaf(model.pose.translation, name="pose.trans")
        quats_leaf = tape.leaf(model.pose.rotations, name="pose.quats")
        l_skel = _skeleton_term(tape, problem.skeleton, trans_leaf, quats_leaf,
                                skel_batch, bone_slices, bone_p0, grid)
    else:
        l_skel = tape.constant(0.0)

    qnetb = None
    if soft_batch is not None or surf_batch is not None:
        qnetb = nets.bind_mlp(tape, model.qnet, trainable=True, prefix="qnet")
    l_soft = (_conformal_terms(tape, qnetb, soft_batch, grid, None)
              if soft_batch is not None else tape.constant(0.0))
    l_surf = (_conformal_terms(tape, qnetb, surf_batch, grid, surf_frames)
              if surf_batch is not None else tape.constant(0.0))

    full = l_var
    for lam_i, term in ((lam.lambda1, l_skel), (lam.lambda2, l_soft),
                        (lam.lambda3, l_surf)):
        if lam_i > 0:
            full = ad.add(full, ad.mul(term, tape.constant(lam_i)))

    breakdown = LossBreakdown(float(l_var.value), float(l_skel.value),
                              float(l_soft.value), float(l_surf.value),
                              float(full.value))
    if not want_grads:
        return breakdown, None

    tape.backward(full)
    params = ParamSet.from_model(model)
    grads = params.zero_grads()
    if quats_leaf is not None:
        grads["pose.trans"] += tape.grad(trans_leaf)
        grads["pose.quats"] += tape.grad(quats_leaf)
    if qnetb is not None:
        for i, (Wv, bv, _) in enumerate(qnetb.layers):
            grads[f"qnet.W{i}"] += tape.grad(Wv)
            grads[f"qnet.b{i}"] += tape.grad(bv)
    for b in batches:
        _backward_through_flow(model, b, tape, grads)
    return breakdown, grads


# ----------------------------------------------------------------------
# public loss surface
# ----------------------------------------------------------------------

def loss_varifold(model: FlowModel, source: VarifoldSurface,
                  target: VarifoldSurface, kernel: KernelConfig) -> float:
    problem = Problem(source, target, kernel, LossWeights(0, 0, 0))
    breakdown, _ = _compute(model, problem)
    return breakdown.varifold


def loss_skeleton(model: FlowModel, skel: Skeleton, pose: PoseParams,
                  bone_points: list[np.ndarray], times: list[float]) -> float:
    """Sum over bones, times and samples of the flow/rigid-estimate gap."""
    saved = model.pose
    model.pose = pose
    try:
        dummy_target = VarifoldSurface([[0, 0, 0]], [[0, 0, 1]], [1.0])
        problem = Problem(dummy_target, dummy_target, KernelConfig(1, 1),
                          LossWeights(1.0, 0, 0), skeleton=skel, times=times)
        cs = ConstraintSets(bone_points, np.zeros((0, 3)), np.zeros((0, 3)),
                            np.zeros((0, 3)))
        breakdown, _ = _compute(model, problem, constraints=cs)
        return breakdown.skeleton
    finally:
        model.pose = saved


def loss_soft(model: FlowModel, qnet_params: MlpParams,
              tissue_points: np.ndarray, times: list[float]) -> float:
    saved = model.qnet
    model.qnet = qnet_params
    try:
        dummy = VarifoldSurface([[0, 0, 0]], [[0, 0, 1]], [1.0])
        problem = Problem(dummy, dummy, KernelConfig(1, 1),
                          LossWeights(0, 1.0, 0), times=times)
        cs = ConstraintSets([], np.asarray(tissue_points, dtype=float),
                            np.zeros((0, 3)), np.zeros((0, 3)))
        breakdown, _ = _compute(model, problem, constraints=cs)
        return breakdown.soft
    finally:
        model.qnet = saved


def loss_surf(model: FlowModel, qnet_params: MlpParams,
              surface_points: np.ndarray, surface_normals: np.ndarray,
              times: list[float]) -> float:
    saved = model.qnet
    model.qnet = qnet_params
    try:
        dummy = VarifoldSurface([[0, 0, 0]], [[0, 0, 1]], [1.0])
        problem = Problem(dummy, dummy, KernelConfig(1, 1),
                          LossWeights(0, 0, 1.0), times=times)
        cs = ConstraintSets([], np.zeros((0, 3)),
                            np.asarray(surface_points, dtype=float),
                            np.asarray(surface_normals, dtype=float))
        breakdown, _ = _compute(model, problem, constraints=cs)
        return breakdown.surface
    finally:
        model.qnet = saved


def full_loss(model: FlowModel, problem: Problem,
              constraints: Optional[ConstraintSets] = None) -> float:
    breakdown, _ = _compute(model, problem, constraints=constraints)
    return breakdown.total


def full_loss_terms(model: FlowModel, problem: Problem,
                    constraints: Optional[ConstraintSets] = None) -> LossBreakdown:
    breakdown, _ = _compute(model, problem, constraints=constraints)
    return breakdown


def full_loss_and_grads(model: FlowModel, problem: Problem,
                        constraints: Optional[ConstraintSets] = None):
    return _compute(model, problem, constraints=constraints, want_grads=True)


def align_pose_to_flow(model: FlowModel, skel: Skeleton,
                       bone_points: list[np.ndarray], times: list[float],
                       steps: int = 300, lr: float = 2e-2) -> None:
    """Fit the pose to the current flow of the bone samples, in place.

    The field stays frozen, so the bone trajectories are integrated once and
    the remaining problem is a small rigid-interpolation regression solved
    with the same optimizer as training.
    """
    grid = model.grid
    parts = [p for p in bone_points if len(p)]
    if not parts or steps <= 0:
        return
    slices, off = [], 0
    for pts in bone_points:
        slices.append((off, off + len(pts)))
        off += len(pts)
    stacked = np.concatenate([p for p in bone_points if len(p)], axis=0)
    field = model.field()
    traj = odes.ode_solve_batch(field, odes.FrameState(stacked), times, grid=grid)
    flowed = {grid.index_of(t): s.pos for t, s in zip(traj.times, traj.states)}

    ps = ParamSet()
    ps.entries["pose.trans"] = (model.pose.translation, VECTOR)
    ps.entries["pose.quats"] = (model.pose.rotations, VECTOR)
    opt = OptimizerState.init(ps)
    nodes = grid.nodes()
    for _ in range(steps):
        tape = Tape()
        trans = tape.leaf(model.pose.translation, name="pose.trans")
        quats = tape.leaf(model.pose.rotations, name="pose.quats")
        s_vars, r_vars = sk.fwd_kinematics_t(tape, skel, trans, quats)
        total = None
        for step_idx, pos in flowed.items():
            frac = nodes[step_idx] / grid.horizon
            for k, (lo, hi) in enumerate(slices):
                if hi == lo:
                    continue
                rigid = sk.rigid_points_at_t(tape, s_vars[k], r_vars[k],
                                             bone_points[k], frac)
                d = ad.sub(rigid, tape.constant(pos[lo:hi]))
                term = ad.sum_(ad.mul(d, d))
                total = term if total is None else ad.add(total, term)
        tape.backward(total)
        grads = {"pose.trans": tape.grad(trans), "pose.quats": tape.grad(quats)}
        vector_adam_step(opt, ps, grads, lr)
        model.pose.renormalise()


# ----------------------------------------------------------------------
# training driver
# ----------------------------------------------------------------------

LOG_HEADER = "epoch, L_var, L_skel, L_soft, L_surf, L_full, lr, ell_x, ell_n"


def _subsample_source(source: VarifoldSurface, n: Optional[int], seed: int,
                      epoch: int) -> VarifoldSurface:
    if n is None or n >= len(source):
        return source
    rng = sk.epoch_rng(seed, epoch, stream=1)
    idx = rng.choice(len(source), size=n, replace=False)
    idx.sort()
    w = source.weights[idx]
    w = w * (source.weights.sum() / w.sum())
    return VarifoldSurface(source.points[idx], source.normals[idx], w)


def train(model: FlowModel, problem: Problem, schedule: Schedule,
          log_file=None, callback: Optional[Callable] = None,
          start_epoch: int = 0):
    """Two-stage fit; returns the per-epoch history.

    Constraint points and the varifold source subsample are redrawn every
    epoch from (seed, epoch); the optimizer's moments persist across the
    stage switch. ``start_epoch`` resumes the schedule and sampling streams
    mid-run (optimizer moments start fresh). Aborts with the term breakdown
    if the loss goes non-finite.
    """
    params = ParamSet.from_model(model)
    opt = OptimizerState.init(params)
    yy_cache: dict = {}
    history = []
    total_epochs = schedule.epochs_main + schedule.epochs_ft
    log_fh = open(log_file, "w") if log_file is not None else None
    try:
        if log_fh:
            log_fh.write(LOG_HEADER + "\n")
        for epoch in range(start_epoch, total_epochs):
            lam = schedule.weights_at(epoch)
            kernel = schedule.kernel_at(epoch)
            lr = schedule.lr_at(epoch)
            if (epoch == schedule.constraint_start_epoch
                    and schedule.pose_align_steps > 0
                    and problem.skeleton is not None):
                cs0 = sk.sample_constraint_sets(
                    problem.skeleton, problem.source_mesh, problem.sample_params,
                    problem.seed, epoch)
                align_pose_to_flow(model, problem.skeleton, cs0.bone_points,
                                   problem.constraint_times(model.grid),
                                   steps=schedule.pose_align_steps)
            needs_constraints = (problem.skeleton is not None or
                                 lam.lambda2 > 0 or lam.lambda3 > 0)
            constraints = None
            if needs_constraints:
                constraints = sk.sample_constraint_sets(
                    problem.skeleton, problem.source_mesh, problem.sample_params,
                    problem.seed, epoch)
            src = _subsample_source(problem.source, schedule.source_samples,
                                    problem.seed, epoch)
            breakdown, grads = _compute(
                model, problem, source=src, constraints=constraints,
                kernel=kernel, weights=lam, yy_cache=yy_cache, want_grads=True)
            if not np.isfinite(breakdown.total):
                raise TrainingAbort(
                    f"non-finite loss at epoch {epoch}: {breakdown.as_dict()}")
            vector_adam_step(opt, params, grads, lr)
            model.pose.renormalise()
            rec = {"epoch": epoch, **breakdown.as_dict(), "lr": lr,
                   "ell_x": kernel.ell_x, "ell_n": kernel.ell_n}
            history.append(rec)
            if log_fh:
                log_fh.write(
                    f"{epoch}, {breakdown.varifold:.10e}, {breakdown.skeleton:.10e}, "
                    f"{breakdown.soft:.10e}, {breakdown.surface:.10e}, "
                    f"{breakdown.total:.10e}, {lr:.10e}, "
                    f"{kernel.ell_x:.10e}, {kernel.ell_n:.10e}\n")
            if callback is not None:
                callback(epoch, model, rec)
    finally:
        if log_fh:
            log_fh.close()
    return history
