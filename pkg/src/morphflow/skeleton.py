"""Skeleton model, quaternion algebra and constraint-point sampling.

The skeleton is a tree of joints connected by bone edges, given for the
source shape only. Bones are cylinders; rigidity constraints compare flowed
cylinder samples against the interpolated rigid transform of their bone.
Quaternions are stored (w, x, y, z).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


class SkeletonError(Exception):
    pass


@dataclass
class Skeleton:
    joints: np.ndarray          # (J, 3)
    edges: list[tuple[int, int]]  # (parent_joint, child_joint)
    root: int

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=float).reshape(-1, 3)
        self.edges = [(int(a), int(b)) for a, b in self.edges]
        J = len(self.joints)
        if not (0 <= self.root < J):
            raise SkeletonError(f"root index {self.root} out of range")
        parent_count = {j: 0 for j in range(J)}
        for a, b in self.edges:
            if not (0 <= a < J and 0 <= b < J):
                raise SkeletonError(f"edge ({a},{b}) out of range")
            parent_count[b] += 1
        if parent_count[self.root] != 0:
            raise SkeletonError("root joint must have no parent edge")
        for j in range(J):
            if j != self.root and parent_count[j] != 1:
                raise SkeletonError(f"joint {j} must have exactly one parent edge")
        # connectivity + acyclicity via traversal from the root
        children = {j: [] for j in range(J)}
        for k, (a, b) in enumerate(self.edges):
            children[a].append((k, b))
        seen = set()
        stack = [self.root]
        while stack:
            j = stack.pop()
            if j in seen:
                raise SkeletonError("cycle detected in skeleton")
            seen.add(j)
            stack.extend(b for _, b in children[j])
        if len(seen) != J:
            raise SkeletonError("skeleton graph is not connected")
        self._children = children

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_order_root_to_leaf(self) -> list[int]:
        order = []
        stack = [self.root]
        while stack:
            j = stack.pop()
            for k, b in self._children[j]:
                order.append(k)
                stack.append(b)
        return order

    def parent_edge(self, k: int) -> Optional[int]:
        a, _ = self.edges[k]
        for kk, (_, b) in enumerate(self.edges):
            if b == a:
                return kk
        return None

    def bone_length(self, k: int) -> float:
        a, b = self.edges[k]
        return float(np.linalg.norm(self.joints[b] - self.joints[a]))

    def transformed(self, scale: float, offset: np.ndarray) -> "Skeleton":
        return Skeleton(self.joints * scale + offset, list(self.edges), self.root)


@dataclass
class PoseParams:
    translation: np.ndarray        # (3,) global translation
    rotations: np.ndarray          # (K, 4) unit quaternion per edge

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(-1, 4)

    @staticmethod
    def identity(n_edges: int) -> "PoseParams":
        return PoseParams(np.zeros(3), np.tile(IDENTITY_QUAT, (n_edges, 1)))

    def renormalise(self) -> None:
        """Project rotations back to unit quaternions on the principal branch.

        In place: optimizer state keeps referencing the same arrays.
        """
        n = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        self.rotations /= n
        flip = self.rotations[:, 0] < 0.0
        self.rotations[flip] *= -1.0


@dataclass
class BoneSampleParams:
    beta_bone: float = 0.10
    beta_tissue: float = 0.25
    n_bone: int = 50
    n_tissue: int = 50
    n_surface: int = 500


# ----------------------------------------------------------------------
# quaternion algebra (numpy)
# ----------------------------------------------------------------------

def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, av = a[..., :1], a[..., 1:]
    bw, bv = b[..., :1], b[..., 1:]
    w = aw * bw - np.sum(av * bv, axis=-1, keepdims=True)
    v = aw * bv + bw * av + np.cross(av, bv)
    return np.concatenate([w, v], axis=-1)


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.concatenate([q[..., :1], -q[..., 1:]], axis=-1)


def quat_rotate(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Rotate 3-vectors p by unit quaternions q (q . p . q*)."""
    p = np.asarray(p, dtype=float)
    pq = np.concatenate([np.zeros(p.shape[:-1] + (1,)), p], axis=-1)
    return quat_mul(quat_mul(q, pq), quat_conj(q))[..., 1:]


def quat_ln(q: np.ndarray) -> np.ndarray:
    """Principal-branch logarithm; zero scalar part for unit quaternions."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("ln of the zero quaternion")
    w = q[..., :1] / n
    v = q[..., 1:] / n
    # f(w) = theta / sin(theta) with w = cos(theta); smooth at the identity
    f = ad._asinc(w)
    return np.concatenate([np.log(n), v * f], axis=-1)


def quat_exp(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, v = q[..., :1], q[..., 1:]
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.exp(w) * np.concatenate(
        [np.cos(theta), v * ad._sinc(theta)], axis=-1)


def quat_pow(q: np.ndarray, t: float) -> np.ndarray:
    return quat_exp(quat_ln(q) * t)


def quat_time_derivative(q: np.ndarray, t: float) -> np.ndarray:
    """d/dt of q^t for a constant unit quaternion: ln(q) . q^t."""
    return quat_mul(quat_ln(q), quat_pow(q, t))


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], axis * np.sin(angle / 2)])


def quat_angle(q: np.ndarray) -> float:
    """Principal rotation angle of a unit quaternion, in [0, pi]."""
    q = ad.quat_sign_fix(np.asarray(q, dtype=float))
    w = np.clip(q[..., 0], -1.0, 1.0)
    return 2.0 * np.arccos(w)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


# ----------------------------------------------------------------------
# forward kinematics and rigid interpolation
# ----------------------------------------------------------------------

@dataclass
class BoneTransforms:
    """Absolute rigid transform per edge: p -> translation_k + r_k p r_k*."""
    translations: np.ndarray  # (K, 3)
    rotations: np.ndarray     # (K, 4)


def fwd_kinematics(skel: Skeleton, pose: PoseParams) -> BoneTransforms:
    """Root-to-leaf accumulation of the per-edge rigid transforms.

    The identity pose with zero translation maps every joint to itself.
    """
    K = skel.n_edges
    if pose.rotations.shape[0] != K:
        raise SkeletonError("one joint rotation per edge required")
    joint_rot = {skel.root: IDENTITY_QUAT.copy()}
    joint_pos = {skel.root: skel.joints[skel.root] + pose.translation}
    s = np.zeros((K, 3))
    r = np.zeros((K, 4))
    for k in skel.edge_order_root_to_leaf():
        a, b = skel.edges[k]
        rk = quat_mul(joint_rot[a], pose.rotations[k])
        pos_b = joint_pos[a] + quat_rotate(rk, skel.joints[b] - skel.joints[a])
        r[k] = rk
        s[k] = joint_pos[a] - quat_rotate(rk, skel.joints[a])
        joint_rot[b] = rk
        joint_pos[b] = pos_b
    return BoneTransforms(s, r)


def posed_joints(skel: Skeleton, pose: PoseParams) -> np.ndarray:
    """Joint positions after applying the pose (the transferred skeleton)."""
    tf = fwd_kinematics(skel, pose)
    out = skel.joints.copy()
    out[skel.root] = skel.joints[skel.root] + pose.translation
    for k, (_, b) in enumerate(skel.edges):
        out[b] = tf.translations[k] + quat_rotate(tf.rotations[k], skel.joints[b])
    return out


def slerp_pose(final: BoneTransforms, t: float, T: float) -> BoneTransforms:
    """Constant-speed interpolation of every bone transform from identity."""
    frac = t / T
    s = frac * final.translations
    r = np.stack([quat_pow(q, frac) for q in final.rotations])
    return BoneTransforms(s, r)


def rigid_point_at(final: BoneTransforms, k: int, p0: np.ndarray, t: float,
                   T: float = 1.0) -> np.ndarray:
    """Position at time t of a bone-k point under the interpolated transform."""
    frac = t / T
    q = quat_pow(final.rotations[k], frac)
    return frac * final.translations[k] + quat_rotate(q, p0)


# ----------------------------------------------------------------------
# bone-cylinder sampling
# ----------------------------------------------------------------------

def _bone_frame(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal pair spanning the plane orthogonal to d."""
    a = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(d, a)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


def sample_bone_point(skel: Skeleton, k: int, alpha: Sequence[float],
                      beta_bone: float = 0.10) -> np.ndarray:
    """Cylindrical coordinates (tau, rho, psi) to a point in bone k."""
    tau, rho, psi = alpha
    if not (0.0 <= tau <= 1.0 and 0.0 <= rho <= 1.0):
        raise ValueError("tau and rho must lie in [0, 1]")
    a, b = skel.edges[k]
    base, tip = skel.joints[a], skel.joints[b]
    axis = tip - base
    length = np.linalg.norm(axis)
    if length == 0.0:
        raise SkeletonError(f"zero-length bone {k}")
    d = axis / length
    u, v = _bone_frame(d)
    radial = rho * beta_bone * length
    return base + tau * axis + radial * (np.cos(psi) * u + np.sin(psi) * v)


def sample_cylinder_points(skel: Skeleton, k: int, n: int, rng,
                           r_inner_frac: float, r_outer_frac: float) -> np.ndarray:
    """n points uniform by volume in the (annular) cylinder around bone k."""
    a, b = skel.edges[k]
    base, tip = skel.joints[a], skel.joints[b]
    axis = tip - base
    length = np.linalg.norm(axis)
    if length == 0.0:
        raise SkeletonError(f"zero-length bone {k}")
    d = axis / length
    u, v = _bone_frame(d)
    tau = rng.uniform(0.0, 1.0, size=n)
    r1, r2 = r_inner_frac * length, r_outer_frac * length
    radial = np.sqrt(rng.uniform(0.0, 1.0, size=n) * (r2 ** 2 - r1 ** 2) + r1 ** 2)
    psi = rng.uniform(0.0, 2 * np.pi, size=n)
    return (base[None, :] + tau[:, None] * axis[None, :]
            + radial[:, None] * (np.cos(psi)[:, None] * u[None, :]
                                 + np.sin(psi)[:, None] * v[None, :]))


def epoch_rng(seed: int, epoch: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch, stream)))


@dataclass
class ConstraintSets:
    bone_points: list[np.ndarray]    # per edge, (n_bone, 3)
    tissue_points: np.ndarray        # (n_tissue_total, 3)
    surface_points: np.ndarray       # (n_surface, 3)
    surface_normals: np.ndarray      # (n_surface, 3)


def sample_constraint_sets(skel: Optional[Skeleton], mesh, params: BoneSampleParams,
                           seed: int, epoch: int = 0) -> ConstraintSets:
    """Fresh per-epoch draws of bone, tissue and surface constraint points.

    Tissue points live in the annulus between the bone radius and the tissue
    radius and are rejected if they fall outside the source mesh.
    """
    from .meshio import point_in_mesh  # local import to avoid a cycle

    rng = epoch_rng(seed, epoch)
    bone_pts: list[np.ndarray] = []
    tissue: list[np.ndarray] = []
    if skel is not None:
        for k in range(skel.n_edges):
            if params.n_bone > 0:
                bone_pts.append(sample_cylinder_points(
                    skel, k, params.n_bone, rng, 0.0, params.beta_bone))
            else:
                bone_pts.append(np.zeros((0, 3)))
            if params.n_tissue > 0:
                want = params.n_tissue
                got: list[np.ndarray] = []
                for _ in range(20):
                    cand = sample_cylinder_points(
                        skel, k, want, rng, params.beta_bone, params.beta_tissue)
                    if mesh is not None:
                        cand = cand[point_in_mesh(mesh, cand)]
                    got.append(cand)
                    want -= len(cand)
                    if want <= 0:
                        break
                pts = np.concatenate(got, axis=0) if got else np.zeros((0, 3))
                tissue.append(pts[:params.n_tissue])
    tissue_pts = np.concatenate(tissue, axis=0) if tissue else np.zeros((0, 3))

    if params.n_surface > 0 and mesh is not None:
        areas = mesh.vertex_areas
        p = areas / areas.sum()
        idx = rng.choice(len(p), size=params.n_surface, replace=True, p=p)
        surf = mesh.vertices[idx]
        surf_n = mesh.vertex_normals[idx]
    else:
        surf = np.zeros((0, 3))
        surf_n = np.zeros((0, 3))
    return ConstraintSets(bone_pts, tissue_pts, surf, surf_n)


# ----------------------------------------------------------------------
# taped quaternion machinery (for pose gradients)
# ----------------------------------------------------------------------

def quat_mul_t(a: Var, b: Var) -> Var:
    """Quaternion product on the tape; operands (..., 4)."""
    k = a.value.ndim - 1
    full = (slice(None),) * k

    def part(v, s):
        return ad.slice_(v, full + (s,))

    aw, av = part(a, slice(0, 1)), part(a, slice(1, 4))
    bw, bv = part(b, slice(0, 1)), part(b, slice(1, 4))
    w = ad.sub(ad.mul(aw, bw), ad.sum_(ad.mul(av, bv), axis=-1, keepdims=True))
    v = ad.add(ad.add(ad.mul(aw, bv), ad.mul(bw, av)), ad.cross(av, bv))
    return ad.concat([w, v], axis=-1)


def quat_ln_unit_t(q: Var) -> Var:
    """Vector part of ln(q) for unit quaternions, smooth at the identity."""
    k = q.value.ndim - 1
    full = (slice(None),) * k
    w = ad.slice_(q, full + (slice(0, 1),))
    v = ad.slice_(q, full + (slice(1, 4),))
    return ad.mul(v, ad.asinc(w))


def quat_exp_pure_t(u: Var) -> Var:
    """exp of a pure quaternion (0, u): (cos|u|, u sinc|u|)."""
    tape = u.tape
    theta = ad.norm(u)
    k = u.value.ndim - 1
    theta_k = ad.reshape(theta, theta.value.shape + (1,))
    w = ad.cos(theta_k)
    v = ad.mul(u, ad.sinc(theta_k))
    return ad.concat([w, v], axis=-1)


def quat_pow_t(q: Var, frac: float) -> Var:
    tape = q.tape
    return quat_exp_pure_t(ad.mul(quat_ln_unit_t(q), tape.constant(float(frac))))


def quat_rotmat_t(q: Var) -> Var:
    """Rotation matrices (..., 3, 3) from unit quaternions (..., 4)."""
    tape = q.tape
    k = q.value.ndim - 1
    full = (slice(None),) * k

    def c(i):
        return ad.slice_(q, full + (slice(i, i + 1),))

    w, x, y, z = c(0), c(1), c(2), c(3)
    one = tape.constant(1.0)
    two = tape.constant(2.0)

    def m(a, b):
        return ad.mul(a, b)

    entries = [
        ad.sub(one, m(two, ad.add(m(y, y), m(z, z)))),
        m(two, ad.sub(m(x, y), m(w, z))),
        m(two, ad.add(m(x, z), m(w, y))),
        m(two, ad.add(m(x, y), m(w, z))),
        ad.sub(one, m(two, ad.add(m(x, x), m(z, z)))),
        m(two, ad.sub(m(y, z), m(w, x))),
        m(two, ad.sub(m(x, z), m(w, y))),
        m(two, ad.add(m(y, z), m(w, x))),
        ad.sub(one, m(two, ad.add(m(x, x), m(y, y)))),
    ]
    flat = ad.concat(entries, axis=-1)
    return ad.reshape(flat, q.value.shape[:-1] + (3, 3))


def fwd_kinematics_t(tape: Tape, skel: Skeleton, trans: Var, quats: Var
                     ) -> tuple[list[Var], list[Var]]:
    """Taped forward kinematics; returns per-edge (translation, rotation)."""
    joint_rot: dict[int, Optional[Var]] = {skel.root: None}
    joint_pos: dict[int, Var] = {
        skel.root: ad.add(tape.constant(skel.joints[skel.root]), trans)}
    s_out: list[Optional[Var]] = [None] * skel.n_edges
    r_out: list[Optional[Var]] = [None] * skel.n_edges
    for k in skel.edge_order_root_to_leaf():
        a, b = skel.edges[k]
        qk = ad.slice_(quats, (k, slice(None)))
        parent = joint_rot[a]
        rk = qk if parent is None else quat_mul_t(parent, qk)
        R = quat_rotmat_t(rk)
        pos_b = ad.add(joint_pos[a],
                       ad.matvec(R, tape.constant(skel.joints[b] - skel.joints[a])))
        s_out[k] = ad.sub(joint_pos[a], ad.matvec(R, tape.constant(skel.joints[a])))
        r_out[k] = rk
        joint_rot[b] = rk
        joint_pos[b] = pos_b
    return s_out, r_out  # type: ignore[return-value]


def rigid_points_at_t(tape: Tape, s_k: Var, r_k: Var, p0: np.ndarray,
                      frac: float) -> Var:
    """Taped rigid interpolation of bone points p0 (n, 3) at fraction t/T."""
    q_t = quat_pow_t(r_k, frac)
    R = quat_rotmat_t(q_t)
    rotated = ad.matvec(R, tape.constant(p0))
    shift = ad.mul(s_k, tape.constant(float(frac)))
    return ad.add(rotated, shift)


# ----------------------------------------------------------------------
# skeleton file format
# ----------------------------------------------------------------------

def save_skeleton(path, skel: Skeleton) -> None:
    with open(path, "w") as f:
        for i, p in enumerate(skel.joints):
            f.write(f"joint {i} {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        for a, b in skel.edges:
            f.write(f"edge {a} {b}\n")
        f.write(f"root {skel.root}\n")


def load_skeleton(path) -> Skeleton:
    joints: dict[int, np.ndarray] = {}
    edges: list[tuple[int, int]] = []
    root = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "joint":
                    joints[int(parts[1])] = np.array([float(v) for v in parts[2:5]])
                elif parts[0] == "edge":
                    edges.append((int(parts[1]), int(parts[2])))
                elif parts[0] == "root":
                    root = int(parts[1])
                else:
                    raise ValueError(f"unknown record {parts[0]!r}")
            except (ValueError, IndexError) as e:
                raise SkeletonError(f"{path}:{lineno}: {e}") from e
    if root is None:
        raise SkeletonError(f"{path}: missing root record")
    if sorted(joints) != list(range(len(joints))):
        raise SkeletonError(f"{path}: joint ids must be 0..J-1")
    pts = np.stack([joints[i] for i in range(len(joints))])
    return Skeleton(pts, edges, root)
