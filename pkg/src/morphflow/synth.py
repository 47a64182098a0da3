"""Synthetic source/target fixtures with exact ground-truth correspondence.

Targets are built by deforming the source mesh vertex-by-vertex (rigid motion
or a smoothly blended hinge rotation), so the ground-truth map is always the
identity index map. The sphere carries a deterministic asymmetric radial bump
field; a perfect sphere would make rotation recovery unobservable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .meshio import TriMesh
from .skeleton import Skeleton, quat_from_axis_angle, quat_pow, quat_rotate


def uv_sphere(n_rings: int, n_segments: int, radius: float = 0.5) -> TriMesh:
    """Latitude/longitude sphere with n_rings * n_segments + 2 vertices."""
    verts = [np.array([0.0, 0.0, radius])]
    for i in range(1, n_rings + 1):
        phi = np.pi * i / (n_rings + 1)
        for j in range(n_segments):
            th = 2 * np.pi * j / n_segments
            verts.append(radius * np.array([
                np.sin(phi) * np.cos(th), np.sin(phi) * np.sin(th), np.cos(phi)]))
    verts.append(np.array([0.0, 0.0, -radius]))
    top, bottom = 0, len(verts) - 1

    def ring(i, j):
        return 1 + i * n_segments + (j % n_segments)

    faces = []
    for j in range(n_segments):
        faces.append([top, ring(0, j), ring(0, j + 1)])
        faces.append([bottom, ring(n_rings - 1, j + 1), ring(n_rings - 1, j)])
    for i in range(n_rings - 1):
        for j in range(n_segments):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append([a, c, d])
            faces.append([a, d, b])
    return TriMesh(np.stack(verts), np.asarray(faces))


def icosphere(subdivisions: int = 3, radius: float = 0.5) -> TriMesh:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    verts = list(verts)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(m)
            return cache[key]

        new_faces = []
        for f in faces:
            ab, bc, ca = midpoint(f[0], f[1]), midpoint(f[1], f[2]), midpoint(f[2], f[0])
            new_faces += [[f[0], ab, ca], [f[1], bc, ab], [f[2], ca, bc], [ab, bc, ca]]
        faces = new_faces
    return TriMesh(np.stack(verts) * radius, np.asarray(faces))


def bump_field(directions: np.ndarray) -> np.ndarray:
    """Deterministic asymmetric radial modulation on unit directions."""
    x, y, z = directions[:, 0], directions[:, 1], directions[:, 2]
    return (np.sin(3.0 * x + 0.9) * np.cos(2.0 * y - 0.4)
            + 0.6 * np.sin(4.0 * z + 1.7) + 0.35 * np.cos(5.0 * x * y + 0.3))


def bumpy_sphere(resolution: int = 1000, radius: float = 0.42,
                 bump: float = 0.12) -> TriMesh:
    rings = max(3, int(round(np.sqrt(resolution / 2.0))))
    segs = max(6, 2 * rings)
    base = uv_sphere(rings, segs, radius=1.0)
    d = base.vertices / np.linalg.norm(base.vertices, axis=1, keepdims=True)
    r = radius * (1.0 + bump * bump_field(d))
    return TriMesh(d * r[:, None], base.faces)


def capsule_arm(resolution: int = 900, length: float = 0.9,
                radius: float = 0.1) -> tuple[TriMesh, Skeleton]:
    """Straight capsule along +x with a two-bone skeleton through its core.

    Joints sit at the base, the midpoint (elbow) and the tip; the surface is
    a cylinder with hemispherical caps, centred on the origin at the elbow.
    """
    half = length / 2.0
    segs = max(8, int(round(np.sqrt(resolution / 2.5))) * 2)
    n_axial = max(6, int(round(resolution / segs * 0.6)))
    n_cap = max(3, n_axial // 3)

    verts = [np.array([-half - radius, 0.0, 0.0])]
    rows = []
    # base cap (hemisphere around -x), then shaft rings, then tip cap
    for i in range(1, n_cap + 1):
        phi = (np.pi / 2) * i / n_cap
        rows.append((-half - radius * np.cos(phi), radius * np.sin(phi)))
    for i in range(1, n_axial):
        rows.append((-half + length * i / n_axial, radius))
    for i in range(n_cap, 0, -1):
        phi = (np.pi / 2) * i / n_cap
        rows.append((half + radius * np.cos(phi), radius * np.sin(phi)))
    for cx, r in rows:
        for j in range(segs):
            th = 2 * np.pi * j / segs
            verts.append(np.array([cx, r * np.cos(th), r * np.sin(th)]))
    verts.append(np.array([half + radius, 0.0, 0.0]))
    first, last = 0, len(verts) - 1
    n_rows = len(rows)

    def rid(i, j):
        return 1 + i * segs + (j % segs)

    faces = []
    for j in range(segs):
        faces.append([first, rid(0, j + 1), rid(0, j)])
        faces.append([last, rid(n_rows - 1, j), rid(n_rows - 1, j + 1)])
    for i in range(n_rows - 1):
        for j in range(segs):
            a, b = rid(i, j), rid(i, j + 1)
            c, d = rid(i + 1, j), rid(i + 1, j + 1)
            faces.append([a, d, c])
            faces.append([a, b, d])
    mesh = TriMesh(np.stack(verts), np.asarray(faces))
    skel = Skeleton(np.array([[-half, 0, 0], [0.0, 0, 0], [half, 0, 0]]),
                    [(0, 1), (1, 2)], root=0)
    return mesh, skel


def two_box(resolution: int = 400, size: float = 0.4,
            thickness: float = 0.16) -> tuple[TriMesh, Skeleton]:
    """Two cuboids meeting at a hinge on the z-axis through the origin."""

    def box(x0, x1, n):
        xs = np.linspace(x0, x1, n)
        ys = np.linspace(-thickness / 2, thickness / 2, max(2, n // 3))
        zs = np.linspace(-thickness / 2, thickness / 2, max(2, n // 3))
        return _box_mesh(xs, ys, zs)

    n = max(4, int(round(np.sqrt(resolution / 12.0))) + 2)
    gap = 0.005
    b1 = box(-size, -gap, n)
    b2 = box(gap, size, n)
    verts = np.concatenate([b1.vertices, b2.vertices])
    faces = np.concatenate([b1.faces, b2.faces + len(b1.vertices)])
    skel = Skeleton(np.array([[-size, 0, 0], [0.0, 0, 0], [size, 0, 0]]),
                    [(0, 1), (1, 2)], root=0)
    return TriMesh(verts, faces), skel


def _box_mesh(xs, ys, zs) -> TriMesh:
    nx, ny, nz = len(xs), len(ys), len(zs)
    verts = []
    index: dict[tuple[int, int, int], int] = {}

    def vid(i, j, k):
        key = (i, j, k)
        if key not in index:
            index[key] = len(verts)
            verts.append(np.array([xs[i], ys[j], zs[k]]))
        return index[key]

    faces = []

    def quad(a, b, c, d, flip):
        if flip:
            faces.append([a, c, b])
            faces.append([a, d, c])
        else:
            faces.append([a, b, c])
            faces.append([a, c, d])

    for j in range(ny - 1):       # x = const walls
        for k in range(nz - 1):
            for i, flip in ((0, True), (nx - 1, False)):
                quad(vid(i, j, k), vid(i, j + 1, k), vid(i, j + 1, k + 1),
                     vid(i, j, k + 1), flip)
    for i in range(nx - 1):       # y = const walls
        for k in range(nz - 1):
            for j, flip in ((0, False), (ny - 1, True)):
                quad(vid(i, j, k), vid(i + 1, j, k), vid(i + 1, j, k + 1),
                     vid(i, j, k + 1), flip)
    for i in range(nx - 1):       # z = const walls
        for j in range(ny - 1):
            for k, flip in ((0, True), (nz - 1, False)):
                quad(vid(i, j, k), vid(i + 1, j, k), vid(i + 1, j + 1, k),
                     vid(i, j + 1, k), flip)
    return TriMesh(np.stack(verts), np.asarray(faces))


# ----------------------------------------------------------------------
# ground-truth deformations
# ----------------------------------------------------------------------

def rigid_target(mesh: TriMesh, axis, angle: float, translation) -> TriMesh:
    q = quat_from_axis_angle(np.asarray(axis, dtype=float), angle)
    return mesh.with_vertices(quat_rotate(q, mesh.vertices)
                              + np.asarray(translation, dtype=float))


def smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def hinge_target(mesh: TriMesh, pivot, axis, angle: float,
                 blend_halfwidth: float = 0.08) -> TriMesh:
    """Rotate everything distal of the pivot plane, blending smoothly.

    The blend weight ramps along the x-coordinate relative to the pivot; the
    fully-distal region moves exactly rigidly.
    """
    pivot = np.asarray(pivot, dtype=float)
    axis = np.asarray(axis, dtype=float)
    w = smoothstep((mesh.vertices[:, 0] - pivot[0] + blend_halfwidth)
                   / (2.0 * blend_halfwidth))
    q_full = quat_from_axis_angle(axis, angle)
    out = mesh.vertices.copy()
    moving = w > 0.0
    for i in np.where(moving)[0]:
        qi = quat_pow(q_full, float(w[i]))
        out[i] = pivot + quat_rotate(qi, mesh.vertices[i] - pivot)
    return mesh.with_vertices(out)


@dataclass
class SynthProblem:
    source: TriMesh
    target: TriMesh
    skeleton: Optional[Skeleton]
    gt_map: np.ndarray             # identity index map
    meta: dict


def make_problem(shape: str, resolution: int = 1000, angle_deg: float = 30.0,
                 translation: float = 0.2) -> SynthProblem:
    if shape == "sphere":
        src = bumpy_sphere(resolution)
        axis = np.array([0.3, 1.0, 0.2])
        t = np.array([translation, 0.0, 0.0])
        tgt = rigid_target(src, axis, np.deg2rad(angle_deg), t)
        half = 0.35
        skel = Skeleton(np.array([[0, 0, -half], [0, 0, 0], [0, 0, half]]),
                        [(0, 1), (1, 2)], root=0)
        meta = {"shape": shape, "angle_deg": angle_deg, "axis": axis.tolist(),
                "translation": t.tolist()}
    elif shape == "capsule_arm":
        src, skel = capsule_arm(resolution)
        axis = np.array([0.0, 0.0, 1.0])
        tgt = hinge_target(src, pivot=np.zeros(3), axis=axis,
                           angle=np.deg2rad(angle_deg))
        meta = {"shape": shape, "angle_deg": angle_deg, "axis": axis.tolist(),
                "translation": [0.0, 0.0, 0.0], "pivot": [0.0, 0.0, 0.0]}
    elif shape == "two_box":
        src, skel = two_box(resolution)
        axis = np.array([0.0, 0.0, 1.0])
        tgt = hinge_target(src, pivot=np.zeros(3), axis=axis,
                           angle=np.deg2rad(angle_deg), blend_halfwidth=0.02)
        meta = {"shape": shape, "angle_deg": angle_deg, "axis": axis.tolist(),
                "translation": [0.0, 0.0, 0.0], "pivot": [0.0, 0.0, 0.0]}
    else:
        raise ValueError(f"unknown synthetic shape {shape!r}")
    return SynthProblem(src, tgt, skel, np.arange(len(src.vertices)), meta)
