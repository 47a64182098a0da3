"""Divergence-free velocity field as the exact analytic curl of a potential.

The velocity is assembled from the potential network's spatial Jacobian,
obtained with three forward-mode sweeps (basis directions). Its own Jacobian,
needed to transport normals and differential frames, comes from three more
sweeps over the velocity subgraph; the tangent cache makes those incremental.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import networks as nets
from .autodiff import NonFiniteValue, Tape, Var
from .networks import BoundMlp, MlpParams


@dataclass
class VelocityField:
    """Potential network plus the flow horizon; velocity = curl(potential)."""
    potential: MlpParams
    time_horizon: float = 1.0

    def __post_init__(self):
        if self.time_horizon <= 0:
            raise ValueError("time horizon must be positive")

    # integrators accept anything with eval/eval_jacobian/time_horizon
    def eval(self, x, t: float) -> np.ndarray:
        return velocity(self, x, t)

    def eval_jacobian(self, x, t: float) -> np.ndarray:
        return velocity_jacobian(self, x, t)

    def eval_with_jacobian(self, x, t: float):
        """One pass for both; the Jacobian reuses the shared tangent sweep."""
        _, T, S = potential_derivs(self.potential, x, t, need_second=True,
                                   time_scale=1.0 / self.time_horizon)
        v = _curl_np(T)
        J = np.stack([np.stack([S[k, 1][:, 2] - S[k, 2][:, 1],
                                S[k, 2][:, 0] - S[k, 0][:, 2],
                                S[k, 0][:, 1] - S[k, 1][:, 0]], axis=1)
                      for k in range(3)], axis=-1)
        return v, J


def _basis_tangent(tape: Tape, n: int, j: int) -> Var:
    e = np.zeros((n, 3))
    e[:, j] = 1.0
    return tape.constant(e)


def potential_cols(tape: Tape, net: BoundMlp, x: Var, t: float,
                   time_scale: float = 1.0) -> tuple[Var, list[Var]]:
    """Potential a(x,t) and its spatial Jacobian columns da/dx_j, each (N,3).

    ``time_scale`` maps absolute time onto the network's [0, 1] input
    (1 / horizon for flows with a horizon other than one).
    """
    a = nets.mlp_on_tape(tape, net, nets.input_with_time(tape, x, t * time_scale))
    n = x.shape[0]
    cols = []
    for j in range(3):
        key = f"x{j}@{x.nid}"
        tape.set_tangent(key, x, _basis_tangent(tape, n, j))
        cols.append(tape.jvp_sweep(a, key, start=x.nid))
    return a, cols


def _curl_from_cols(cols: list[Var]) -> Var:
    c0, c1, c2 = cols

    def comp(c, i):
        return ad.slice_(c, (slice(None), slice(i, i + 1)))

    vx = ad.sub(comp(c1, 2), comp(c2, 1))
    vy = ad.sub(comp(c2, 0), comp(c0, 2))
    vz = ad.sub(comp(c0, 1), comp(c1, 0))
    return ad.concat([vx, vy, vz], axis=1)


def velocity_t(tape: Tape, net: BoundMlp, x: Var, t: float,
               time_scale: float = 1.0) -> Var:
    """curl of the potential at (x, t), shape (N, 3)."""
    _, cols = potential_cols(tape, net, x, t, time_scale)
    return _curl_from_cols(cols)


def velocity_jacobian_t(tape: Tape, net: BoundMlp, x: Var, t: float,
                        time_scale: float = 1.0) -> tuple[Var, list[Var]]:
    """Velocity and its spatial Jacobian columns dv/dx_j (each (N,3))."""
    v = velocity_t(tape, net, x, t, time_scale)
    n = x.shape[0]
    jac_cols = []
    for j in range(3):
        key = f"x{j}@{x.nid}"
        # tangent for this key already set by potential_cols; the sweep now
        # extends through the first-order tangent nodes inside v
        jac_cols.append(tape.jvp_sweep(v, key, start=x.nid))
    return v, jac_cols


def normal_rate_t(n_var: Var, jac_cols: list[Var]) -> Var:
    """-J^T n on the tape: component k is -<n, dv/dx_k>."""
    comps = []
    for col in jac_cols:
        d = ad.dot(n_var, col)
        comps.append(ad.reshape(d, d.value.shape + (1,)))
    jt_n = ad.concat(comps, axis=-1)
    return ad.mul(jt_n, n_var.tape.constant(-1.0))


def basis_rate_t(b_var: Var, jac_cols: list[Var]) -> Var:
    """J B on the tape for a (N,3,3) basis of column vectors."""
    terms = []
    for k, col in enumerate(jac_cols):
        colk = ad.reshape(col, col.value.shape[:-1] + (3, 1))
        row = ad.slice_(b_var, (slice(None), slice(k, k + 1), slice(None)))
        terms.append(ad.mul(colk, row))
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


# ----------------------------------------------------------------------
# plain-array front end
# ----------------------------------------------------------------------
#
# The evaluation path propagates the three basis-direction tangents (and,
# when frames are transported, their tangents again) through the layers in
# batched numpy, mirroring the taped sweeps; parity between the two paths is
# covered by tests.

def _layer_with_derivs(z, T, S, lyr, omega0):
    """One layer applied to (value, first tangents, second tangents)."""
    u = z @ lyr.W.T + lyr.b
    Tu = T @ lyr.W.T
    Su = None if S is None else S @ lyr.W.T
    kind = lyr.kind
    if kind == nets.LINEAR:
        return u, Tu, Su
    if kind == nets.SIREN:
        su = omega0 * u
        first = omega0 * np.cos(su)
        z2 = np.sin(su)
        T2 = first * Tu
        if Su is None:
            return z2, T2, None
        second = -omega0 ** 2 * np.sin(su)
        S2 = first * Su + second * np.einsum("jnd,knd->jknd", Tu, Tu)
        return z2, T2, S2
    if kind == nets.FINER:
        w = (np.abs(u) + 1.0) * u
        wp = 2.0 * np.abs(u) + 1.0
        sw = omega0 * w
        first = omega0 * np.cos(sw) * wp
        z2 = np.sin(sw)
        T2 = first * Tu
        if Su is None:
            return z2, T2, None
        wpp = 2.0 * np.sign(u)
        second = omega0 * np.cos(sw) * wpp - (omega0 * wp) ** 2 * np.sin(sw)
        S2 = first * Su + second * np.einsum("jnd,knd->jknd", Tu, Tu)
        return z2, T2, S2
    if kind == nets.TANH:
        z2 = np.tanh(u)
        first = 1.0 - z2 ** 2
        T2 = first * Tu
        if Su is None:
            return z2, T2, None
        second = -2.0 * z2 * first
        S2 = first * Su + second * np.einsum("jnd,knd->jknd", Tu, Tu)
        return z2, T2, S2
    raise ValueError(f"unknown layer kind {kind!r}")


def potential_derivs(params: MlpParams, x: np.ndarray, t: float,
                     need_second: bool, time_scale: float = 1.0):
    """Potential with spatial tangents T[j] = da/dx_j (and S[j,k] if asked)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    z = np.concatenate([x, np.full((n, 1), t * time_scale)], axis=1)
    T = np.zeros((3, n, 4))
    for j in range(3):
        T[j, :, j] = 1.0
    S = np.zeros((3, 3, n, 4)) if need_second else None
    for lyr in params.layers:
        z, T, S = _layer_with_derivs(z, T, S, lyr, params.omega0)
    return z, T, S


def _curl_np(T: np.ndarray) -> np.ndarray:
    return np.stack([T[1][:, 2] - T[2][:, 1],
                     T[2][:, 0] - T[0][:, 2],
                     T[0][:, 1] - T[1][:, 0]], axis=1)


def velocity(field: VelocityField, x, t: float) -> np.ndarray:
    """Velocity v = curl a at positions x ((N,3) or (3,)) and time t."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    _, T, _ = potential_derivs(field.potential, x, t, need_second=False,
                               time_scale=1.0 / field.time_horizon)
    v = _curl_np(T)
    if not np.all(np.isfinite(v)):
        raise NonFiniteValue(f"non-finite velocity at t={t}")
    return v[0] if single else v


def velocity_jacobian(field: VelocityField, x, t: float) -> np.ndarray:
    """J[i, j] = dv_i/dx_j, shape (N, 3, 3) (or (3, 3) for a single point)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    _, _, S = potential_derivs(field.potential, x, t, need_second=True,
                               time_scale=1.0 / field.time_horizon)
    cols = [np.stack([S[k, 1][:, 2] - S[k, 2][:, 1],
                      S[k, 2][:, 0] - S[k, 0][:, 2],
                      S[k, 0][:, 1] - S[k, 1][:, 0]], axis=1) for k in range(3)]
    J = np.stack(cols, axis=-1)
    return J[0] if single else J


def normal_rate(n: np.ndarray, J: np.ndarray) -> np.ndarray:
    """Area-weighted normal transport -J^T n (trace term vanishes, div v = 0)."""
    n = np.asarray(n, dtype=float)
    J = np.asarray(J, dtype=float)
    return -np.einsum("...ji,...j->...i", J, n)


def basis_rate(B: np.ndarray, J: np.ndarray) -> np.ndarray:
    """Tangent-frame transport J B; rejects fields with nonzero divergence."""
    B = np.asarray(B, dtype=float)
    J = np.asarray(J, dtype=float)
    tr = np.einsum("...ii->...", J)
    scale = np.maximum(np.abs(J).max(axis=(-1, -2)), 1e-30)
    if np.any(np.abs(tr) > 1e-6 * np.maximum(scale, 1.0)):
        raise ValueError(
            f"basis_rate expects a trace-free Jacobian (max |trace| {np.abs(tr).max():.3e})")
    return J @ B
