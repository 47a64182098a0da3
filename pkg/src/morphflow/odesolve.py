"""Fixed-grid classical Runge-Kutta integration of points and attached frames.

One generic RK4 combinator serves two backends: plain numpy arrays for
evaluation and tape variables for training segments. States are dicts with
key "x" and optional "n" (area-weighted normal) and "B" (3x3 frame columns).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import flowfield as ff
from . import networks as nets
from .autodiff import Tape, Var
from .flowfield import VelocityField


class OdeError(Exception):
    pass


@dataclass
class TimeGrid:
    horizon: float = 1.0
    steps: int = 10

    def __post_init__(self):
        if self.horizon <= 0 or self.steps < 1:
            raise ValueError("horizon must be positive and steps >= 1")

    @property
    def h(self) -> float:
        return self.horizon / self.steps

    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        nodes = self.nodes()
        i = int(np.argmin(np.abs(nodes - t)))
        if abs(nodes[i] - t) > tol:
            raise OdeError(f"time {t} is not a grid node (no interpolation)")
        return i


@dataclass
class FrameState:
    pos: np.ndarray
    normal: Optional[np.ndarray] = None
    basis: Optional[np.ndarray] = None

    def copy(self) -> "FrameState":
        return FrameState(self.pos.copy(),
                          None if self.normal is None else self.normal.copy(),
                          None if self.basis is None else self.basis.copy())


@dataclass
class Trajectory:
    times: list[float]
    states: list[FrameState]

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ValueError("times and states lengths differ")


# ----------------------------------------------------------------------
# generic RK4
# ----------------------------------------------------------------------

def rk4_step(rate_fn, state: dict, t: float, h: float, add_scaled) -> dict:
    k1 = rate_fn(state, t)
    k2 = rate_fn(add_scaled(state, [(0.5 * h, k1)]), t + 0.5 * h)
    k3 = rate_fn(add_scaled(state, [(0.5 * h, k2)]), t + 0.5 * h)
    k4 = rate_fn(add_scaled(state, [(h, k3)]), t + h)
    return add_scaled(state, [(h / 6.0, k1), (h / 3.0, k2),
                              (h / 3.0, k3), (h / 6.0, k4)])


def _add_scaled_np(state: dict, parts) -> dict:
    out = {}
    for key, base in state.items():
        acc = base
        for c, rates in parts:
            acc = acc + c * rates[key]
        out[key] = acc
    return out


def _add_scaled_taped(state: dict, parts) -> dict:
    out = {}
    for key, base in state.items():
        tape = base.tape
        acc = base
        for c, rates in parts:
            acc = ad.add(acc, ad.mul(rates[key], tape.constant(c)))
        out[key] = acc
    return out


def _rate_np(field, state: dict, t: float) -> dict:
    x = state["x"]
    needs_jac = ("n" in state) or ("B" in state)
    if not needs_jac:
        return {"x": field.eval(x, t)}
    if hasattr(field, "eval_with_jacobian"):
        v, J = field.eval_with_jacobian(x, t)
    else:
        v = field.eval(x, t)
        J = field.eval_jacobian(x, t)
    rates = {"x": v}
    if "n" in state:
        rates["n"] = ff.normal_rate(state["n"], J)
    if "B" in state:
        rates["B"] = J @ state["B"]
    return rates


def taped_flow_rate(tape: Tape, net: nets.BoundMlp,
                    time_scale: float = 1.0) -> Callable:
    """Rate function over tape variables for the neural field."""

    def rate(state: dict, t: float) -> dict:
        x = state["x"]
        needs_jac = ("n" in state) or ("B" in state)
        if not needs_jac:
            return {"x": ff.velocity_t(tape, net, x, t, time_scale)}
        v, cols = ff.velocity_jacobian_t(tape, net, x, t, time_scale)
        rates = {"x": v}
        if "n" in state:
            rates["n"] = ff.normal_rate_t(state["n"], cols)
        if "B" in state:
            rates["B"] = ff.basis_rate_t(state["B"], cols)
        return rates

    return rate


# ----------------------------------------------------------------------
# front-end solvers (numpy backend)
# ----------------------------------------------------------------------

def _check_finite(state: dict, step: int) -> None:
    for key, v in state.items():
        if not np.all(np.isfinite(v)):
            raise OdeError(f"non-finite {key!r} state after step {step}")


def _integrate(field: VelocityField, state: dict, grid: TimeGrid,
               n_steps: int, record: Optional[set[int]] = None) -> dict:
    """Run n_steps of RK4; optionally collect states at recorded node indices."""
    rate = lambda s, t: _rate_np(field, s, t)
    h = grid.h
    recorded = {}
    if record is not None and 0 in record:
        recorded[0] = {k: v.copy() for k, v in state.items()}
    for k in range(n_steps):
        state = rk4_step(rate, state, k * h, h, _add_scaled_np)
        _check_finite(state, k)
        if record is not None and (k + 1) in record:
            recorded[k + 1] = {k2: v.copy() for k2, v in state.items()}
    state["_recorded"] = recorded
    return state


def ode_solve(field: VelocityField, x0, t_end: float,
              grid: Optional[TimeGrid] = None) -> np.ndarray:
    """Endpoint of the flow x' = v(x, t) started at x0, integrated to t_end."""
    grid = grid or TimeGrid(field.time_horizon, 10)
    if not (0.0 <= t_end <= grid.horizon + 1e-12):
        raise OdeError(f"t_end {t_end} outside [0, {grid.horizon}]")
    idx = grid.index_of(t_end)
    x0 = np.asarray(x0, dtype=float)
    single = x0.ndim == 1
    state = {"x": x0.reshape(-1, 3).copy()}
    out = _integrate(field, state, grid, idx)["x"]
    return out[0] if single else out


def ode_solve_with_frames(field: VelocityField, x0, n0, B0, t_end: float,
                          grid: Optional[TimeGrid] = None):
    """Jointly integrate position, normal (-J^T n) and basis (J B)."""
    grid = grid or TimeGrid(field.time_horizon, 10)
    idx = grid.index_of(t_end)
    x0 = np.asarray(x0, dtype=float)
    single = x0.ndim == 1
    x = x0.reshape(-1, 3).copy()
    state = {"x": x}
    if n0 is not None:
        n0 = np.asarray(n0, dtype=float).reshape(-1, 3)
        if not np.allclose(np.linalg.norm(n0, axis=1), 1.0, atol=1e-8):
            raise OdeError("initial normals must be unit length")
        state["n"] = n0.copy()
    if B0 is not None:
        B0 = np.asarray(B0, dtype=float).reshape(-1, 3, 3)
        if not np.allclose(np.linalg.norm(B0, axis=1), 1.0, atol=1e-8):
            raise OdeError("initial basis columns must be unit length")
        state["B"] = B0.copy()
    out = _integrate(field, state, grid, idx)

    def maybe(key):
        v = out.get(key)
        if v is None:
            return None
        return v[0] if single else v

    return maybe("x"), maybe("n"), maybe("B")


def ode_solve_batch(field: VelocityField, initial: FrameState,
                    sample_times: Sequence[float],
                    grid: Optional[TimeGrid] = None) -> Trajectory:
    """One integration pass recording states at every requested grid node."""
    grid = grid or TimeGrid(field.time_horizon, 10)
    indices = sorted({grid.index_of(t) for t in sample_times})
    state = {"x": np.asarray(initial.pos, dtype=float).reshape(-1, 3).copy()}
    if initial.normal is not None:
        state["n"] = np.asarray(initial.normal, dtype=float).reshape(-1, 3).copy()
    if initial.basis is not None:
        state["B"] = np.asarray(initial.basis, dtype=float).reshape(-1, 3, 3).copy()
    out = _integrate(field, state, grid, max(indices) if indices else 0,
                     record=set(indices))
    nodes = grid.nodes()
    times, states = [], []
    for i in indices:
        rec = out["_recorded"][i]
        times.append(float(nodes[i]))
        states.append(FrameState(rec["x"], rec.get("n"), rec.get("B")))
    return Trajectory(times, states)
