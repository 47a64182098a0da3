"""Minimal reverse/forward-mode differentiation engine on a flat tape.

Values are float64 numpy arrays of any shape; elementwise ops broadcast like
numpy and reduce adjoints back over broadcast axes. The op set is closed and
enumerated in ``OPS``; everything differentiable in this package (networks,
kernels, quaternion algebra, integrators) compiles to these ops.

Forward-mode directional derivatives (``jvp``) propagate tangents that are
themselves tape nodes, so reverse-mode gradients flow through quantities
built from first derivatives (curl, velocity Jacobians). Nested jvp calls
give exact second derivatives; a per-direction tangent cache makes repeated
sweeps over a shared subgraph incremental.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np


class TapeError(Exception):
    """Base error for tape construction and evaluation problems."""


class ShapeMismatch(TapeError):
    pass


class NonFiniteValue(TapeError):
    pass


class DegenerateEigenpair(TapeError):
    """Minimum eigenvalue of a symmetric 4x4 block is (nearly) repeated."""


def _asarray(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


@dataclass
class TapeNode:
    id: int
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    adjoint: Optional[np.ndarray] = None
    aux: Any = None
    requires_grad: bool = False
    name: Optional[str] = None


class Var:
    """Handle to a tape node; supports numpy-style operator sugar."""

    __slots__ = ("tape", "nid")

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def node(self) -> TapeNode:
        return self.tape.nodes[self.nid]

    @property
    def value(self) -> np.ndarray:
        return self.node.value

    @property
    def shape(self):
        return self.node.value.shape

    def __repr__(self):
        return f"Var(id={self.nid}, op={self.node.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, self.tape.lift(other))

    def __radd__(self, other):
        return add(self.tape.lift(other), self)

    def __sub__(self, other):
        return sub(self, self.tape.lift(other))

    def __rsub__(self, other):
        return sub(self.tape.lift(other), self)

    def __mul__(self, other):
        return mul(self, self.tape.lift(other))

    def __rmul__(self, other):
        return mul(self.tape.lift(other), self)

    def __truediv__(self, other):
        return div(self, self.tape.lift(other))

    def __rtruediv__(self, other):
        return div(self.tape.lift(other), self)

    def __neg__(self):
        return mul(self, self.tape.constant(-1.0))

    def __getitem__(self, key):
        return slice_(self, key)


class Tape:
    """Append-only DAG of TapeNodes in topological order."""

    def __init__(self, check_finite: bool = False):
        self.nodes: list[TapeNode] = []
        self.check_finite = check_finite
        # (direction_key, node_id) -> tangent node id (or -1 for structural zero)
        self._tangents: dict[tuple[str, int], int] = {}
        # (node_id, helper_name) -> node id, shared between jvp sweeps
        self._helpers: dict[tuple[int, str], int] = {}
        self._jvp_counter = 0

    def lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise TapeError("operands belong to different tapes")
            return x
        return self.constant(x)

    def constant(self, value) -> Var:
        return self._record("const", (), _asarray(value), requires_grad=False)

    def leaf(self, value, name: Optional[str] = None) -> Var:
        return self._record("leaf", (), _asarray(value), requires_grad=True, name=name)

    def _record(self, op, inputs, value, aux=None, requires_grad=None, name=None) -> Var:
        if requires_grad is None:
            requires_grad = any(self.nodes[i].requires_grad for i in inputs)
        nid = len(self.nodes)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteValue(f"non-finite value at node {nid} (op {op})")
        self.nodes.append(TapeNode(nid, op, tuple(inputs), value, None, aux, requires_grad, name))
        return Var(self, nid)

    def apply(self, op: str, *args: Var, aux=None) -> Var:
        spec = OPS[op]
        vals = [a.value for a in args]
        try:
            out = spec.forward(aux, *vals)
        except ValueError as e:
            raise ShapeMismatch(f"op {op} at node {len(self.nodes)}: {e}") from e
        return self._record(op, tuple(a.nid for a in args), out, aux=aux)

    def helper(self, src: Var, tag: str, build: Callable[[], Var]) -> Var:
        key = (src.nid, tag)
        nid = self._helpers.get(key)
        if nid is None:
            v = build()
            self._helpers[key] = v.nid
            return v
        return Var(self, nid)

    # ------------------------------------------------------------------
    # reverse mode
    # ------------------------------------------------------------------

    def backward(self, out: Var, seed=None) -> None:
        """Accumulate adjoints for everything ``out`` depends on.

        Adjoints add across repeated uses; leaves keep their accumulated
        adjoint until ``clear_adjoints``.
        """
        if not self.nodes:
            raise TapeError("backward on an empty tape (no forward pass recorded)")
        if seed is None:
            seed = np.ones_like(out.node.value)
        self.backward_multi([(out, seed)])

    def backward_multi(self, seeds: list[tuple["Var", np.ndarray]]) -> None:
        """Reverse sweep with several seeded outputs at once."""
        if not self.nodes:
            raise TapeError("backward on an empty tape (no forward pass recorded)")
        top = -1
        for out, seed in seeds:
            seed = _asarray(seed)
            if seed.shape != out.node.value.shape:
                raise ShapeMismatch(
                    f"seed shape {seed.shape} != output shape {out.node.value.shape}")
            self._accumulate(out.node, seed)
            top = max(top, out.nid)
        for nid in range(top, -1, -1):
            n = self.nodes[nid]
            if n.adjoint is None or not n.requires_grad or not n.inputs:
                continue
            in_nodes = [self.nodes[i] for i in n.inputs]
            grads = OPS[n.op].backward(n, in_nodes)
            for inode, g in zip(in_nodes, grads):
                if g is None or not inode.requires_grad:
                    continue
                self._accumulate(inode, g)

    def _accumulate(self, node: TapeNode, g: np.ndarray) -> None:
        if node.adjoint is None:
            # copy: backward rules may hand back views of other adjoints
            node.adjoint = np.array(g, dtype=np.float64)
        else:
            node.adjoint += g

    def clear_adjoints(self) -> None:
        for n in self.nodes:
            n.adjoint = None

    def grad(self, leaf: Var) -> np.ndarray:
        a = leaf.node.adjoint
        return np.zeros_like(leaf.value) if a is None else a

    # ------------------------------------------------------------------
    # forward mode
    # ------------------------------------------------------------------

    def set_tangent(self, key: str, var: Var, tangent: Var) -> None:
        if tangent.value.shape != var.value.shape:
            raise ShapeMismatch(
                f"tangent shape {tangent.value.shape} != value shape {var.value.shape}")
        self._tangents[(key, var.nid)] = tangent.nid

    def tangent_of(self, key: str, nid: int) -> Optional[Var]:
        t = self._tangents.get((key, nid))
        if t is None or t < 0:
            return None
        return Var(self, t)

    def jvp_sweep(self, out: Var, key: str, start: int = 0) -> Optional[Var]:
        """Propagate tangents for direction ``key`` up to ``out``.

        Cached per (key, node): repeated sweeps over an already-visited
        subgraph cost nothing, which makes nested sweeps (second
        derivatives) incremental. ``start`` may skip nodes recorded before
        the differentiation root (their tangents are structurally zero).
        """
        for nid in range(start, out.nid + 1):
            if (key, nid) in self._tangents:
                continue
            n = self.nodes[nid]
            if not n.inputs:
                self._tangents[(key, nid)] = -1
                continue
            in_tans = [self.tangent_of(key, i) for i in n.inputs]
            if all(t is None for t in in_tans):
                self._tangents[(key, nid)] = -1
                continue
            in_vars = [Var(self, i) for i in n.inputs]
            rule = OPS[n.op].jvp
            if rule is None:
                raise TapeError(f"op {n.op} has no forward-mode rule (node {nid})")
            t = rule(self, n, in_vars, in_tans)
            self._tangents[(key, nid)] = t.nid if t is not None else -1
        return self.tangent_of(key, out.nid)

    def fresh_jvp_key(self) -> str:
        self._jvp_counter += 1
        return f"_jvp{self._jvp_counter}"

    # ------------------------------------------------------------------
    # re-evaluation
    # ------------------------------------------------------------------

    def replay(self, bindings: Optional[dict[str, np.ndarray]] = None) -> None:
        """Recompute every node value in topological order.

        ``bindings`` rebinds named leaves; shapes must match the originals.
        """
        bindings = dict(bindings or {})
        seen = set()
        for n in self.nodes:
            if n.op in ("const", "leaf"):
                if n.name is not None and n.name in bindings:
                    v = _asarray(bindings[n.name])
                    if v.shape != n.value.shape:
                        raise ShapeMismatch(
                            f"binding {n.name!r}: shape {v.shape} != {n.value.shape}")
                    n.value = v
                    seen.add(n.name)
                continue
            vals = [self.nodes[i].value for i in n.inputs]
            n.value = OPS[n.op].forward(n.aux, *vals)
        missing = set(bindings) - seen
        if missing:
            raise TapeError(f"unknown leaf names in bindings: {sorted(missing)}")


# ----------------------------------------------------------------------
# op table
# ----------------------------------------------------------------------


@dataclass
class OpSpec:
    forward: Callable
    backward: Callable
    jvp: Optional[Callable] = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _bin_jvp(combine):
    def rule(tape, node, in_vars, in_tans):
        return combine(tape, node, in_vars, in_tans)
    return rule


OPS: dict[str, OpSpec] = {}


def _op(tag, forward, backward, jvp=None):
    OPS[tag] = OpSpec(forward, backward, jvp)


_op("const", lambda aux: None, lambda n, ins: [])
_op("leaf", lambda aux: None, lambda n, ins: [])
# replay never calls forward on const/leaf; placeholders keep the table total
OPS["const"].forward = lambda aux, *a: None
OPS["leaf"].forward = lambda aux, *a: None


def _jvp_add(tape, node, iv, it):
    ta, tb = it
    sh = node.value.shape
    if ta is None:
        return _expand_to(tb, sh)
    if tb is None:
        return _expand_to(ta, sh)
    return add(ta, tb)


def _expand_to(t: Var, shape) -> Var:
    # tangents of broadcast operands broadcast the same way as the values
    if t.value.shape == shape:
        return t
    return mul(t, t.tape.constant(np.ones(shape)))


_op("add",
    lambda aux, a, b: a + b,
    lambda n, ins: [_unbroadcast(n.adjoint, ins[0].value.shape),
                    _unbroadcast(n.adjoint, ins[1].value.shape)],
    _jvp_add)

_op("sub",
    lambda aux, a, b: a - b,
    lambda n, ins: [_unbroadcast(n.adjoint, ins[0].value.shape),
                    _unbroadcast(-n.adjoint, ins[1].value.shape)],
    lambda tape, node, iv, it: (
        _expand_to(it[0], node.value.shape) if it[1] is None else
        mul(_expand_to(it[1], node.value.shape), tape.constant(-1.0)) if it[0] is None else
        sub(it[0], it[1])))


def _jvp_mul(tape, node, iv, it):
    a, b = iv
    ta, tb = it
    parts = []
    if ta is not None:
        parts.append(mul(ta, b))
    if tb is not None:
        parts.append(mul(a, tb))
    out = parts[0] if len(parts) == 1 else add(parts[0], parts[1])
    return _expand_to(out, node.value.shape)


_op("mul",
    lambda aux, a, b: a * b,
    lambda n, ins: [_unbroadcast(n.adjoint * ins[1].value, ins[0].value.shape),
                    _unbroadcast(n.adjoint * ins[0].value, ins[1].value.shape)],
    _jvp_mul)


def _jvp_div(tape, node, iv, it):
    a, b = iv
    ta, tb = it
    out = None
    if ta is not None:
        out = div(ta, b)
    if tb is not None:
        term = mul(Var(tape, node.id), div(tb, b))
        out = sub(out, term) if out is not None else mul(term, tape.constant(-1.0))
    return _expand_to(out, node.value.shape)


_op("div",
    lambda aux, a, b: a / b,
    lambda n, ins: [_unbroadcast(n.adjoint / ins[1].value, ins[0].value.shape),
                    _unbroadcast(-n.adjoint * n.value / ins[1].value, ins[1].value.shape)],
    _jvp_div)

_op("sin",
    lambda aux, a: np.sin(a),
    lambda n, ins: [n.adjoint * np.cos(ins[0].value)],
    lambda tape, node, iv, it: mul(
        tape.helper(iv[0], "cos", lambda: cos(iv[0])), it[0]))

_op("cos",
    lambda aux, a: np.cos(a),
    lambda n, ins: [-n.adjoint * np.sin(ins[0].value)],
    lambda tape, node, iv, it: mul(
        mul(tape.helper(iv[0], "sin", lambda: sin(iv[0])), tape.constant(-1.0)), it[0]))

_op("exp",
    lambda aux, a: np.exp(a),
    lambda n, ins: [n.adjoint * n.value],
    lambda tape, node, iv, it: mul(Var(tape, node.id), it[0]))

_op("log",
    lambda aux, a: np.log(a),
    lambda n, ins: [n.adjoint / ins[0].value],
    lambda tape, node, iv, it: div(it[0], iv[0]))

_op("sqrt",
    lambda aux, a: np.sqrt(a),
    lambda n, ins: [n.adjoint / (2.0 * n.value)],
    lambda tape, node, iv, it: div(it[0], mul(Var(tape, node.id), tape.constant(2.0))))

_op("tanh",
    lambda aux, a: np.tanh(a),
    lambda n, ins: [n.adjoint * (1.0 - n.value ** 2)],
    lambda tape, node, iv, it: mul(
        sub(tape.constant(1.0), mul(Var(tape, node.id), Var(tape, node.id))), it[0]))

# |.| uses the subgradient 0 at the origin (np.sign(0) == 0)
_op("abs",
    lambda aux, a: np.abs(a),
    lambda n, ins: [n.adjoint * np.sign(ins[0].value)],
    lambda tape, node, iv, it: mul(
        tape.helper(iv[0], "sign", lambda: sign(iv[0])), it[0]))

_op("sign",
    lambda aux, a: np.sign(a),
    lambda n, ins: [None],
    lambda tape, node, iv, it: None)


def _sinc(x):
    return np.sinc(x / np.pi)


def _sinc_prime(x):
    small = np.abs(x) < 1e-4
    xs = np.where(small, 1.0, x)
    exact = (xs * np.cos(xs) - np.sin(xs)) / xs ** 2
    series = -x / 3.0 + x ** 3 / 30.0
    return np.where(small, series, exact)


_op("sinc",
    lambda aux, a: _sinc(a),
    lambda n, ins: [n.adjoint * _sinc_prime(ins[0].value)],
    lambda tape, node, iv, it: mul(
        tape.helper(iv[0], "sincp", lambda: tape.apply("sinc_prime", iv[0])), it[0]))

_op("sinc_prime",
    lambda aux, a: _sinc_prime(a),
    lambda n, ins: [None])  # second derivative of sinc is not needed on the tape


def _asinc(w):
    # f(cos t) = t / sin t on the principal branch, smooth continuation at w=1
    w = np.asarray(w)
    if np.any(w < -1.0 + 1e-6):
        raise TapeError("asinc: rotation angle at or beyond pi (principal branch only)")
    wc = np.clip(w, -1.0 + 1e-6, 1.0)
    u = 1.0 - wc
    small = u < 1e-6
    ws = np.where(small, 0.0, wc)
    exact = np.arccos(ws) / np.sqrt(np.maximum(1.0 - ws ** 2, 1e-300))
    series = 1.0 + u / 3.0 + (2.0 / 15.0) * u ** 2
    return np.where(small, series, exact)


def _asinc_prime(w):
    w = np.clip(np.asarray(w), -1.0 + 1e-6, 1.0)
    u = 1.0 - w
    small = u < 1e-6
    ws = np.where(small, 0.0, w)
    exact = (ws * _asinc(ws) - 1.0) / np.maximum(1.0 - ws ** 2, 1e-300)
    series = -1.0 / 3.0 - (4.0 / 15.0) * u
    return np.where(small, series, exact)


_op("asinc",
    lambda aux, a: _asinc(a),
    lambda n, ins: [n.adjoint * _asinc_prime(ins[0].value)],
    lambda tape, node, iv, it: mul(
        tape.helper(iv[0], "asincp", lambda: tape.apply("asinc_prime", iv[0])), it[0]))

_op("asinc_prime",
    lambda aux, a: _asinc_prime(a),
    lambda n, ins: [None])


def _matmul_fwd(aux, a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with ndim >= 2 (use matvec)")
    return a @ b


def _matmul_bwd(n, ins):
    a, b = ins[0].value, ins[1].value
    g = n.adjoint
    ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
    gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
    return [ga, gb]


def _jvp_matmul(tape, node, iv, it):
    a, b = iv
    ta, tb = it
    parts = []
    if ta is not None:
        parts.append(matmul(ta, b))
    if tb is not None:
        parts.append(matmul(a, tb))
    return parts[0] if len(parts) == 1 else add(parts[0], parts[1])


_op("matmul", _matmul_fwd, _matmul_bwd, _jvp_matmul)


def _matvec_fwd(aux, A, x):
    if A.ndim < 2 or x.ndim < 1:
        raise ValueError("matvec needs a matrix and a vector")
    if A.ndim == 2:
        # single GEMM for the common batched-rows case
        return np.matmul(x, A.T)
    return (A @ x[..., None])[..., 0]


def _matvec_bwd(n, ins):
    A, x = ins[0].value, ins[1].value
    g = n.adjoint
    if A.ndim == 2 and x.ndim >= 1:
        g2 = g.reshape(-1, A.shape[0])
        x2 = x.reshape(-1, A.shape[1])
        return [g2.T @ x2, np.matmul(g, A).reshape(x.shape)]
    gA = _unbroadcast(g[..., :, None] * x[..., None, :], A.shape)
    gx = _unbroadcast((np.swapaxes(A, -1, -2) @ g[..., None])[..., 0], x.shape)
    return [gA, gx]


def _jvp_matvec(tape, node, iv, it):
    A, x = iv
    tA, tx = it
    parts = []
    if tA is not None:
        parts.append(matvec(tA, x))
    if tx is not None:
        parts.append(matvec(A, tx))
    return parts[0] if len(parts) == 1 else add(parts[0], parts[1])


_op("matvec", _matvec_fwd, _matvec_bwd, _jvp_matvec)


def _dot_fwd(aux, a, b):
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dot: last axes differ {a.shape} vs {b.shape}")
    return np.sum(a * b, axis=-1)


def _dot_bwd(n, ins):
    a, b = ins[0].value, ins[1].value
    g = n.adjoint[..., None]
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _jvp_dot(tape, node, iv, it):
    a, b = iv
    ta, tb = it
    parts = []
    if ta is not None:
        parts.append(dot(ta, b))
    if tb is not None:
        parts.append(dot(a, tb))
    return parts[0] if len(parts) == 1 else add(parts[0], parts[1])


_op("dot", _dot_fwd, _dot_bwd, _jvp_dot)


def _norm_fwd(aux, a):
    return np.sqrt(np.sum(a * a, axis=-1))


def _norm_bwd(n, ins):
    a = ins[0].value
    nv = n.value[..., None]
    safe = np.where(nv == 0.0, 1.0, nv)
    g = n.adjoint[..., None] * a / safe
    return [np.where(nv == 0.0, 0.0, g)]


def _jvp_norm(tape, node, iv, it):
    # d||a|| = <a, da> / ||a||, with the 0-subgradient at the origin
    nrm = Var(tape, node.id)
    return div(dot(iv[0], it[0]), nrm)


_op("norm", _norm_fwd, _norm_bwd, _jvp_norm)


def _cross_fwd(aux, a, b):
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ValueError("cross requires 3-vectors on the last axis")
    return np.cross(a, b)


def _cross_bwd(n, ins):
    a, b = ins[0].value, ins[1].value
    g = n.adjoint
    return [_unbroadcast(np.cross(b, g), a.shape), _unbroadcast(np.cross(g, a), b.shape)]


def _jvp_cross(tape, node, iv, it):
    a, b = iv
    ta, tb = it
    parts = []
    if ta is not None:
        parts.append(cross(ta, b))
    if tb is not None:
        parts.append(cross(a, tb))
    return parts[0] if len(parts) == 1 else add(parts[0], parts[1])


_op("cross", _cross_fwd, _cross_bwd, _jvp_cross)


def _concat_fwd(aux, *parts):
    return np.concatenate(parts, axis=aux["axis"])


def _concat_bwd(n, ins):
    axis = n.aux["axis"]
    sizes = [i.value.shape[axis] for i in ins]
    return list(np.split(n.adjoint, np.cumsum(sizes)[:-1], axis=axis))


def _jvp_concat(tape, node, iv, it):
    axis = node.aux["axis"]
    parts = []
    for v, t in zip(iv, it):
        if t is None:
            parts.append(tape.constant(np.zeros_like(v.value)))
        else:
            parts.append(t)
    return concat(parts, axis=axis)


_op("concat", _concat_fwd, _concat_bwd, _jvp_concat)


def _slice_fwd(aux, a):
    return a[aux["key"]]


def _slice_bwd(n, ins):
    g = np.zeros_like(ins[0].value)
    g[n.aux["key"]] += n.adjoint
    return [g]


_op("slice", _slice_fwd, _slice_bwd,
    lambda tape, node, iv, it: slice_(it[0], node.aux["key"]))


def _sum_fwd(aux, a):
    return np.sum(a, axis=aux["axis"], keepdims=aux["keepdims"])


def _sum_bwd(n, ins):
    a = ins[0].value
    g = n.adjoint
    axis = n.aux["axis"]
    if axis is not None and not n.aux["keepdims"]:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(ax % a.ndim for ax in axes):
            g = np.expand_dims(g, ax)
    return [np.broadcast_to(g, a.shape).copy()]


_op("sum", _sum_fwd, _sum_bwd,
    lambda tape, node, iv, it: sum_(it[0], axis=node.aux["axis"],
                                    keepdims=node.aux["keepdims"]))

_op("reshape",
    lambda aux, a: a.reshape(aux["shape"]),
    lambda n, ins: [n.adjoint.reshape(ins[0].value.shape)],
    lambda tape, node, iv, it: reshape(it[0], node.aux["shape"]))

_op("transpose",
    lambda aux, a: np.swapaxes(a, -1, -2).copy(),
    lambda n, ins: [np.swapaxes(n.adjoint, -1, -2)],
    lambda tape, node, iv, it: transpose(it[0]))


# -- symmetric 4x4 minimum-eigenvector layer (rotation head) -----------

_SYM4_IDX = [(0, 0), (0, 1), (0, 2), (0, 3), (1, 1), (1, 2), (1, 3), (2, 2), (2, 3), (3, 3)]


def sym4_from_vec10(theta: np.ndarray) -> np.ndarray:
    """Assemble symmetric 4x4 matrices from 10-vectors, batched."""
    theta = np.asarray(theta, dtype=np.float64)
    A = np.zeros(theta.shape[:-1] + (4, 4))
    for k, (i, j) in enumerate(_SYM4_IDX):
        A[..., i, j] = theta[..., k]
        A[..., j, i] = theta[..., k]
    return A


_JACOBI_PAIRS = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def jacobi_eigh4(A: np.ndarray, tol: float = 1e-12, max_sweeps: int = 50):
    """Batched cyclic Jacobi eigensolver for symmetric 4x4 matrices.

    Returns (eigenvalues ascending, eigenvectors as columns).
    """
    A = np.array(A, dtype=np.float64)
    single = A.ndim == 2
    if single:
        A = A[None]
    n = A.shape[0]
    V = np.broadcast_to(np.eye(4), (n, 4, 4)).copy()
    scale = np.maximum(np.abs(A).max(axis=(-1, -2)), 1e-300)
    for _ in range(max_sweeps):
        off = 0.0
        for p, q in _JACOBI_PAIRS:
            off = max(off, np.max(np.abs(A[:, p, q]) / scale))
        if off < tol:
            break
        for p, q in _JACOBI_PAIRS:
            apq = A[:, p, q]
            active = np.abs(apq) > tol * scale
            if not np.any(active):
                continue
            app, aqq = A[:, p, p], A[:, q, q]
            safe_apq = np.where(active, apq, 1.0)
            theta = (aqq - app) / (2.0 * safe_apq)
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(theta == 0.0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            cp, sp = c[:, None], s[:, None]
            Ap, Aq = A[:, p, :].copy(), A[:, q, :].copy()
            A[:, p, :] = cp * Ap - sp * Aq
            A[:, q, :] = sp * Ap + cp * Aq
            Ap, Aq = A[:, :, p].copy(), A[:, :, q].copy()
            A[:, :, p] = cp * Ap - sp * Aq
            A[:, :, q] = sp * Ap + cp * Aq
            Vp, Vq = V[:, :, p].copy(), V[:, :, q].copy()
            V[:, :, p] = cp * Vp - sp * Vq
            V[:, :, q] = sp * Vp + cp * Vq
    evals = np.einsum("nii->ni", A).copy()
    order = np.argsort(evals, axis=-1)
    evals = np.take_along_axis(evals, order, axis=-1)
    V = np.take_along_axis(V, order[:, None, :], axis=-1)
    if single:
        return evals[0], V[0]
    return evals, V


def quat_sign_fix(q: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Force the first component with magnitude > eps to be non-negative."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    qb = q[None] if single else q
    big = np.abs(qb) > eps
    first = np.argmax(big, axis=-1)
    lead = np.take_along_axis(qb, first[..., None], axis=-1)[..., 0]
    out = qb * np.where(lead < 0.0, -1.0, 1.0)[..., None]
    return out[0] if single else out


def _sym4_min_eig_fwd(aux, theta):
    A = sym4_from_vec10(theta)
    flatA = A.reshape(-1, 4, 4)
    evals, evecs = jacobi_eigh4(flatA)
    gap = evals[:, 1] - evals[:, 0]
    if np.any(gap < 1e-10):
        bad = int(np.argmin(gap))
        raise DegenerateEigenpair(
            f"repeated minimum eigenvalue (gap {gap[bad]:.3e}) in rotation head")
    q = quat_sign_fix(evecs[:, :, 0])
    aux["evals"] = evals
    aux["evecs"] = evecs
    aux["q"] = q
    return q.reshape(theta.shape[:-1] + (4,))


def _sym4_min_eig_bwd(n, ins):
    theta = ins[0].value
    evals, evecs, q = n.aux["evals"], n.aux["evecs"], n.aux["q"]
    gap = evals[:, 1] - evals[:, 0]
    if np.any(gap < 1e-8):
        bad = int(np.argmin(gap))
        raise DegenerateEigenpair(
            f"rotation head gradient undefined: eigen-gap {gap[bad]:.3e} < 1e-8")
    g = n.adjoint.reshape(-1, 4)
    # dq = (lam1 I - A)^+ dA q*; pinv through the remaining eigenpairs
    inv = np.zeros_like(evals)
    inv[:, 1:] = 1.0 / (evals[:, :1] - evals[:, 1:])
    # P g = V diag(inv) V^T g
    Pg = np.einsum("nij,nj,nkj,nk->ni", evecs, inv, evecs, g)
    G = Pg[:, :, None] * q[:, None, :]
    gt = np.empty_like(theta.reshape(-1, 10))
    for k, (i, j) in enumerate(_SYM4_IDX):
        if i == j:
            gt[:, k] = G[:, i, j]
        else:
            gt[:, k] = G[:, i, j] + G[:, j, i]
    return [gt.reshape(theta.shape)]


_op("sym4_min_eig", _sym4_min_eig_fwd, _sym4_min_eig_bwd)


# ----------------------------------------------------------------------
# functional wrappers
# ----------------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    return a.tape.apply("add", a, b)


def sub(a: Var, b: Var) -> Var:
    return a.tape.apply("sub", a, b)


def mul(a: Var, b: Var) -> Var:
    return a.tape.apply("mul", a, b)


def div(a: Var, b: Var) -> Var:
    return a.tape.apply("div", a, b)


def sin(a: Var) -> Var:
    return a.tape.apply("sin", a)


def cos(a: Var) -> Var:
    return a.tape.apply("cos", a)


def exp(a: Var) -> Var:
    return a.tape.apply("exp", a)


def log(a: Var) -> Var:
    return a.tape.apply("log", a)


def sqrt(a: Var) -> Var:
    return a.tape.apply("sqrt", a)


def tanh(a: Var) -> Var:
    return a.tape.apply("tanh", a)


def abs_(a: Var) -> Var:
    return a.tape.apply("abs", a)


def sign(a: Var) -> Var:
    return a.tape.apply("sign", a)


def sinc(a: Var) -> Var:
    return a.tape.apply("sinc", a)


def asinc(a: Var) -> Var:
    return a.tape.apply("asinc", a)


def matmul(a: Var, b: Var) -> Var:
    return a.tape.apply("matmul", a, b)


def matvec(A: Var, x: Var) -> Var:
    return A.tape.apply("matvec", A, x)


def dot(a: Var, b: Var) -> Var:
    return a.tape.apply("dot", a, b)


def norm(a: Var) -> Var:
    return a.tape.apply("norm", a)


def cross(a: Var, b: Var) -> Var:
    return a.tape.apply("cross", a, b)


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    return parts[0].tape.apply("concat", *parts, aux={"axis": axis})


def slice_(a: Var, key) -> Var:
    return a.tape.apply("slice", a, aux={"key": key})


def sum_(a: Var, axis=None, keepdims: bool = False) -> Var:
    return a.tape.apply("sum", a, aux={"axis": axis, "keepdims": keepdims})


def reshape(a: Var, shape) -> Var:
    return a.tape.apply("reshape", a, aux={"shape": tuple(shape)})


def transpose(a: Var) -> Var:
    """Swap the last two axes."""
    return a.tape.apply("transpose", a)


def sym4_min_eig(theta: Var) -> Var:
    return theta.tape.apply("sym4_min_eig", theta, aux={})


# ----------------------------------------------------------------------
# public entry points
# ----------------------------------------------------------------------


def forward_eval(f: Callable[[Tape, dict[str, Var]], dict[str, Var]],
                 inputs: dict[str, np.ndarray],
                 check_finite: bool = False) -> dict[str, np.ndarray]:
    """Evaluate a graph-builder once and return its named outputs."""
    tape = Tape(check_finite=check_finite)
    leaves = {k: tape.leaf(v, name=k) for k, v in inputs.items()}
    outs = f(tape, leaves)
    return {k: v.value.copy() for k, v in outs.items()}


def gradient(f: Callable[[Tape, Var], Var], point: np.ndarray) -> np.ndarray:
    """Reverse-mode gradient of a scalar-valued taped function."""
    tape = Tape()
    x = tape.leaf(point, name="x")
    y = f(tape, x)
    if y.value.ndim != 0 and y.value.size != 1:
        raise TapeError("gradient requires a scalar-valued function")
    tape.backward(y)
    return tape.grad(x)


def jvp(f: Callable[[Tape, Var], Var], point: np.ndarray,
        direction: np.ndarray, check_finite: bool = True) -> np.ndarray:
    """Directional derivative J_f(point) @ direction via taped forward mode."""
    tape = Tape(check_finite=check_finite)
    x = tape.leaf(point, name="x")
    y = f(tape, x)
    key = tape.fresh_jvp_key()
    tape.set_tangent(key, x, tape.constant(direction))
    t = tape.jvp_sweep(y, key)
    return np.zeros_like(y.value) if t is None else t.value.copy()


def check_gradient(f: Callable[[Tape, Var], Var], point: np.ndarray,
                   tolerance: float = 1e-5, h: float = 1e-6) -> dict:
    """Compare reverse-mode gradient with central differences.

    Relative error uses a floor at 1e-6 of the gradient's overall scale so
    that near-zero components are compared absolutely. Report-only: never
    raises on mismatch.
    """
    point = _asarray(point)
    tape = Tape()
    x = tape.leaf(point, name="x")
    y = f(tape, x)
    if y.value.size != 1:
        raise TapeError("check_gradient requires a scalar-valued function")
    tape.backward(y)
    g = tape.grad(x).copy()

    fd = np.zeros_like(point)
    flat = point.ravel()
    for i in range(flat.size):
        p = flat.copy()
        p[i] = flat[i] + h
        tape.replay({"x": p.reshape(point.shape)})
        up = float(np.sum(y.value))
        p[i] = flat[i] - h
        tape.replay({"x": p.reshape(point.shape)})
        dn = float(np.sum(y.value))
        fd.ravel()[i] = (up - dn) / (2.0 * h)
    tape.replay({"x": point})

    scale = max(np.max(np.abs(g)), np.max(np.abs(fd)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6 * scale)
    rel = np.abs(g - fd) / denom
    max_rel = float(np.max(rel)) if rel.size else 0.0
    return {
        "max_rel_error": max_rel,
        "passed": max_rel < tolerance,
        "grad": g,
        "fd": fd,
    }
