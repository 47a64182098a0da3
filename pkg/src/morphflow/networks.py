"""Sine-activated potential network and the rotation-predicting network.

The potential network maps (x, y, z, t) to a 3-vector whose curl defines the
velocity field; it stacks sine layers with one variable-periodic layer before
a linear head. The rotation network maps (x, y, z, t) through tanh layers to
a 10-vector that parameterises a symmetric 4x4 matrix; the unit eigenvector
of its smallest eigenvalue is the predicted quaternion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var, DegenerateEigenpair

SIREN = "siren"
FINER = "finer"
LINEAR = "linear"
TANH = "tanh"

_KINDS = (SIREN, FINER, LINEAR, TANH)


@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    kind: str


@dataclass
class MlpParams:
    layers: list[Layer]
    omega0: float = 4.0

    def __post_init__(self):
        if self.omega0 <= 0:
            raise ValueError("omega0 must be positive")
        for i, lyr in enumerate(self.layers):
            if lyr.kind not in _KINDS:
                raise ValueError(f"unknown layer kind {lyr.kind!r}")
            if lyr.W.shape[0] != lyr.b.shape[0]:
                raise ValueError(f"layer {i}: bias length != output dim")
            if i > 0 and lyr.W.shape[1] != self.layers[i - 1].W.shape[0]:
                raise ValueError(f"layer {i}: input dim does not chain")

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].W.shape[1]] + [l.W.shape[0] for l in self.layers]

    def copy(self) -> "MlpParams":
        return MlpParams([Layer(l.W.copy(), l.b.copy(), l.kind) for l in self.layers],
                         self.omega0)


# ----------------------------------------------------------------------
# single-layer formulas
# ----------------------------------------------------------------------

def siren_layer(z: np.ndarray, W: np.ndarray, b: np.ndarray, omega0: float) -> np.ndarray:
    """sin(omega0 * (W z + b)) for a batch of row vectors."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    u = z @ W.T + b
    return np.sin(omega0 * u)


def finer_layer(z: np.ndarray, W: np.ndarray, b: np.ndarray, omega0: float) -> np.ndarray:
    """Variable-periodic layer: sin(omega0 * (|u| + 1) * u), u = W z + b."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    u = z @ W.T + b
    return np.sin(omega0 * (np.abs(u) + 1.0) * u)


def _apply_layer_np(z, lyr: Layer, omega0: float):
    u = z @ lyr.W.T + lyr.b
    if lyr.kind == SIREN:
        return np.sin(omega0 * u)
    if lyr.kind == FINER:
        return np.sin(omega0 * (np.abs(u) + 1.0) * u)
    if lyr.kind == TANH:
        return np.tanh(u)
    return u


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Plain-numpy forward pass over a batch of row vectors."""
    z = np.atleast_2d(np.asarray(x, dtype=float))
    for lyr in params.layers:
        z = _apply_layer_np(z, lyr, params.omega0)
    return z


# ----------------------------------------------------------------------
# initialisation
# ----------------------------------------------------------------------

def siren_init(dims: Sequence[int], omega0: float = 4.0, seed: int = 0,
               kinds: Optional[Sequence[str]] = None,
               head_gain: float = 1.0) -> MlpParams:
    """Frequency-aware uniform init.

    First layer ~ U(-1/fan_in, 1/fan_in); later layers
    ~ U(-sqrt(6/fan_in)/omega0, +...); biases zero. ``head_gain`` shrinks a
    trailing linear layer so a fresh model starts close to the identity flow.
    """
    dims = list(dims)
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    if kinds is None:
        kinds = [SIREN] * (len(dims) - 2) + [LINEAR]
    if len(kinds) != len(dims) - 1:
        raise ValueError("one kind per layer required")
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        if i == 0:
            bound = 1.0 / fan_in
        else:
            bound = np.sqrt(6.0 / fan_in) / omega0
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        if kinds[i] == LINEAR and i == len(dims) - 2:
            W = W * head_gain
        b = np.zeros(fan_out)
        layers.append(Layer(W, b, kinds[i]))
    return MlpParams(layers, omega0)


def arcnet(widths: Sequence[int] = (256, 256, 256, 256, 128), omega0: float = 4.0,
           seed: int = 0, head_gain: float = 1.0) -> MlpParams:
    """Potential network: sine layers, one variable-periodic layer, linear head.

    Input (x, y, z, t), output a 3-vector potential.
    """
    dims = [4] + list(widths) + [3]
    kinds = [SIREN] * (len(widths) - 1) + [FINER, LINEAR]
    return siren_init(dims, omega0=omega0, seed=seed, kinds=kinds, head_gain=head_gain)


def qnet(widths: Sequence[int] = (128, 128, 128), seed: int = 0,
         scale: float = 1e-2) -> MlpParams:
    """Rotation network: tanh layers to a 10-vector (symmetric 4x4 entries)."""
    dims = [4] + list(widths) + [10]
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(len(dims) - 1):
        bound = np.sqrt(6.0 / (dims[i] + dims[i + 1]))
        W = rng.uniform(-bound, bound, size=(dims[i + 1], dims[i]))
        b = np.zeros(dims[i + 1])
        layers.append(Layer(W, b, TANH if i < len(dims) - 2 else LINEAR))
    # bias the head towards -I so the identity quaternion starts dominant
    layers[-1].W *= scale
    layers[-1].b = np.array([-1.0, 0, 0, 0, 1.0, 0, 0, 1.0, 0, 1.0])
    return MlpParams(layers, omega0=1.0)


def arcnet_forward(params: MlpParams, x: np.ndarray, t) -> np.ndarray:
    """Potential a(x, t) for positions x (N,3) and scalar or (N,) time."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if params.layers[0].W.shape[1] != 4:
        raise ValueError("potential network must take a 4-d (x, y, z, t) input")
    tcol = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))[:, None]
    return mlp_forward(params, np.concatenate([x, tcol], axis=1))


# ----------------------------------------------------------------------
# taped forward pass
# ----------------------------------------------------------------------

@dataclass
class BoundMlp:
    layers: list[tuple[Var, Var, str]]
    omega0: float


def bind_mlp(tape: Tape, params: MlpParams, trainable: bool = True,
             prefix: str = "mlp") -> BoundMlp:
    """Create tape nodes for every weight/bias of ``params``."""
    bound = []
    for i, lyr in enumerate(params.layers):
        if trainable:
            Wv = tape.leaf(lyr.W, name=f"{prefix}.W{i}")
            bv = tape.leaf(lyr.b, name=f"{prefix}.b{i}")
        else:
            Wv = tape.constant(lyr.W)
            bv = tape.constant(lyr.b)
        bound.append((Wv, bv, lyr.kind))
    return BoundMlp(bound, params.omega0)


def mlp_on_tape(tape: Tape, net: BoundMlp, z: Var) -> Var:
    om = tape.constant(net.omega0)
    for Wv, bv, kind in net.layers:
        if kind == SIREN:
            # fold the frequency into the (parameter-sized) weights so the
            # batch-sized scaling op disappears from every tangent sweep
            u = ad.add(ad.matvec(ad.mul(om, Wv), z), ad.mul(om, bv))
            z = ad.sin(u)
            continue
        u = ad.add(ad.matvec(Wv, z), bv)
        if kind == FINER:
            alpha = ad.add(ad.abs_(u), tape.constant(1.0))
            z = ad.sin(ad.mul(om, ad.mul(alpha, u)))
        elif kind == TANH:
            z = ad.tanh(u)
        else:
            z = u
    return z


def input_with_time(tape: Tape, x: Var, t: float) -> Var:
    n = x.shape[0]
    tcol = tape.constant(np.full((n, 1), float(t)))
    return ad.concat([x, tcol], axis=1)


# ----------------------------------------------------------------------
# rotation head
# ----------------------------------------------------------------------

def qnet_forward(params: MlpParams, x: np.ndarray, t) -> np.ndarray:
    """Unit quaternion(s) from the rotation network, sign-normalised.

    Raises DegenerateEigenpair when the minimum eigenvalue of the symmetric
    output matrix is repeated to within 1e-10.
    """
    theta = arcnet_like_forward(params, x, t)
    A = ad.sym4_from_vec10(theta)
    evals, evecs = ad.jacobi_eigh4(A.reshape(-1, 4, 4))
    gap = evals[:, 1] - evals[:, 0]
    if np.any(gap < 1e-10):
        raise DegenerateEigenpair(
            f"repeated minimum eigenvalue (gap {float(gap.min()):.3e})")
    q = ad.quat_sign_fix(evecs[:, :, 0])
    return q.reshape(theta.shape[:-1] + (4,))


def arcnet_like_forward(params: MlpParams, x: np.ndarray, t) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    tcol = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))[:, None]
    return mlp_forward(params, np.concatenate([x, tcol], axis=1))


def qnet_on_tape(tape: Tape, net: BoundMlp, x: Var, t: float) -> Var:
    theta = mlp_on_tape(tape, net, input_with_time(tape, x, t))
    return ad.sym4_min_eig(theta)


def min_eig_quat(A: np.ndarray):
    """(lambda_1, q*) of a symmetric 4x4 matrix via the Jacobi solver."""
    evals, evecs = ad.jacobi_eigh4(np.asarray(A, dtype=float))
    if evals[1] - evals[0] < 1e-10:
        raise DegenerateEigenpair(
            f"repeated minimum eigenvalue (gap {evals[1] - evals[0]:.3e})")
    return evals[0], ad.quat_sign_fix(evecs[:, 0])


def qnet_backward(A: np.ndarray, q_star: np.ndarray,
                  upstream: np.ndarray) -> np.ndarray:
    """Chain an upstream d(loss)/dq through the min-eigenvector layer.

    Returns d(loss)/dA as a 4x4 array where symmetric off-diagonal entries
    carry the combined sensitivity (grad wrt A[i,j] equals grad wrt A[j,i]).
    """
    A = np.asarray(A, dtype=float)
    evals, evecs = ad.jacobi_eigh4(A)
    gap = evals[1] - evals[0]
    if gap < 1e-8:
        raise DegenerateEigenpair(f"eigen-gap {gap:.3e} < 1e-8")
    inv = np.zeros(4)
    inv[1:] = 1.0 / (evals[0] - evals[1:])
    Pg = evecs @ (inv * (evecs.T @ np.asarray(upstream, dtype=float)))
    G = np.outer(Pg, q_star)
    out = G + G.T
    np.fill_diagonal(out, np.diag(G))
    return out


# ----------------------------------------------------------------------
# checkpoint container
# ----------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def mlp_to_dict(params: MlpParams) -> dict:
    return {
        "omega0": params.omega0,
        "layers": [
            {"kind": l.kind, "W": l.W.tolist(), "b": l.b.tolist()}
            for l in params.layers
        ],
    }


def mlp_from_dict(d: dict) -> MlpParams:
    layers = [Layer(np.asarray(l["W"], dtype=float), np.asarray(l["b"], dtype=float),
                    l["kind"]) for l in d["layers"]]
    return MlpParams(layers, float(d["omega0"]))


def save_checkpoint(path, payload: dict) -> None:
    """Write a key-value checkpoint (JSON keeps float64 round-trips exact)."""
    doc = {"format_version": CHECKPOINT_VERSION}
    doc.update(payload)
    with open(path, "w") as f:
        json.dump(doc, f)


def load_checkpoint(path) -> dict:
    with open(path) as f:
        doc = json.load(f)
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    return doc
