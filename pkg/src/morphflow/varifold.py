"""Discrete varifold surfaces, Gaussian kernel metrics and compression.

A surface is a weighted oriented point set (positions, unit normals, weights).
The inner product between two surfaces is the double kernel sum of eq-style
Gaussian factors over positions and normals; the squared distance follows by
polarisation. Compression selects control points by ridge leverage score
sampling and re-solves their weights so the compressed measure reproduces the
full one against the kernel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var


class VarifoldError(Exception):
    pass


@dataclass
class VarifoldSurface:
    points: np.ndarray    # (n, 3)
    normals: np.ndarray   # (n, 3), unit
    weights: np.ndarray   # (n,), areas for raw surfaces, any real if compressed

    def __init__(self, points, normals, weights, compressed: bool = False):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self.normals = np.asarray(normals, dtype=float).reshape(-1, 3)
        self.weights = np.asarray(weights, dtype=float).reshape(-1)
        self.compressed = compressed
        n = len(self.points)
        if len(self.normals) != n or len(self.weights) != n:
            raise VarifoldError("points, normals and weights lengths differ")
        if n:
            norms = np.linalg.norm(self.normals, axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-10:
                raise VarifoldError("normals must be unit length (1e-10)")
            if not compressed and np.any(self.weights <= 0.0):
                raise VarifoldError("raw surface weights must be positive")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "VarifoldSurface":
        return VarifoldSurface(self.points[idx], self.normals[idx],
                               self.weights[idx], compressed=self.compressed)


@dataclass
class KernelConfig:
    ell_x: float
    ell_n: float

    def __post_init__(self):
        if self.ell_x <= 0 or self.ell_n <= 0:
            raise VarifoldError("kernel lengthscales must be positive")


@dataclass
class CompressionConfig:
    m: int
    lam: float = 1.0
    seed: int = 0
    jitter: Optional[float] = None

    def __post_init__(self):
        if self.m < 1:
            raise VarifoldError("target size m must be >= 1")
        if self.lam <= 0:
            raise VarifoldError("ridge regulariser must be positive")


def gaussian_kernel(u, v, ell: float) -> float:
    """exp(-||u - v||^2 / (2 ell^2)); 1 at coincidence."""
    if ell <= 0:
        raise VarifoldError("lengthscale must be positive")
    d = np.asarray(u, dtype=float) - np.asarray(v, dtype=float)
    return float(np.exp(-float(d @ d) / (2.0 * ell * ell)))


def joint_kernel(X: VarifoldSurface, Y: VarifoldSurface, k: KernelConfig) -> np.ndarray:
    """(n, m) matrix of kappa_x(x_i, y_j) * kappa_n(n_i, m_j)."""
    dx = X.points[:, None, :] - Y.points[None, :, :]
    dn = X.normals[:, None, :] - Y.normals[None, :, :]
    sx = np.einsum("nmk,nmk->nm", dx, dx)
    sn = np.einsum("nmk,nmk->nm", dn, dn)
    return np.exp(-sx / (2.0 * k.ell_x ** 2) - sn / (2.0 * k.ell_n ** 2))


def inner_product(X: VarifoldSurface, Y: VarifoldSurface, k: KernelConfig) -> float:
    """Discrete double sum of the kernel against both weight vectors."""
    if len(X) == 0 or len(Y) == 0:
        raise VarifoldError("inner product of an empty surface")
    K = joint_kernel(X, Y, k)
    # np.sum uses pairwise accumulation, keeping ~1e5-term sums near 1e-15
    return float(np.sum(K * (X.weights[:, None] * Y.weights[None, :])))


def distance(X: VarifoldSurface, Y: VarifoldSurface, k: KernelConfig) -> float:
    """<X,X> - 2 <X,Y> + <Y,Y>, clamped at zero against round-off."""
    d = inner_product(X, X, k) - 2.0 * inner_product(X, Y, k) + inner_product(Y, Y, k)
    return max(d, 0.0)


# ----------------------------------------------------------------------
# ridge leverage score compression
# ----------------------------------------------------------------------

def rls_scores(Y: VarifoldSurface, k: KernelConfig, cfg: CompressionConfig) -> np.ndarray:
    """Per-point leverage scores, each computed within its own random batch."""
    n = len(Y)
    if n < 1:
        raise VarifoldError("cannot score an empty surface")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    bs = max(1, int(np.floor(np.sqrt(n))))
    b = max(1, n // bs)
    scores = np.zeros(n)
    for batch in np.array_split(perm, b):
        sub = Y.subset(batch)
        K = joint_kernel(sub, sub, k)
        scores[batch] = _batch_scores(K, cfg.lam)
    return scores


def _batch_scores(K: np.ndarray, lam: float) -> np.ndarray:
    # diag(K (K + lam I)^-1) = 1 - lam diag((K + lam I)^-1)
    M = K + lam * np.eye(len(K))
    try:
        inv = np.linalg.solve(M, np.eye(len(K)))
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(M) / len(M)
        try:
            inv = np.linalg.solve(M + jitter * np.eye(len(M)), np.eye(len(M)))
        except np.linalg.LinAlgError as e:
            raise VarifoldError(f"leverage-score solve failed twice: {e}") from e
    return 1.0 - lam * np.diag(inv)


def rls_sample(scores: np.ndarray, m: int, seed: int) -> np.ndarray:
    """m independent index draws with probability proportional to the scores."""
    scores = np.asarray(scores, dtype=float)
    total = scores.sum()
    if total <= 0:
        raise VarifoldError("scores must have positive sum")
    rng = np.random.default_rng(seed)
    return rng.choice(len(scores), size=m, replace=True, p=scores / total)


def compression_weights(Y: VarifoldSurface, selected: np.ndarray, k: KernelConfig,
                        cfg: CompressionConfig) -> np.ndarray:
    """Solve (K_CC + jitter I) beta = K_CY s_Y for the control-point weights."""
    selected = np.unique(np.asarray(selected, dtype=int))
    if len(selected) == 0:
        raise VarifoldError("empty control set")
    C = Y.subset(selected)
    K_cc = joint_kernel(C, C, k)
    rhs = joint_kernel(C, Y, k) @ Y.weights
    jitter = cfg.jitter
    if jitter is None:
        jitter = 1e-8 * np.trace(K_cc) / len(selected)
    M = K_cc + jitter * np.eye(len(selected))
    beta = np.linalg.solve(M, rhs)
    resid = np.linalg.norm(M @ beta - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if not np.all(np.isfinite(beta)) or resid > 1e-6:
        cond = np.linalg.cond(K_cc)
        raise VarifoldError(
            f"control kernel too ill-conditioned (cond ~ {cond:.3e}, residual {resid:.3e})")
    return beta


def compress(Y: VarifoldSurface, k: KernelConfig, cfg: CompressionConfig
             ) -> VarifoldSurface:
    """Score, sample and re-weight; output has at most cfg.m control points."""
    if cfg.m > len(Y):
        raise VarifoldError(f"m = {cfg.m} exceeds surface size {len(Y)}")
    scores = rls_scores(Y, k, cfg)
    drawn = rls_sample(scores, cfg.m, cfg.seed)
    selected = np.unique(drawn)
    beta = compression_weights(Y, selected, k, cfg)
    return VarifoldSurface(Y.points[selected], Y.normals[selected], beta,
                           compressed=True)


# ----------------------------------------------------------------------
# taped inner product (for losses)
# ----------------------------------------------------------------------

def _pairwise_sq_t(tape: Tape, a: Var, b: Var) -> Var:
    """||a_i - b_j||^2 as an (n, m) tape value, via the norm expansion."""
    aa = ad.sum_(ad.mul(a, a), axis=1)
    bb = ad.sum_(ad.mul(b, b), axis=1)
    cross = ad.matmul(a, ad.transpose(b))
    n, m = aa.value.shape[0], bb.value.shape[0]
    aa_col = ad.reshape(aa, (n, 1))
    bb_row = ad.reshape(bb, (1, m))
    return ad.sub(ad.add(aa_col, bb_row), ad.mul(cross, tape.constant(2.0)))


def inner_product_t(tape: Tape, px: Var, nx: Var, wx: Var,
                    py: Var, ny: Var, wy: Var, k: KernelConfig) -> Var:
    sx = _pairwise_sq_t(tape, px, py)
    sn = _pairwise_sq_t(tape, nx, ny)
    expo = ad.add(ad.mul(sx, tape.constant(-0.5 / k.ell_x ** 2)),
                  ad.mul(sn, tape.constant(-0.5 / k.ell_n ** 2)))
    K = ad.exp(expo)
    n, m = px.value.shape[0], py.value.shape[0]
    w_outer = ad.mul(ad.reshape(wx, (n, 1)), ad.reshape(wy, (1, m)))
    return ad.sum_(ad.mul(K, w_outer))


# ----------------------------------------------------------------------
# compressed varifold file
# ----------------------------------------------------------------------

def save_varifold(path, surface: VarifoldSurface, k: KernelConfig,
                  cfg: Optional[CompressionConfig] = None) -> None:
    with open(path, "w") as f:
        f.write("varifold 1\n")
        f.write(f"count {len(surface)}\n")
        f.write(f"ell_x {k.ell_x:.17g}\n")
        f.write(f"ell_n {k.ell_n:.17g}\n")
        f.write(f"lambda {cfg.lam if cfg else 0:.17g}\n")
        f.write(f"seed {cfg.seed if cfg else 0}\n")
        for p, nrm, w in zip(surface.points, surface.normals, surface.weights):
            f.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} "
                    f"{nrm[0]:.17g} {nrm[1]:.17g} {nrm[2]:.17g} {w:.17g}\n")


def load_varifold(path) -> tuple[VarifoldSurface, KernelConfig, CompressionConfig]:
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0].split() != ["varifold", "1"]:
        raise VarifoldError(f"{path}: not a varifold file (missing header)")
    meta = {}
    i = 1
    while i < len(lines) and lines[i].split()[0] in ("count", "ell_x", "ell_n",
                                                     "lambda", "seed"):
        key, val = lines[i].split()
        meta[key] = val
        i += 1
    count = int(meta["count"])
    rows = [list(map(float, ln.split())) for ln in lines[i:]]
    if len(rows) != count or any(len(r) != 7 for r in rows):
        raise VarifoldError(f"{path}: expected {count} rows of 7 floats")
    arr = np.asarray(rows)
    surface = VarifoldSurface(arr[:, :3], arr[:, 3:6], arr[:, 6], compressed=True)
    k = KernelConfig(float(meta["ell_x"]), float(meta["ell_n"]))
    cfg = CompressionConfig(max(1, count), lam=max(float(meta["lambda"]), 1e-300),
                            seed=int(meta["seed"]))
    return surface, k, cfg
