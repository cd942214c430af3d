"""Dense single-device attention oracle.

This is the trusted reference the distributed paths are checked against:
a materialized score matrix, a numerically shifted softmax, the analytic
backward pass, and a central finite-difference gradient checker.

Operation order here deliberately matches the streaming kernels (queries are
scaled before the score product, outputs are normalized after the value
product), so the single-device specialization of the distributed path is
bitwise identical to this oracle rather than merely close.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MaskError, NonFiniteError, ShapeError
from .linalg import Matrix, Vector
from .masking import BlockMask


@dataclass(frozen=True)
class AttnProblem:
    """One self-attention instance: N x d queries, keys and values."""

    Q: Matrix
    K: Matrix
    V: Matrix
    scale: float
    mask: BlockMask | None = None

    def __post_init__(self):
        n, d = self.Q.rows, self.Q.cols
        for name, m in (("K", self.K), ("V", self.V)):
            if (m.rows, m.cols) != (n, d):
                raise ShapeError(f"{name} is {m.rows}x{m.cols}, expected {n}x{d}")
            if m.dtype != self.Q.dtype:
                raise ShapeError(f"{name} dtype {m.dtype} differs from Q dtype {self.Q.dtype}")
        if n < 1 or d < 1:
            raise ShapeError(f"degenerate problem size {n}x{d}")
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise ShapeError(f"scale must be finite and positive, got {self.scale}")
        if self.mask is not None:
            self.mask.validate(n, n)

    @property
    def n(self) -> int:
        return self.Q.rows

    @property
    def d(self) -> int:
        return self.Q.cols


@dataclass(frozen=True)
class AttnOutput:
    O: Matrix
    lse: Vector


def _masked_scores(q_arr: np.ndarray, k_arr: np.ndarray, scale: float,
                   mask: BlockMask | None, n: int) -> np.ndarray:
    """scale * Q @ K.T with masked entries set to -inf (queries scaled first)."""
    s = (q_arr * q_arr.dtype.type(scale)) @ k_arr.T
    if mask is not None and not mask.is_trivial():
        allowed = mask.allowed(0, q_arr.shape[0], 0, k_arr.shape[0], n, n)
        s[~allowed] = -np.inf
    return s


def _forward_arrays(q_arr: np.ndarray, k_arr: np.ndarray, v_arr: np.ndarray,
                    scale: float, mask: BlockMask | None) -> tuple[np.ndarray, np.ndarray]:
    n = q_arr.shape[0]
    s = _masked_scores(q_arr, k_arr, scale, mask, n)
    m = s.max(axis=1)
    m_eff = np.where(np.isneginf(m), 0.0, m).astype(s.dtype)
    p = np.exp(s - m_eff[:, None])
    l = p.sum(axis=1)
    if np.any(l == 0):
        raise MaskError("softmax row with no unmasked entries")
    o = (p @ v_arr) / l[:, None]
    lse = m + np.log(l)
    if not (np.isfinite(o).all() and np.isfinite(lse).all()):
        raise NonFiniteError("dense forward produced a non-finite value")
    return o, lse


def forward_dense(p: AttnProblem) -> AttnOutput:
    """Materialized-score attention: S = scale QK^T, P = softmax(S), O = PV.

    Also returns the per-row log-sum-exp of the scores.
    """
    o, lse = _forward_arrays(p.Q.array, p.K.array, p.V.array, p.scale, p.mask)
    return AttnOutput(O=Matrix.from_array(o), lse=Vector(lse, dtype=o.dtype))


def backward_dense(p: AttnProblem, dO: Matrix) -> tuple[Matrix, Matrix, Matrix]:
    """Analytic gradients (dQ, dK, dV) of L = sum(dO * O)."""
    if (dO.rows, dO.cols) != (p.n, p.d):
        raise ShapeError(f"dO is {dO.rows}x{dO.cols}, expected {p.n}x{p.d}")
    if dO.dtype != p.Q.dtype:
        raise ShapeError(f"dO dtype {dO.dtype} differs from problem dtype {p.Q.dtype}")
    o, lse = _forward_arrays(p.Q.array, p.K.array, p.V.array, p.scale, p.mask)
    s = _masked_scores(p.Q.array, p.K.array, p.scale, p.mask, p.n)
    prob = np.exp(s - lse[:, None])
    d_stat = (dO.array * o).sum(axis=1)
    dv = prob.T @ dO.array
    dp = dO.array @ p.V.array.T
    ds = prob * (dp - d_stat[:, None])
    sc = p.Q.dtype.type(p.scale)
    dq = (ds @ p.K.array) * sc
    dk = (ds.T @ p.Q.array) * sc
    for name, g in (("dQ", dq), ("dK", dk), ("dV", dv)):
        if not np.isfinite(g).all():
            raise NonFiniteError(f"dense backward produced non-finite {name}")
    return Matrix.from_array(dq), Matrix.from_array(dk), Matrix.from_array(dv)


def finite_difference_grad(p: AttnProblem, dO: Matrix,
                           h: float = 1e-5) -> tuple[Matrix, Matrix, Matrix]:
    """Central-difference gradients of L = sum(dO * O), entry by entry.

    Slow by design; this is the model-independent check the analytic and
    distributed backward passes are compared against.
    """
    if (dO.rows, dO.cols) != (p.n, p.d):
        raise ShapeError(f"dO is {dO.rows}x{dO.cols}, expected {p.n}x{p.d}")
    do_arr = dO.array.astype(np.float64)
    base = {
        "Q": p.Q.array.astype(np.float64),
        "K": p.K.array.astype(np.float64),
        "V": p.V.array.astype(np.float64),
    }

    def loss(q, k, v) -> float:
        o, _ = _forward_arrays(q, k, v, p.scale, p.mask)
        return float((do_arr * o).sum())

    grads = []
    for which in ("Q", "K", "V"):
        g = np.zeros_like(base[which])
        work = {k: v.copy() for k, v in base.items()}
        target = work[which]
        for i in range(target.shape[0]):
            for j in range(target.shape[1]):
                orig = target[i, j]
                target[i, j] = orig + h
                up = loss(work["Q"], work["K"], work["V"])
                target[i, j] = orig - h
                down = loss(work["Q"], work["K"], work["V"])
                target[i, j] = orig
                g[i, j] = (up - down) / (2.0 * h)
        grads.append(Matrix.from_array(g))
    return grads[0], grads[1], grads[2]
