"""Local block attention with online-softmax aggregation.

Each call processes one (query block) x (key block) rectangle of the global
score matrix and returns an unnormalized partial result: the running row
maximum ``m``, the running exponential row sum ``l`` and the unnormalized
output ``O_part``. Partials from different key blocks merge associatively and
commute up to floating-point rounding, so blocks can arrive in any order and
normalization happens exactly once, at finalization.

Two kernel variants exist. The untiled one materializes the full rectangle
(one quadratic score buffer, reused in place for the exponentials). The tiled
one streams fixed-size tiles through the same merge recurrence and never
materializes anything larger than one tile, which is what keeps the
per-device memory footprint linear in the block size.

Invariant relied on throughout: a row whose running maximum is -inf has seen
no unmasked entry yet, so its ``l`` and ``O_part`` rows are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MaskError, NonFiniteError, ShapeError
from .linalg import Matrix, Vector, note_allocation
from .masking import BlockMask, Decision

DEFAULT_SRAM_BYTES = 4096


@dataclass(frozen=True)
class TileSpec:
    """Tile dimensions for the streaming kernel."""

    tile_rows: int
    tile_cols: int

    def __post_init__(self):
        if self.tile_rows < 1 or self.tile_cols < 1:
            raise ShapeError(f"tile sizes must be positive, got {self}")

    @classmethod
    def for_partition(cls, partition_len: int, d: int,
                      sram_bytes: int = DEFAULT_SRAM_BYTES,
                      elem_bytes: int = 8) -> "TileSpec":
        """Derive a square tile from a scratchpad budget.

        The kernel keeps four d-wide tiles resident (query, key, value and
        output), so the tile length is sram_bytes / (4 d elem_bytes), floored,
        at least 1, and clamped to the partition length.
        """
        if partition_len < 1 or d < 1:
            raise ShapeError("partition_len and d must be positive")
        if sram_bytes < 1:
            raise ShapeError("sram_bytes must be positive")
        t = max(1, sram_bytes // (4 * d * elem_bytes))
        t = min(t, partition_len)
        return cls(t, t)

    def clamped(self, rows: int, cols: int) -> "TileSpec":
        return TileSpec(min(self.tile_rows, rows), min(self.tile_cols, cols))


class PartialAttn:
    """Unnormalized attention state for one query block.

    Fields: ``o`` (rows x d, unnormalized output), ``m`` (running row max,
    -inf until a row has seen an unmasked entry) and ``l`` (running exp sum).
    Mutable so merges can stream; rows with m == -inf always carry l == 0 and
    a zero output row.
    """

    __slots__ = ("o", "m", "l")

    def __init__(self, o: np.ndarray, m: np.ndarray, l: np.ndarray):
        self.o = o
        self.m = m
        self.l = l

    @classmethod
    def empty(cls, rows: int, d: int, dtype=np.float64) -> "PartialAttn":
        dt = np.dtype(dtype)
        o = np.zeros((rows, d), dtype=dt)
        m = np.full(rows, -np.inf, dtype=dt)
        l = np.zeros(rows, dtype=dt)
        note_allocation(rows, d, o)
        note_allocation(rows, 1, m)
        note_allocation(rows, 1, l)
        return cls(o, m, l)

    @property
    def rows(self) -> int:
        return self.o.shape[0]

    @property
    def d(self) -> int:
        return self.o.shape[1]

    def merge(self, other: "PartialAttn") -> "PartialAttn":
        """Fold another partial into this one (in place); returns self.

        With m* = max(m_a, m_b):
            l = e^(m_a - m*) l_a + e^(m_b - m*) l_b
            O = e^(m_a - m*) O_a + e^(m_b - m*) O_b
        A row whose m is -inf carries zero l and O, so substituting a zero
        exponent for it leaves the result exact and avoids (-inf) - (-inf).
        """
        if self.o.shape != other.o.shape:
            raise ShapeError(f"merge: shapes differ ({self.o.shape} vs {other.o.shape})")
        dt = self.m.dtype
        m_new = np.maximum(self.m, other.m)
        with np.errstate(invalid="ignore"):
            fa = np.exp(np.where(np.isneginf(self.m), 0.0, self.m - m_new).astype(dt))
            fb = np.exp(np.where(np.isneginf(other.m), 0.0, other.m - m_new).astype(dt))
        self.l = fa * self.l + fb * other.l
        self.o = fa[:, None] * self.o + fb[:, None] * other.o
        self.m = m_new
        return self

    def freeze(self) -> tuple[Matrix, Vector, Vector]:
        """Immutable copies (Matrix/Vector) of the current state, for transport."""
        return (Matrix.from_array(self.o), Vector(self.m, dtype=self.m.dtype),
                Vector(self.l, dtype=self.l.dtype))

    def finalize(self) -> tuple[Matrix, Vector]:
        """Normalize exactly once: O = O_part / l, lse = m + log l."""
        if np.any(self.l == 0):
            raise MaskError("finalize: some query row accumulated no unmasked entries")
        o = self.o / self.l[:, None]
        lse = self.m + np.log(self.l)
        if not (np.isfinite(o).all() and np.isfinite(lse).all()):
            raise NonFiniteError("finalize produced a non-finite value")
        return Matrix.from_array(o), Vector(lse, dtype=lse.dtype)


# ---------------------------------------------------------------------------
# Mask plumbing
# ---------------------------------------------------------------------------

def _require_span(mask: BlockMask | None, n_total: int | None,
                  rows: int, cols: int, row_offset: int, col_offset: int) -> int:
    if mask is None or mask.is_trivial():
        return n_total if n_total is not None else max(row_offset + rows, col_offset + cols)
    if n_total is None:
        raise MaskError("masked kernels need n_total to resolve global coordinates")
    return n_total


def _decide(mask: BlockMask | None, r0: int, r1: int, c0: int, c1: int,
            n_total: int) -> Decision:
    if mask is None or mask.is_trivial():
        return Decision.COMPUTE
    return mask.decision(r0, r1, c0, c1, n_total, n_total)


def _fill_masked(s: np.ndarray, mask: BlockMask, r0: int, c0: int, n_total: int) -> None:
    allowed = mask.allowed(r0, r0 + s.shape[0], c0, c0 + s.shape[1], n_total, n_total)
    s[~allowed] = -np.inf


def _tile_edges(length: int, tile: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + tile, length)) for lo in range(0, length, tile)]


# ---------------------------------------------------------------------------
# Forward kernels
# ---------------------------------------------------------------------------

def _block_partial(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float,
                   mask: BlockMask | None, r0: int, c0: int, n_total: int) -> PartialAttn:
    """One rectangle: exactly one rows x cols score buffer, reused for exp."""
    dt = q.dtype
    s = (q * dt.type(scale)) @ k.T
    note_allocation(s.shape[0], s.shape[1], s)
    if mask is not None and not mask.is_trivial():
        _fill_masked(s, mask, r0, c0, n_total)
    m = s.max(axis=1)
    m_eff = np.where(np.isneginf(m), 0.0, m).astype(dt)
    np.subtract(s, m_eff[:, None], out=s)
    np.exp(s, out=s)
    l = s.sum(axis=1)
    o = s @ v
    note_allocation(o.shape[0], o.shape[1], o)
    note_allocation(m.shape[0], 1, m)
    note_allocation(l.shape[0], 1, l)
    if not np.isfinite(o).all():
        raise NonFiniteError("local forward produced a non-finite output")
    return PartialAttn(o, m, l)


def local_forward_untiled(q: Matrix, k: Matrix, v: Matrix, scale: float,
                          mask: BlockMask | None = None,
                          row_offset: int = 0, col_offset: int = 0,
                          n_total: int | None = None) -> PartialAttn:
    """Whole-rectangle kernel; materializes one (rows x cols) score buffer."""
    _check_block(q, k, v)
    n = _require_span(mask, n_total, q.rows, k.rows, row_offset, col_offset)
    if _decide(mask, row_offset, row_offset + q.rows,
               col_offset, col_offset + k.rows, n) is Decision.SKIP:
        return PartialAttn.empty(q.rows, q.cols, q.dtype)
    return _block_partial(q.array, k.array, v.array, scale, mask,
                          row_offset, col_offset, n)


def local_forward_tiled(q: Matrix, k: Matrix, v: Matrix, scale: float,
                        tiles: TileSpec,
                        mask: BlockMask | None = None,
                        row_offset: int = 0, col_offset: int = 0,
                        n_total: int | None = None,
                        key_tile_order: list[int] | None = None) -> PartialAttn:
    """Streaming kernel: same math as untiled, one tile pair in flight at a time.

    ``key_tile_order`` permutes key-tile visitation (the merge recurrence is
    order-independent up to rounding); default is left to right.
    """
    _check_block(q, k, v)
    n = _require_span(mask, n_total, q.rows, k.rows, row_offset, col_offset)
    t = tiles.clamped(q.rows, k.rows)
    q_edges = _tile_edges(q.rows, t.tile_rows)
    k_edges = _tile_edges(k.rows, t.tile_cols)
    order = list(range(len(k_edges))) if key_tile_order is None else list(key_tile_order)
    if sorted(order) != list(range(len(k_edges))):
        raise ShapeError(f"key_tile_order must permute range({len(k_edges)})")

    out = PartialAttn.empty(q.rows, q.cols, q.dtype)
    for (r0, r1) in q_edges:
        acc = PartialAttn.empty(r1 - r0, q.cols, q.dtype)
        q_tile = None
        for idx in order:
            c0, c1 = k_edges[idx]
            gr0, gc0 = row_offset + r0, col_offset + c0
            if _decide(mask, gr0, row_offset + r1, gc0, col_offset + c1, n) is Decision.SKIP:
                continue
            if q_tile is None:
                q_tile = q.array[r0:r1].copy()
                note_allocation(r1 - r0, q.cols, q_tile)
            k_tile = k.array[c0:c1].copy()
            v_tile = v.array[c0:c1].copy()
            note_allocation(c1 - c0, k.cols, k_tile)
            note_allocation(c1 - c0, v.cols, v_tile)
            part = _block_partial(q_tile, k_tile, v_tile, scale, mask, gr0, gc0, n)
            acc.merge(part)
        out.o[r0:r1] = acc.o
        out.m[r0:r1] = acc.m
        out.l[r0:r1] = acc.l
    return out


# ---------------------------------------------------------------------------
# Backward kernels
# ---------------------------------------------------------------------------

def local_backward(q: Matrix, k: Matrix, v: Matrix, dO: Matrix,
                   lse: Vector, d_stat: Vector, scale: float,
                   tiles: TileSpec | None = None,
                   mask: BlockMask | None = None,
                   row_offset: int = 0, col_offset: int = 0,
                   n_total: int | None = None) -> tuple[Matrix, Matrix, Matrix]:
    """Gradient contributions of one rectangle.

    Recomputes probabilities from the forward log-sum-exp (P = e^(S - lse)),
    then
        dV += P^T dO,  dS = P * (dO V^T - D),  dK += scale dS^T Q,
        dQ += scale dS K.
    Returns (dQ contribution for this query block, dK and dV contributions
    for this key block). ``d_stat`` is rowsum(dO * O) for the query block.
    Untiled mode uses two quadratic buffers (P, then dS reusing the dO V^T
    buffer); tiled mode streams tile pairs and allocates nothing quadratic.
    """
    _check_block(q, k, v)
    if (dO.rows, dO.cols) != (q.rows, q.cols):
        raise ShapeError(f"dO is {dO.rows}x{dO.cols}, expected {q.rows}x{q.cols}")
    if lse.n != q.rows or d_stat.n != q.rows:
        raise ShapeError("lse and d_stat must have one entry per query row")
    n = _require_span(mask, n_total, q.rows, k.rows, row_offset, col_offset)

    if tiles is None:
        dq, dk, dv = _backward_block(q.array, k.array, v.array, dO.array,
                                     lse.array, d_stat.array, scale, mask,
                                     row_offset, col_offset, n)
    else:
        dq, dk, dv = _backward_tiled(q, k, v, dO, lse, d_stat, scale, tiles,
                                     mask, row_offset, col_offset, n)
    for name, g in (("dQ", dq), ("dK", dk), ("dV", dv)):
        if not np.isfinite(g).all():
            raise NonFiniteError(f"local backward produced non-finite {name}")
    return Matrix.from_array(dq), Matrix.from_array(dk), Matrix.from_array(dv)


def _backward_block(q, k, v, do, lse, d_stat, scale, mask, r0, c0, n_total):
    dt = q.dtype
    s = (q * dt.type(scale)) @ k.T
    note_allocation(s.shape[0], s.shape[1], s)
    if mask is not None and not mask.is_trivial():
        _fill_masked(s, mask, r0, c0, n_total)
    np.subtract(s, lse[:, None], out=s)
    np.exp(s, out=s)                      # s is now P
    dv = s.T @ do
    dp = do @ v.T
    note_allocation(dp.shape[0], dp.shape[1], dp)
    np.subtract(dp, d_stat[:, None], out=dp)
    np.multiply(s, dp, out=dp)            # dp is now dS
    sc = dt.type(scale)
    dq = (dp @ k) * sc
    dk = (dp.T @ q) * sc
    for arr in (dq, dk, dv):
        note_allocation(arr.shape[0], arr.shape[1], arr)
    return dq, dk, dv


def _backward_tiled(q, k, v, do, lse, d_stat, scale, tiles, mask, row_offset,
                    col_offset, n_total):
    dt = q.dtype
    sc = dt.type(scale)
    t = tiles.clamped(q.rows, k.rows)
    dq = np.zeros((q.rows, q.cols), dtype=dt)
    dk = np.zeros((k.rows, k.cols), dtype=dt)
    dv = np.zeros((v.rows, v.cols), dtype=dt)
    for arr in (dq, dk, dv):
        note_allocation(arr.shape[0], arr.shape[1], arr)
    lse_a, d_a = lse.array, d_stat.array
    for (r0, r1) in _tile_edges(q.rows, t.tile_rows):
        gr0, gr1 = row_offset + r0, row_offset + r1
        q_tile = do_tile = None
        for (c0, c1) in _tile_edges(k.rows, t.tile_cols):
            gc0, gc1 = col_offset + c0, col_offset + c1
            if _decide(mask, gr0, gr1, gc0, gc1, n_total) is Decision.SKIP:
                continue
            if q_tile is None:
                q_tile = q.array[r0:r1].copy()
                do_tile = do.array[r0:r1].copy()
                note_allocation(r1 - r0, q.cols, q_tile)
                note_allocation(r1 - r0, q.cols, do_tile)
            k_tile = k.array[c0:c1].copy()
            v_tile = v.array[c0:c1].copy()
            note_allocation(c1 - c0, k.cols, k_tile)
            note_allocation(c1 - c0, v.cols, v_tile)
            s = (q_tile * sc) @ k_tile.T
            note_allocation(s.shape[0], s.shape[1], s)
            if mask is not None and not mask.is_trivial():
                _fill_masked(s, mask, gr0, gc0, n_total)
            np.subtract(s, lse_a[r0:r1, None], out=s)
            np.exp(s, out=s)              # P tile
            dv[c0:c1] += s.T @ do_tile
            dp = do_tile @ v_tile.T
            note_allocation(dp.shape[0], dp.shape[1], dp)
            np.subtract(dp, d_a[r0:r1, None], out=dp)
            np.multiply(s, dp, out=dp)    # dS tile
            dq[r0:r1] += (dp @ k_tile) * sc
            dk[c0:c1] += (dp.T @ q_tile) * sc
    return dq, dk, dv


def _check_block(q: Matrix, k: Matrix, v: Matrix) -> None:
    if q.cols != k.cols or k.rows != v.rows or k.cols != v.cols:
        raise ShapeError(
            f"incompatible block shapes Q={q.rows}x{q.cols} K={k.rows}x{k.cols} "
            f"V={v.rows}x{v.cols}")
    if q.rows < 1 or q.cols < 1 or k.rows < 1:
        raise ShapeError("empty attention block")
    if not (q.dtype == k.dtype == v.dtype):
        raise ShapeError("mixed dtypes across Q, K, V")
