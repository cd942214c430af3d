"""Distributed exact attention over a ring: per-device state and hop kernels.

The sequence is split into G contiguous row blocks. Each device pins its
query block (plus key/value blocks and gradient accumulators); key/value
blocks circulate the ring during the forward pass, and in the backward pass a
traveling record per query block (queries, output gradient, softmax
statistics and the accumulating dQ) makes the same trip while dK/dV stay
pinned. One hop processes one (query block x key block) rectangle through the
local kernels and folds it into the running online-softmax state, so the
final normalization happens exactly once per row regardless of G.

Executors live in ``sim``; this module owns the numeric state transitions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MissingForwardError, ShapeError
from .linalg import Matrix, Vector, note_allocation
from .local_attn import PartialAttn, TileSpec, local_backward, local_forward_tiled, \
    local_forward_untiled
from .masking import BlockMask, Decision


@dataclass
class DeviceState:
    """Everything pinned to one simulated device for one (batch, head) slice."""

    device_id: int
    row_offset: int
    q: Matrix
    k: Matrix
    v: Matrix
    n_total: int
    n_valid: int
    acc: PartialAttn | None = None
    o: Matrix | None = None
    lse: Vector | None = None
    do: Matrix | None = None
    d_stat: Vector | None = None
    dk: np.ndarray | None = None
    dv: np.ndarray | None = None

    @property
    def rows(self) -> int:
        return self.q.rows


@dataclass(frozen=True)
class ForwardBody:
    """Key/value block traveling the ring during the forward pass."""

    origin: int
    col_offset: int
    k: Matrix
    v: Matrix

    def element_count(self) -> int:
        return self.k.rows * self.k.cols + self.v.rows * self.v.cols


@dataclass
class BackwardBody:
    """Traveling per-query-block record for the backward pass.

    ``dq`` accumulates contributions at every device and rides home with the
    payload; everything else is read-only in transit.
    """

    origin: int
    row_offset: int
    q: Matrix
    do: Matrix
    d_stat: Vector
    lse: Vector
    dq: np.ndarray = field(repr=False, default=None)

    def element_count(self) -> int:
        # three row-block matrices (q, dq, do) plus two row statistics
        return 3 * self.q.rows * self.q.cols + 2 * self.q.rows


@dataclass(frozen=True)
class HopStats:
    rows: int
    cols: int
    computed: bool


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------

def partition(q: Matrix, k: Matrix, v: Matrix, G: int,
              pad: bool = False) -> list[DeviceState]:
    """Split one attention instance into G contiguous row blocks.

    Errors if G does not divide the sequence length, unless ``pad`` is set, in
    which case zero rows are appended; padded key columns must then be masked
    off by the caller (``BlockMask.with_padding``) and padded query rows
    dropped when results are collected.
    """
    if G < 1:
        raise ShapeError(f"device count must be positive, got {G}")
    n = q.rows
    if (q.rows, q.cols) != (k.rows, k.cols) or (q.rows, q.cols) != (v.rows, v.cols):
        raise ShapeError("Q, K, V must share one N x d shape")
    if n % G and not pad:
        raise ShapeError(f"G={G} does not divide N={n} and padding is disabled")
    n_pad = n if n % G == 0 else (n // G + 1) * G
    if n_pad != n:
        q, k, v = (_pad_rows(m, n_pad) for m in (q, k, v))
    block = n_pad // G
    states = []
    for i in range(G):
        lo = i * block
        states.append(DeviceState(
            device_id=i, row_offset=lo,
            q=q.row_block(lo, lo + block),
            k=k.row_block(lo, lo + block),
            v=v.row_block(lo, lo + block),
            n_total=n_pad, n_valid=n,
        ))
    return states


def _pad_rows(m: Matrix, n: int) -> Matrix:
    out = np.zeros((n, m.cols), dtype=m.dtype)
    out[:m.rows] = m.array
    return Matrix.from_array(out)


def initial_forward_body(states: list[DeviceState], device: int,
                         start_offset: int = 0) -> ForwardBody:
    """Key/value block installed on ``device`` before the first hop.

    With a zero start offset each device begins with its own block; a nonzero
    offset rotates the assignment, which must not change any final value.
    """
    j = (device - start_offset) % len(states)
    src = states[j]
    return ForwardBody(origin=j, col_offset=src.row_offset, k=src.k, v=src.v)


# ---------------------------------------------------------------------------
# Forward pass state transitions
# ---------------------------------------------------------------------------

def init_forward(state: DeviceState) -> None:
    state.acc = PartialAttn.empty(state.rows, state.q.cols, state.q.dtype)
    state.o = None
    state.lse = None


def forward_step(state: DeviceState, body: ForwardBody, scale: float,
                 tiles: TileSpec | None, mask: BlockMask | None) -> HopStats:
    """Fold one visiting key/value block into the device's running state.

    A hop whose whole rectangle is masked off performs no compute (the
    payload still traveled, which is the caller's business to account).
    """
    if state.acc is None:
        raise MissingForwardError("forward_step before init_forward")
    r0, r1 = state.row_offset, state.row_offset + state.rows
    c0, c1 = body.col_offset, body.col_offset + body.k.rows
    if mask is not None and not mask.is_trivial():
        if mask.decision(r0, r1, c0, c1, state.n_total, state.n_total) is Decision.SKIP:
            return HopStats(state.rows, body.k.rows, computed=False)
    if tiles is None:
        part = local_forward_untiled(state.q, body.k, body.v, scale, mask,
                                     row_offset=r0, col_offset=c0,
                                     n_total=state.n_total)
    else:
        part = local_forward_tiled(state.q, body.k, body.v, scale, tiles, mask,
                                   row_offset=r0, col_offset=c0,
                                   n_total=state.n_total)
    state.acc.merge(part)
    return HopStats(state.rows, body.k.rows, computed=True)


def finalize_forward(state: DeviceState) -> None:
    if state.acc is None:
        raise MissingForwardError("finalize_forward before init_forward")
    state.o, state.lse = state.acc.finalize()
    state.acc = None


# ---------------------------------------------------------------------------
# Backward pass state transitions
# ---------------------------------------------------------------------------

def init_backward(state: DeviceState, do: Matrix) -> BackwardBody:
    """Prepare pinned accumulators and this device's traveling record.

    Requires the forward pass to have populated ``o`` and ``lse``.
    """
    if state.o is None or state.lse is None:
        raise MissingForwardError(
            f"device {state.device_id}: backward requested before forward")
    if (do.rows, do.cols) != (state.rows, state.q.cols):
        raise ShapeError(f"dO block is {do.rows}x{do.cols}, expected "
                         f"{state.rows}x{state.q.cols}")
    state.do = do
    d_arr = (do.array * state.o.array).sum(axis=1)
    note_allocation(d_arr.shape[0], 1, d_arr)
    state.d_stat = Vector(d_arr, dtype=d_arr.dtype)
    state.dk = np.zeros((state.rows, state.q.cols), dtype=state.q.dtype)
    state.dv = np.zeros((state.rows, state.q.cols), dtype=state.q.dtype)
    note_allocation(*state.dk.shape, state.dk)
    note_allocation(*state.dv.shape, state.dv)
    dq = np.zeros((state.rows, state.q.cols), dtype=state.q.dtype)
    note_allocation(*dq.shape, dq)
    return BackwardBody(origin=state.device_id, row_offset=state.row_offset,
                        q=state.q, do=do, d_stat=state.d_stat, lse=state.lse,
                        dq=dq)


def backward_step(state: DeviceState, body: BackwardBody, scale: float,
                  tiles: TileSpec | None, mask: BlockMask | None) -> HopStats:
    """Process one visiting query-block record against the pinned keys/values.

    dK/dV contributions accumulate on the device; the dQ contribution is
    added to the traveling record.
    """
    if state.dk is None or state.dv is None:
        raise MissingForwardError("backward_step before init_backward")
    r0, r1 = body.row_offset, body.row_offset + body.q.rows
    c0, c1 = state.row_offset, state.row_offset + state.rows
    if mask is not None and not mask.is_trivial():
        if mask.decision(r0, r1, c0, c1, state.n_total, state.n_total) is Decision.SKIP:
            return HopStats(body.q.rows, state.rows, computed=False)
    dqc, dkc, dvc = local_backward(body.q, state.k, state.v, body.do,
                                   body.lse, body.d_stat, scale, tiles, mask,
                                   row_offset=r0, col_offset=c0,
                                   n_total=state.n_total)
    state.dk += dkc.array
    state.dv += dvc.array
    body.dq += dqc.array
    return HopStats(body.q.rows, state.rows, computed=True)
