"""Stored-score ring attention baseline.

This mode exists as a measured comparison point for the streaming path. It
circulates K and V in two separate rounds during the forward pass and
materializes every score block on the owning device, which is exactly the
quadratic activation the streaming path avoids. The backward pass reuses the
stored probability blocks while circulating (K, V, dK, dV); the gradient of Q
stays pinned.

Execution is sequential (a plain loop over rounds and devices). The point of
this module is the numbers it produces, not its scheduling, so there is no
threaded variant and no overlap timeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ring
from .dense import AttnProblem
from .errors import MaskError, NonFiniteError, ShapeError
from .linalg import AllocationTracker, Matrix, Vector, note_allocation, track_allocations
from .masking import BlockMask
from .sim import CommLedger


@dataclass
class _RefDevice:
    """One device's slice of the problem plus its stored score rows."""

    device_id: int
    row_offset: int
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    s_full: np.ndarray | None = None
    prob: np.ndarray | None = None
    l: np.ndarray | None = None
    lse: np.ndarray | None = None
    o: np.ndarray | None = None
    do: np.ndarray | None = None
    dq: np.ndarray | None = None

    @property
    def rows(self) -> int:
        return self.q.shape[0]


def _partition(problems: list[AttnProblem], G: int, pad: bool):
    states = [ring.partition(p.Q, p.K, p.V, G, pad=pad) for p in problems]
    devices = []
    for per_slice in states:
        devices.append([
            _RefDevice(st.device_id, st.row_offset, st.q.array, st.k.array,
                       st.v.array)
            for st in per_slice
        ])
    n_total = states[0][0].n_total
    return devices, n_total


def _fill_masked(s: np.ndarray, mask: BlockMask | None, r0: int, c0: int,
                 n: int) -> None:
    if mask is None or mask.is_trivial():
        return
    allowed = mask.allowed(r0, r0 + s.shape[0], c0, c0 + s.shape[1], n, n)
    s[~allowed] = -np.inf


def run_reference(problems: list[AttnProblem], G: int, *,
                  do_slices: list[Matrix] | None = None,
                  pad: bool = False,
                  ledger: CommLedger | None = None,
                  trackers: list[AllocationTracker] | None = None):
    """Run the baseline over every slice; returns (outputs, grads, ledger).

    ``grads`` is None when ``do_slices`` is None. The ledger records what this
    implementation actually transmits: N*d elements per device for each of the
    two forward rounds, and 4*(N/G)*d per device per backward hop. The larger
    backward figure quoted for this family of baselines elsewhere in the cost
    model is a modeled property of a different gradient scheme; here we report
    what was measured.
    """
    if not problems:
        raise ShapeError("need at least one attention slice")
    first = problems[0]
    for p in problems[1:]:
        if (p.n, p.d) != (first.n, first.d) or p.scale != first.scale \
                or p.mask is not first.mask or p.Q.dtype != first.Q.dtype:
            raise ShapeError("all slices must share shape, scale, mask and dtype")
    ledger = ledger if ledger is not None else CommLedger()
    devices, n_total = _partition(problems, G, pad)
    trackers = trackers or [AllocationTracker() for _ in range(G)]
    n_valid = first.n
    d = first.d
    scale = first.scale
    mask = first.mask
    if n_total != n_valid:
        mask = (mask or BlockMask()).with_padding(n_valid, n_valid)
    dt = devices[0][0].q.dtype
    sc = dt.type(scale)

    sent = [0] * G

    # Round one: K blocks travel the ring; every device scores each visitor
    # into its stored (rows x N) matrix at the visitor's column offset.
    for per_slice in devices:
        for st in per_slice:
            with track_allocations(trackers[st.device_id]):
                st.s_full = np.empty((st.rows, n_total), dtype=dt)
                note_allocation(st.rows, n_total, st.s_full)
    for r in range(G):
        for per_slice in devices:
            for i, st in enumerate(per_slice):
                j = (i - r) % G
                src = per_slice[j]
                with track_allocations(trackers[i]):
                    block = (st.q * sc) @ src.k.T
                    _fill_masked(block, mask, st.row_offset, src.row_offset,
                                 n_total)
                    st.s_full[:, src.row_offset:src.row_offset + src.rows] = block
        if G > 1:
            for i in range(G):
                sent[i] += sum(per_slice[(i - r) % G].k.size
                               for per_slice in devices)
    if G > 1:
        ledger.ring_steps_forward += G

    # Global softmax on the stored scores, same reduction order as the dense
    # oracle (columns are laid out in global order).
    for per_slice in devices:
        for st in per_slice:
            with track_allocations(trackers[st.device_id]):
                m = st.s_full.max(axis=1)
                m_eff = np.where(np.isneginf(m), 0.0, m).astype(dt)
                st.prob = np.exp(st.s_full - m_eff[:, None])
                note_allocation(st.rows, n_total, st.prob)
                l = st.prob.sum(axis=1)
                if np.any(l == 0):
                    raise MaskError("a query row has every key masked")
                st.lse = m + np.log(l)
                st.o = np.zeros((st.rows, d), dtype=dt)
                note_allocation(st.rows, d, st.o)
                st.l = l
            st.s_full = None

    # Round two: V blocks travel; O accumulates block by block.
    for r in range(G):
        for per_slice in devices:
            for i, st in enumerate(per_slice):
                j = (i - r) % G
                src = per_slice[j]
                c0 = src.row_offset
                st.o += st.prob[:, c0:c0 + src.rows] @ src.v
        if G > 1:
            for i in range(G):
                sent[i] += sum(per_slice[(i - r) % G].v.size
                               for per_slice in devices)
    if G > 1:
        ledger.ring_steps_forward += G
    for per_slice in devices:
        for st in per_slice:
            st.o = st.o / st.l[:, None]
            if not np.all(np.isfinite(st.o)):
                raise NonFiniteError("non-finite attention output")

    if len(set(sent)) > 1:
        raise ShapeError(f"asymmetric per-device send counts: {sent}")
    ledger.elements_sent_forward += sent[0]

    outputs = []
    for per_slice in devices:
        o = np.concatenate([st.o for st in per_slice], axis=0)[:n_valid]
        lse = np.concatenate([st.lse for st in per_slice])[:n_valid]
        outputs.append((Matrix.from_array(o), Vector(lse, dtype=lse.dtype)))

    grads = None
    if do_slices is not None:
        grads = _run_reference_backward(devices, do_slices, n_total, n_valid,
                                        d, sc, ledger, trackers)

    if not ledger.per_device_peak_activation:
        ledger.per_device_peak_activation = [0] * G
    for i in range(G):
        ledger.per_device_peak_activation[i] = max(
            ledger.per_device_peak_activation[i], trackers[i].peak_live_elements)
    ledger.peak_activation_elements = max(ledger.per_device_peak_activation)
    return outputs, grads, ledger


def _run_reference_backward(devices, do_slices, n_total, n_valid, d, sc,
                            ledger: CommLedger, trackers):
    """Circulate (K, V, dK, dV); dQ stays home, stored probabilities are reused."""
    G = len(devices[0])
    if len(do_slices) != len(devices):
        raise ShapeError(f"got {len(do_slices)} dO matrices for "
                         f"{len(devices)} slices")
    dos = []
    for m in do_slices:
        if (m.rows, m.cols) != (n_valid, d):
            raise ShapeError(f"dO must be {n_valid}x{d}, got {m.rows}x{m.cols}")
        dos.append(ring._pad_rows(m, n_total).array if n_total != n_valid
                   else m.array)

    payloads = []  # payloads[s][j] = dict with k, v, dk, dv for origin j
    d_stats = []
    for s, per_slice in enumerate(devices):
        row = []
        stats = []
        for st in per_slice:
            lo = st.row_offset
            st.do = dos[s][lo:lo + st.rows]
            stats.append((st.do * st.o).sum(axis=1))
            st.dq = np.zeros_like(st.q)
            row.append({"k": st.k, "v": st.v,
                        "dk": np.zeros_like(st.k), "dv": np.zeros_like(st.v)})
        payloads.append(row)
        d_stats.append(stats)

    sent = [0] * G
    for r in range(G):
        for s, per_slice in enumerate(devices):
            for i, st in enumerate(per_slice):
                j = (i - r) % G
                pay = payloads[s][j]
                c0 = devices[s][j].row_offset
                cols = pay["k"].shape[0]
                with track_allocations(trackers[i]):
                    p_blk = st.prob[:, c0:c0 + cols] / st.l[:, None]
                    dp = st.do @ pay["v"].T
                    ds = p_blk * (dp - d_stats[s][i][:, None])
                    st.dq += (ds @ pay["k"]) * sc
                    pay["dk"] += (ds.T @ st.q) * sc
                    pay["dv"] += p_blk.T @ st.do
        if G > 1:
            for i in range(G):
                j_here = (i - r) % G
                sent[i] += sum(sum(a.size for a in payloads[s][j_here].values())
                               for s in range(len(devices)))
    if G > 1:
        ledger.ring_steps_backward += G
        if len(set(sent)) > 1:
            raise ShapeError(f"asymmetric per-device send counts: {sent}")
        ledger.elements_sent_backward += sent[0]

    grads = []
    for s, per_slice in enumerate(devices):
        dq = np.concatenate([st.dq for st in per_slice], axis=0)[:n_valid]
        dk = np.concatenate([payloads[s][j]["dk"] for j in range(G)],
                            axis=0)[:n_valid]
        dv = np.concatenate([payloads[s][j]["dv"] for j in range(G)],
                            axis=0)[:n_valid]
        for a in (dq, dk, dv):
            if not np.all(np.isfinite(a)):
                raise NonFiniteError("non-finite gradient")
        grads.append((Matrix.from_array(dq), Matrix.from_array(dk),
                      Matrix.from_array(dv)))
    return grads
