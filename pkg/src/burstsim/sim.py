"""Virtual-time simulation of the device ring.

Devices are workers that may only exchange data through FIFO ring channels
(device i sends to (i+1) mod G). Two executors produce bit-identical results:
a single-threaded lock-step loop, and one OS thread per device with real
queue-backed channels (used to demonstrate the protocol tolerates arbitrary
scheduling; injected delays must not change any value).

Time is virtual. Per-round compute and transfer durations come from an
analytic duration model (model units, not wall clock), and a schedule builder
turns them into an event timeline for either overlap mode:

  none           round = receive, compute, then send (device busy while sending)
  double_buffer  the send of the active buffer is issued when compute starts,
                 and the incoming payload lands in the staging slot meanwhile;
                 slots swap at the round boundary

The overlap mode changes only the timeline, never the numbers: both modes
execute hops in the same order. For the backward pass the overlapped timeline
is optimistic about the traveling dQ accumulator (a real system would forward
it one hop late); this is a documented modeling simplification.

The communication ledger counts payload elements as sent by one device over a
pass (the ring is symmetric, which is asserted). Payload metadata (origin,
hop counters) is excluded from counts. A pass over G > 1 devices makes G
synchronized ring steps, the last of which returns each payload to its origin
(for the forward pass that final hop carries no new information; for the
backward pass it brings dQ home). With G = 1 nothing is sent at all.
"""

from __future__ import annotations

import json
import queue
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ring
from .dense import AttnProblem
from .errors import DeadlockError, RingDesyncError, ShapeError
from .linalg import AllocationTracker, Matrix, Vector, bytes_per_element, track_allocations
from .local_attn import TileSpec
from .masking import BlockMask

DEADLOCK_HORIZON_ROUNDS = 10
ROUND_QUANTUM_SECONDS = 0.05


# ---------------------------------------------------------------------------
# Duration model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DurationModel:
    """Maps modeled flops and bytes to virtual durations.

    ``fixed_compute`` / ``fixed_transfer`` pin per-round durations directly,
    which the schedule tests use to create exactly equal phases.
    """

    bandwidth_bytes: float = 1.0e9
    flops_rate: float = 1.0e12
    fixed_compute: float | None = None
    fixed_transfer: float | None = None

    def compute_time(self, flops: float) -> float:
        if self.fixed_compute is not None:
            return self.fixed_compute
        return flops / self.flops_rate

    def transfer_time(self, nbytes: float) -> float:
        if self.fixed_transfer is not None:
            return self.fixed_transfer
        return nbytes / self.bandwidth_bytes


def flops_forward_hop(rows: int, cols: int, d: int) -> int:
    # two block products plus exponential/merge traffic, model units
    return 4 * rows * cols * d + 3 * rows * cols


def flops_backward_hop(rows: int, cols: int, d: int) -> int:
    # five block products plus elementwise traffic, model units
    return 10 * rows * cols * d + 5 * rows * cols


def hbm_forward_hop(rows: int, cols: int, d: int, tiles: TileSpec | None) -> int:
    """Modeled main-memory element accesses for one forward hop.

    The untiled kernel writes and re-reads the quadratic score/probability
    buffer; the tiled kernel streams key/value tiles and touches only linear
    state, which is the whole point of tiling.
    """
    if tiles is None:
        return 2 * rows * d + 2 * cols * d + 4 * rows * cols
    t = tiles.clamped(rows, cols)
    nq = -(-rows // t.tile_rows)
    nk = -(-cols // t.tile_cols)
    return nq * t.tile_rows * d + nq * nk * (2 * t.tile_cols * d + 2 * t.tile_rows * d)


def hbm_backward_hop(rows: int, cols: int, d: int, tiles: TileSpec | None) -> int:
    if tiles is None:
        return 3 * rows * d + 4 * cols * d + 8 * rows * cols
    t = tiles.clamped(rows, cols)
    nq = -(-rows // t.tile_rows)
    nk = -(-cols // t.tile_cols)
    return nq * 2 * t.tile_rows * d + nq * nk * (4 * t.tile_cols * d + 3 * t.tile_rows * d)


# ---------------------------------------------------------------------------
# Ledger
# ---------------------------------------------------------------------------

@dataclass
class CommLedger:
    """Integer communication and memory accounting for one or more passes.

    Element counts are per device (every device sends the same amount on a
    symmetric ring; the executors assert this before recording).
    """

    elements_sent_forward: int = 0
    elements_sent_backward: int = 0
    ring_steps_forward: int = 0
    ring_steps_backward: int = 0
    hbm_accesses_modeled: int = 0
    peak_activation_elements: int = 0
    per_device_hbm: list[int] = field(default_factory=list)
    per_device_peak_activation: list[int] = field(default_factory=list)

    @property
    def ring_steps(self) -> int:
        return self.ring_steps_forward + self.ring_steps_backward

    def to_json(self) -> dict:
        return {
            "elements_sent_forward": self.elements_sent_forward,
            "elements_sent_backward": self.elements_sent_backward,
            "ring_steps": self.ring_steps,
            "ring_steps_forward": self.ring_steps_forward,
            "ring_steps_backward": self.ring_steps_backward,
            "hbm_accesses_modeled": self.hbm_accesses_modeled,
            "peak_activation_elements": self.peak_activation_elements,
            "per_device_hbm": list(self.per_device_hbm),
            "per_device_peak_activation": list(self.per_device_peak_activation),
        }

    def export(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


# ---------------------------------------------------------------------------
# Schedule trace
# ---------------------------------------------------------------------------

EVENT_KINDS = ("compute_start", "compute_end", "send_start", "send_end", "recv_ready")


@dataclass(frozen=True)
class TraceEvent:
    device: int
    kind: str
    t_virtual: float
    round: int


@dataclass
class ScheduleTrace:
    overlap: str
    events: list[TraceEvent] = field(default_factory=list)

    @property
    def makespan(self) -> float:
        return max((e.t_virtual for e in self.events), default=0.0)

    def to_ndjson(self) -> str:
        lines = [json.dumps({"device": e.device, "kind": e.kind,
                             "t_virtual": e.t_virtual, "round": e.round},
                            sort_keys=True)
                 for e in self.events]
        return "\n".join(lines) + ("\n" if lines else "")


def build_schedule(compute_durations: list[list[float]],
                   transfer_durations: list[list[float]],
                   overlap: str) -> ScheduleTrace:
    """Event timeline for one pass from per-(device, round) durations.

    ``compute_durations[i][r]`` is device i's compute time in round r, and
    ``transfer_durations[i][r]`` the time its round-r send occupies the
    channel to device i+1. The ``recv_ready`` event on device i with round r
    marks the arrival of the payload sent to it in round r (consumed in round
    r+1; the last one is the homecoming payload).

    With transfers of zero length both modes collapse to the same timeline,
    and the double-buffer makespan never exceeds the non-overlapped one.
    """
    if overlap not in ("none", "double_buffer"):
        raise ShapeError(f"overlap must be 'none' or 'double_buffer', got {overlap!r}")
    g = len(compute_durations)
    rounds = len(compute_durations[0]) if g else 0
    trace = ScheduleTrace(overlap=overlap)
    ready = [0.0] * g
    for r in range(rounds):
        compute_end = [0.0] * g
        send_end = [0.0] * g
        for i in range(g):
            cs = ready[i]
            ce = cs + compute_durations[i][r]
            compute_end[i] = ce
            trace.events.append(TraceEvent(i, "compute_start", cs, r))
            trace.events.append(TraceEvent(i, "compute_end", ce, r))
            if g > 1:
                ss = ce if overlap == "none" else cs
                se = ss + transfer_durations[i][r]
                trace.events.append(TraceEvent(i, "send_start", ss, r))
                trace.events.append(TraceEvent(i, "send_end", se, r))
                send_end[i] = se
            else:
                send_end[i] = ce
        for i in range(g):
            if g > 1:
                arrival = send_end[(i - 1) % g]
                trace.events.append(TraceEvent(i, "recv_ready", arrival, r))
            else:
                arrival = 0.0
            own_busy = send_end[i] if overlap == "none" else compute_end[i]
            ready[i] = max(own_busy, arrival)
    trace.events.sort(key=lambda e: (e.t_virtual, e.round, e.device,
                                     EVENT_KINDS.index(e.kind)))
    return trace


def measure_overlap(trace: ScheduleTrace) -> dict:
    """Per-round communication/computation overlap from the event timeline.

    For each round, the ratio of the virtual-time intersection of the compute
    and send intervals to the send duration, averaged over devices; rounds
    without communication report 0. Non-overlapped schedules report ~0
    everywhere, a fully hidden transfer reports 1.
    """
    spans: dict[tuple[int, int], dict[str, float]] = {}
    for e in trace.events:
        spans.setdefault((e.round, e.device), {})[e.kind] = e.t_virtual
    per_round: dict[int, list[float]] = {}
    for (r, _dev), kinds in sorted(spans.items()):
        if "send_start" not in kinds:
            ratio = 0.0
        else:
            lo = max(kinds["compute_start"], kinds["send_start"])
            hi = min(kinds["compute_end"], kinds["send_end"])
            dur = kinds["send_end"] - kinds["send_start"]
            ratio = max(0.0, hi - lo) / dur if dur > 0 else 0.0
        per_round.setdefault(r, []).append(ratio)
    rounds = {r: sum(v) / len(v) for r, v in per_round.items()}
    mean = sum(rounds.values()) / len(rounds) if rounds else 0.0
    return {"per_round": rounds, "mean": mean}


# ---------------------------------------------------------------------------
# Channels and buffers
# ---------------------------------------------------------------------------

@dataclass
class Envelope:
    """One traveling payload: per-slice bodies plus routing metadata."""

    origin: int
    bodies: list
    hops: int = 0
    visited: list[int] = field(default_factory=list)

    def element_count(self) -> int:
        return sum(b.element_count() for b in self.bodies)


class RingChannel:
    """FIFO edge i -> (i+1) mod G carrying at most one in-flight payload."""

    def __init__(self, sender: int, receiver: int, timeout: float):
        self.sender = sender
        self.receiver = receiver
        self.timeout = timeout
        self._q: queue.Queue = queue.Queue(maxsize=1)

    def send(self, env: Envelope) -> None:
        env.hops += 1
        try:
            self._q.put(env, timeout=self.timeout)
        except queue.Full:
            raise DeadlockError(
                f"channel {self.sender}->{self.receiver}: receiver made no "
                f"progress within the deadlock horizon")

    def recv(self, expected_hops: int) -> Envelope:
        try:
            env = self._q.get(timeout=self.timeout)
        except queue.Empty:
            raise DeadlockError(
                f"channel {self.sender}->{self.receiver}: no payload arrived "
                f"within the deadlock horizon")
        if env.hops != expected_hops:
            raise RingDesyncError(
                f"channel {self.sender}->{self.receiver}: payload has made "
                f"{env.hops} hops, expected {expected_hops}")
        return env

    def pending(self) -> int:
        return self._q.qsize()


class DoubleBuffer:
    """Paired payload slots: compute reads the active slot while the staging
    slot receives; they swap at each round boundary."""

    def __init__(self, active: Envelope | None = None):
        self.active = active
        self.staging: Envelope | None = None

    def stage(self, env: Envelope) -> None:
        if self.staging is not None:
            raise RingDesyncError("staging slot already occupied")
        self.staging = env

    def swap(self) -> None:
        if self.staging is None:
            raise RingDesyncError("round boundary reached with an empty staging slot")
        self.active, self.staging = self.staging, None


# ---------------------------------------------------------------------------
# Cluster
# ---------------------------------------------------------------------------

@dataclass
class SimCluster:
    """G simulated devices holding the partitions of B*Z attention slices.

    One ring pass serves every slice at once: each envelope carries the
    corresponding body for all slices, so a pass still makes exactly G ring
    steps while the ledger sees payload sizes scaled by the slice count.
    """

    G: int
    scale: float
    n_total: int
    n_valid: int
    d: int
    dtype: np.dtype
    mask: BlockMask | None
    tiles: TileSpec | None
    slices: list[list[ring.DeviceState]]

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    def device_states(self, i: int) -> list[ring.DeviceState]:
        return [states[i] for states in self.slices]


def build_cluster(problems: list[AttnProblem], G: int,
                  tiles: TileSpec | None = None, pad: bool = False) -> SimCluster:
    """Partition a batch of same-shaped attention instances across G devices."""
    if not problems:
        raise ShapeError("need at least one attention slice")
    first = problems[0]
    for p in problems[1:]:
        if (p.n, p.d) != (first.n, first.d) or p.scale != first.scale \
                or p.mask is not first.mask or p.Q.dtype != first.Q.dtype:
            raise ShapeError("all slices must share shape, scale, mask and dtype")
    slices = [ring.partition(p.Q, p.K, p.V, G, pad=pad) for p in problems]
    n_total = slices[0][0].n_total
    mask = first.mask
    if n_total != first.n:
        mask = (mask or BlockMask()).with_padding(first.n, first.n)
    return SimCluster(G=G, scale=first.scale, n_total=n_total, n_valid=first.n,
                      d=first.d, dtype=first.Q.dtype, mask=mask, tiles=tiles,
                      slices=slices)


@dataclass
class PassResult:
    """Outcome of one ring pass over every slice."""

    kind: str
    overlap: str
    ledger: CommLedger
    trace: ScheduleTrace
    compute_durations: list[list[float]]
    transfer_durations: list[list[float]]
    outputs: list[tuple[Matrix, Vector]] | None = None
    grads: list[tuple[Matrix, Matrix, Matrix]] | None = None


# ---------------------------------------------------------------------------
# Round work shared by both executors
# ---------------------------------------------------------------------------

def _initial_envelopes(cluster: SimCluster, kind: str,
                       do_slices: list[Matrix] | None,
                       start_offset: int) -> list[Envelope]:
    envs = []
    for i in range(cluster.G):
        bodies = []
        for s, states in enumerate(cluster.slices):
            if kind == "forward":
                bodies.append(ring.initial_forward_body(states, i, start_offset))
            else:
                j = (i - start_offset) % cluster.G
                st = states[j]
                lo = st.row_offset
                do_block = do_slices[s].row_block(lo, lo + st.rows)
                bodies.append(ring.init_backward(st, do_block))
        envs.append(Envelope(origin=(i - start_offset) % cluster.G, bodies=bodies))
    return envs


def _device_round(cluster: SimCluster, device: int, env: Envelope, kind: str,
                  tracker: AllocationTracker) -> tuple[int, int]:
    """Run one device's hop for every slice; returns (flops, hbm) modeled."""
    flops = 0
    hbm = 0
    with track_allocations(tracker):
        for s, states in enumerate(cluster.slices):
            st = states[device]
            body = env.bodies[s]
            if kind == "forward":
                stats = ring.forward_step(st, body, cluster.scale,
                                          cluster.tiles, cluster.mask)
                if stats.computed:
                    flops += flops_forward_hop(stats.rows, stats.cols, cluster.d)
                    hbm += hbm_forward_hop(stats.rows, stats.cols, cluster.d,
                                           cluster.tiles)
            else:
                stats = ring.backward_step(st, body, cluster.scale,
                                           cluster.tiles, cluster.mask)
                if stats.computed:
                    flops += flops_backward_hop(stats.rows, stats.cols, cluster.d)
                    hbm += hbm_backward_hop(stats.rows, stats.cols, cluster.d,
                                            cluster.tiles)
    env.visited.append(device)
    return flops, hbm


def _collect(cluster: SimCluster, kind: str,
             final_envs: dict[int, Envelope]) -> PassResult | tuple:
    """Assemble per-slice results, dropping padded rows."""
    nv = cluster.n_valid
    if kind == "forward":
        outputs = []
        for states in cluster.slices:
            o = np.concatenate([st.o.array for st in states], axis=0)[:nv]
            lse = np.concatenate([st.lse.array for st in states])[:nv]
            outputs.append((Matrix.from_array(o), Vector(lse, dtype=lse.dtype)))
        return outputs
    grads = []
    dq_by_origin: dict[int, list[np.ndarray]] = {}
    for env in final_envs.values():
        dq_by_origin[env.origin] = [b.dq for b in env.bodies]
    for s, states in enumerate(cluster.slices):
        dq = np.concatenate([dq_by_origin[i][s] for i in range(cluster.G)], axis=0)[:nv]
        dk = np.concatenate([st.dk for st in states], axis=0)[:nv]
        dv = np.concatenate([st.dv for st in states], axis=0)[:nv]
        grads.append((Matrix.from_array(dq), Matrix.from_array(dk),
                      Matrix.from_array(dv)))
    return grads


def _finish_ledger(cluster: SimCluster, kind: str, ledger: CommLedger,
                   sent: list[int], steps: int, hbm: list[int],
                   trackers: list[AllocationTracker]) -> None:
    if len(set(sent)) > 1:
        raise RingDesyncError(f"asymmetric per-device send counts: {sent}")
    per_device_sent = sent[0] if sent else 0
    if kind == "forward":
        ledger.elements_sent_forward += per_device_sent
        ledger.ring_steps_forward += steps
    else:
        ledger.elements_sent_backward += per_device_sent
        ledger.ring_steps_backward += steps
    if not ledger.per_device_hbm:
        ledger.per_device_hbm = [0] * cluster.G
        ledger.per_device_peak_activation = [0] * cluster.G
    for i in range(cluster.G):
        ledger.per_device_hbm[i] += hbm[i]
        ledger.per_device_peak_activation[i] = max(
            ledger.per_device_peak_activation[i], trackers[i].peak_live_elements)
    ledger.hbm_accesses_modeled = max(ledger.per_device_hbm)
    ledger.peak_activation_elements = max(ledger.per_device_peak_activation)


# ---------------------------------------------------------------------------
# Executors
# ---------------------------------------------------------------------------

def run_ring_pass(cluster: SimCluster, kind: str, *,
                  do_slices: list[Matrix] | None = None,
                  overlap: str = "none",
                  executor: str = "lockstep",
                  duration: DurationModel | None = None,
                  ledger: CommLedger | None = None,
                  start_offset: int = 0,
                  delay_fn: Callable[[int, int], float] | None = None,
                  deadlock_timeout: float | None = None,
                  trackers: list[AllocationTracker] | None = None) -> PassResult:
    """Execute one forward or backward pass over the ring.

    ``delay_fn(device, round)`` injects wall-clock sleeps in the concurrent
    executor to shake out ordering assumptions; it must not change results.
    """
    if kind not in ("forward", "backward"):
        raise ShapeError(f"pass kind must be 'forward' or 'backward', got {kind!r}")
    if executor not in ("lockstep", "threaded"):
        raise ShapeError(f"executor must be 'lockstep' or 'threaded', got {executor!r}")
    if overlap not in ("none", "double_buffer"):
        raise ShapeError(f"overlap must be 'none' or 'double_buffer', got {overlap!r}")
    if kind == "backward":
        if do_slices is None:
            raise ShapeError("backward pass needs dO for every slice")
        if len(do_slices) != cluster.n_slices:
            raise ShapeError(f"got {len(do_slices)} dO matrices for "
                             f"{cluster.n_slices} slices")
        for m in do_slices:
            if (m.rows, m.cols) != (cluster.n_valid, cluster.d):
                raise ShapeError(f"dO must be {cluster.n_valid}x{cluster.d}, "
                                 f"got {m.rows}x{m.cols}")
        if cluster.n_total != cluster.n_valid:
            do_slices = [ring._pad_rows(m, cluster.n_total) for m in do_slices]
    duration = duration or DurationModel()
    ledger = ledger if ledger is not None else CommLedger()
    trackers = trackers or [AllocationTracker() for _ in range(cluster.G)]

    if kind == "forward":
        for states in cluster.slices:
            for st in states:
                ring.init_forward(st)

    envs = _initial_envelopes(cluster, kind, do_slices, start_offset)
    g = cluster.G
    flops_per_round = [[0] * g for _ in range(g)]
    hbm_per_device = [0] * g
    sent_per_device = [0] * g
    elem_bytes = bytes_per_element(cluster.dtype)
    transfer_bytes = [env.element_count() * elem_bytes for env in envs]

    if executor == "lockstep" or g == 1:
        buffers = [DoubleBuffer(active=envs[i]) for i in range(g)]
        steps = 0
        for r in range(g):
            for i in range(g):
                flops, hbm = _device_round(cluster, i, buffers[i].active, kind,
                                           trackers[i])
                flops_per_round[i][r] = flops
                hbm_per_device[i] += hbm
            if g > 1:
                for i in range(g):
                    env = buffers[i].active
                    env.hops += 1
                    sent_per_device[i] += env.element_count()
                    buffers[(i + 1) % g].stage(env)
                for i in range(g):
                    buffers[i].swap()
                steps += 1
        final_envs = {i: buffers[i].active for i in range(g)}
        for i in range(g):
            if final_envs[i].hops != (g if g > 1 else 0):
                raise RingDesyncError(
                    f"device {i} ended with a payload after "
                    f"{final_envs[i].hops} hops, expected {g}")
    else:
        timeout = deadlock_timeout if deadlock_timeout is not None else \
            DEADLOCK_HORIZON_ROUNDS * g * ROUND_QUANTUM_SECONDS
        channels = [RingChannel(i, (i + 1) % g, timeout) for i in range(g)]
        errors: list[BaseException] = []
        final_envs: dict[int, Envelope] = {}
        lock = threading.Lock()

        def worker(i: int) -> None:
            import time
            try:
                buf = DoubleBuffer(active=envs[i])
                for r in range(g):
                    flops, hbm = _device_round(cluster, i, buf.active, kind,
                                               trackers[i])
                    flops_per_round[i][r] = flops
                    hbm_per_device[i] += hbm
                    if delay_fn is not None:
                        time.sleep(delay_fn(i, r))
                    env = buf.active
                    sent_per_device[i] += env.element_count()
                    channels[i].send(env)
                    buf.stage(channels[(i - 1) % g].recv(expected_hops=r + 1))
                    buf.swap()
                with lock:
                    final_envs[i] = buf.active
            except BaseException as e:
                with lock:
                    errors.append(e)

        threads = [threading.Thread(target=worker, args=(i,), daemon=True)
                   for i in range(g)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=60.0)
        if errors:
            raise errors[0]
        if any(t.is_alive() for t in threads):
            raise DeadlockError("worker threads failed to finish")
        steps = g
        for i in range(g):
            if final_envs[i].hops != g:
                raise RingDesyncError(
                    f"device {i} ended with a payload after "
                    f"{final_envs[i].hops} hops, expected {g}")

    for i in range(g):
        env = final_envs[i]
        if env.origin != (i - start_offset) % g:
            raise RingDesyncError(
                f"device {i} ended with payload from {env.origin}, expected "
                f"{(i - start_offset) % g}")
        if sorted(env.visited) != sorted(range(g)):
            raise RingDesyncError(
                f"payload {env.origin} visited {env.visited}, expected every "
                f"device exactly once")

    if kind == "forward":
        for states in cluster.slices:
            for st in states:
                ring.finalize_forward(st)

    transfer_per_round = [
        [duration.transfer_time(transfer_bytes[i]) if g > 1 else 0.0
         for _ in range(g)]
        for i in range(g)
    ]
    compute_per_round = [[duration.compute_time(f) for f in flops_per_round[i]]
                         for i in range(g)]
    trace = build_schedule(compute_per_round, transfer_per_round, overlap)
    _finish_ledger(cluster, kind, ledger, sent_per_device, steps if g > 1 else 0,
                   hbm_per_device, trackers)

    result = PassResult(kind=kind, overlap=overlap, ledger=ledger, trace=trace,
                        compute_durations=compute_per_round,
                        transfer_durations=transfer_per_round)
    collected = _collect(cluster, kind, final_envs)
    if kind == "forward":
        result.outputs = collected
    else:
        result.grads = collected
    return result
