"""Desk-scale simulator for exact attention distributed over a device ring.

The library splits a sequence across G simulated devices, circulates K/V
(forward) or a traveling gradient payload (backward) around the ring, merges
partial results with an online softmax, and accounts for every transmitted
element, every modeled HBM access, and the virtual-time schedule with or
without double-buffered overlap. A dense oracle and an analytical cost model
close the loop: anything the simulator measures can be checked against a
formula, and anything the formulas claim can be checked against a run.
"""

__version__ = "0.1.0"

from .costs import (ClusterSpec, ModelSpec, communication_overheads,
                    cost_report, io_accesses, memory_overheads, runtime_burst,
                    runtime_tp)
from .dense import AttnOutput, AttnProblem, backward_dense, finite_difference_grad, forward_dense
from .errors import (BurstSimError, ConfigError, DeadlockError, MaskError,
                     MissingForwardError, NonFiniteError, RingDesyncError,
                     ShapeError)
from .linalg import AllocationTracker, Matrix, Vector, track_allocations
from .local_attn import PartialAttn, TileSpec, local_forward_tiled, local_forward_untiled
from .masking import BlockGrid, BlockMask, Decision, mask_from_spec
from .reference_ring import run_reference
from .runner import (RunConfig, generate_inputs, run_cost, run_sweep,
                     run_trace, run_verify)
from .sim import (CommLedger, DurationModel, ScheduleTrace, SimCluster,
                  build_cluster, build_schedule, measure_overlap, run_ring_pass)

__all__ = [
    "__version__",
    "AllocationTracker", "AttnOutput", "AttnProblem", "BlockGrid", "BlockMask",
    "BurstSimError", "ClusterSpec", "CommLedger", "ConfigError",
    "DeadlockError", "Decision", "DurationModel", "MaskError", "Matrix",
    "MissingForwardError", "ModelSpec", "NonFiniteError", "PartialAttn",
    "RingDesyncError", "RunConfig", "ScheduleTrace", "ShapeError",
    "SimCluster", "TileSpec", "Vector",
    "backward_dense", "build_cluster", "build_schedule",
    "communication_overheads", "cost_report", "finite_difference_grad",
    "forward_dense", "generate_inputs", "io_accesses",
    "local_forward_tiled", "local_forward_untiled", "mask_from_spec",
    "measure_overlap", "memory_overheads", "run_cost", "run_reference",
    "run_ring_pass", "run_sweep", "run_trace", "run_verify", "runtime_burst",
    "runtime_tp", "track_allocations",
]
