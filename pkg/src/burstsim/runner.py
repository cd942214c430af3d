"""Run orchestration: config validation, input generation, oracle comparison.

Every entry point here returns a plain dict so the service layer and the CLI
can serialize it without further shaping. Reports are deterministic: the same
config and seed produce byte-identical JSON (sorted keys, fixed float repr),
which the test suite relies on.

Inputs are drawn from a counter-based 64-bit generator (Philox) seeded
through numpy's SeedSequence spawning, one independent stream per tensor, so
runs are reproducible within this package for a given seed. Comparisons
against the dense oracle never depend on the stream, only on both sides
seeing the same inputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import costs
from .dense import AttnProblem, backward_dense, forward_dense
from .errors import ConfigError
from .linalg import AllocationTracker, Matrix, dtype_for, track_allocations
from .local_attn import DEFAULT_SRAM_BYTES, TileSpec
from .masking import mask_from_spec
from .reference_ring import run_reference
from .sim import (CommLedger, DurationModel, build_cluster, build_schedule,
                  run_ring_pass)

SCHEMA_VERSION = 1

MODES = ("burst", "burst_no_lao", "ring_reference", "dense")
PRECISIONS = ("double", "single")
OVERLAPS = ("none", "double_buffer")
EXECUTORS = ("lockstep", "threaded")

DEFAULT_TOLERANCES = {
    # (forward, backward) max-abs error against the dense oracle
    "double": (1e-10, 1e-8),
    "single": (1e-4, 1e-3),
}


@dataclass
class RunConfig:
    """Everything one run needs; validated before any allocation happens."""

    seq: int = 16
    dim: int = 4
    heads: int = 2
    batch: int = 1
    gpus: int = 4
    seed: int = 0
    precision: str = "double"
    mode: str = "burst"
    mask: object = None
    tile_rows: int | None = None
    tile_cols: int | None = None
    overlap: str = "none"
    executor: str = "lockstep"
    pad: bool = False
    bandwidth: float = 1.0e9
    flops_rate: float = 1.0e12
    sram_bytes: int = DEFAULT_SRAM_BYTES
    tol_forward: float | None = None
    tol_backward: float | None = None

    def validate(self) -> None:
        for name in ("seq", "dim", "heads", "batch", "gpus"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, "
                              f"got {self.precision!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.overlap not in OVERLAPS:
            raise ConfigError(f"overlap must be one of {OVERLAPS}, "
                              f"got {self.overlap!r}")
        if self.executor not in EXECUTORS:
            raise ConfigError(f"executor must be one of {EXECUTORS}, "
                              f"got {self.executor!r}")
        if self.seq % self.gpus != 0 and not self.pad:
            raise ConfigError(f"gpus={self.gpus} does not divide seq={self.seq}; "
                              "enable pad to zero-fill the remainder")
        if self.gpus > self.seq:
            raise ConfigError(f"gpus={self.gpus} exceeds seq={self.seq}; "
                              "every device needs at least one query row")
        for name in ("tile_rows", "tile_cols"):
            v = getattr(self, name)
            if v is not None and (not isinstance(v, int) or v < 1):
                raise ConfigError(f"{name} must be a positive integer when given")
        if self.tile_cols is not None and self.tile_rows is None:
            raise ConfigError("tile_cols given without tile_rows")
        if self.bandwidth <= 0:
            raise ConfigError("bandwidth must be positive")
        if self.flops_rate <= 0:
            raise ConfigError("flops_rate must be positive")
        if self.sram_bytes < 1:
            raise ConfigError("sram_bytes must be positive")
        for name in ("tol_forward", "tol_backward"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive when given")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def tolerances(self) -> tuple[float, float]:
        fwd, bwd = DEFAULT_TOLERANCES[self.precision]
        return (self.tol_forward if self.tol_forward is not None else fwd,
                self.tol_backward if self.tol_backward is not None else bwd)

    def echo(self) -> dict:
        out = asdict(self)
        if isinstance(out["mask"], (dict, type(None))):
            return out
        out["mask"] = str(out["mask"])
        return out


def _tiles_for(cfg: RunConfig, partition_len: int) -> TileSpec | None:
    if cfg.mode != "burst":
        return None
    if cfg.tile_rows is not None:
        rows = min(cfg.tile_rows, partition_len)
        cols = min(cfg.tile_cols or cfg.tile_rows, partition_len)
        return TileSpec(rows, cols)
    elem = 8 if cfg.precision == "double" else 4
    return TileSpec.for_partition(partition_len, cfg.dim,
                                  sram_bytes=cfg.sram_bytes, elem_bytes=elem)


def generate_inputs(cfg: RunConfig):
    """Q, K, V and dO for batch*heads independent slices."""
    mask = mask_from_spec(cfg.mask)
    if mask is not None:
        mask.validate(cfg.seq, cfg.seq)
    dt = dtype_for(cfg.precision)
    n_slices = cfg.batch * cfg.heads
    children = np.random.SeedSequence(cfg.seed).spawn(4)
    streams = [np.random.Generator(np.random.Philox(c)) for c in children]
    raw = [g.standard_normal((n_slices, cfg.seq, cfg.dim)) for g in streams]
    scale = float(cfg.dim) ** -0.5
    problems = []
    do = []
    for s in range(n_slices):
        q, k, v, g = (a[s].astype(dt) for a in raw)
        problems.append(AttnProblem(Q=Matrix.from_array(q), K=Matrix.from_array(k),
                                    V=Matrix.from_array(v), scale=scale, mask=mask))
        do.append(Matrix.from_array(g))
    return problems, do


def _max_err(pairs) -> float:
    worst = 0.0
    for got, want in pairs:
        a = np.asarray(got, dtype=np.float64)
        b = np.asarray(want, dtype=np.float64)
        worst = max(worst, float(np.max(np.abs(a - b))) if a.size else 0.0)
    return worst


def _makespans(fwd_result, bwd_result) -> dict:
    out = {}
    for overlap in OVERLAPS:
        total = 0.0
        per_pass = {}
        for label, res in (("forward", fwd_result), ("backward", bwd_result)):
            if res is None:
                continue
            trace = build_schedule(res.compute_durations, res.transfer_durations,
                                   overlap)
            per_pass[label] = trace.makespan
            total += trace.makespan
        per_pass["total"] = total
        out[overlap] = per_pass
    return out


def run_verify(cfg: RunConfig) -> dict:
    """Run the configured mode, compare against the dense oracle, report."""
    cfg.validate()
    problems, do = generate_inputs(cfg)
    oracle_f = [forward_dense(p) for p in problems]
    oracle_b = [backward_dense(p, g) for p, g in zip(problems, do)]

    ledger = CommLedger()
    makespans = None
    if cfg.mode == "dense":
        tracker = AllocationTracker()
        with track_allocations(tracker):
            outputs = [(o.O, o.lse) for o in (forward_dense(p) for p in problems)]
            grads = [backward_dense(p, g) for p, g in zip(problems, do)]
        ledger.per_device_peak_activation = [tracker.peak_live_elements]
        ledger.peak_activation_elements = tracker.peak_live_elements
    elif cfg.mode == "ring_reference":
        outputs, grads, ledger = run_reference(problems, cfg.gpus,
                                               do_slices=do, pad=cfg.pad,
                                               ledger=ledger)
    else:
        n_total = cfg.seq if cfg.seq % cfg.gpus == 0 else \
            cfg.seq + (cfg.gpus - cfg.seq % cfg.gpus)
        tiles = _tiles_for(cfg, n_total // cfg.gpus)
        cluster = build_cluster(problems, cfg.gpus, tiles=tiles, pad=cfg.pad)
        duration = DurationModel(bandwidth_bytes=cfg.bandwidth,
                                 flops_rate=cfg.flops_rate)
        fwd = run_ring_pass(cluster, "forward", overlap=cfg.overlap,
                            executor=cfg.executor, duration=duration,
                            ledger=ledger)
        bwd = run_ring_pass(cluster, "backward", do_slices=do,
                            overlap=cfg.overlap, executor=cfg.executor,
                            duration=duration, ledger=ledger)
        outputs = fwd.outputs
        grads = bwd.grads
        makespans = _makespans(fwd, bwd)

    errors = {
        "o": _max_err((outputs[s][0].array, oracle_f[s].O.array)
                      for s in range(len(problems))),
        "lse": _max_err((outputs[s][1].array, oracle_f[s].lse.array)
                        for s in range(len(problems))),
        "dq": _max_err((grads[s][0].array, oracle_b[s][0].array)
                       for s in range(len(problems))),
        "dk": _max_err((grads[s][1].array, oracle_b[s][1].array)
                       for s in range(len(problems))),
        "dv": _max_err((grads[s][2].array, oracle_b[s][2].array)
                       for s in range(len(problems))),
    }
    tol_f, tol_b = cfg.tolerances()
    ok = (errors["o"] <= tol_f and errors["lse"] <= tol_f
          and errors["dq"] <= tol_b and errors["dk"] <= tol_b
          and errors["dv"] <= tol_b)

    return {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.echo(),
        "errors": errors,
        "tolerances": {"forward": tol_f, "backward": tol_b},
        "ledger": ledger.to_json(),
        "peak_activation_per_device": list(ledger.per_device_peak_activation),
        "makespan": makespans,
        "verdict": "pass" if ok else "fail",
    }


def run_sweep(cfg: RunConfig, gs: list[int], ns: list[int],
              cap: int = 64) -> list[dict]:
    """Measured ledger counts next to modeled costs over a (G, N) grid."""
    cfg.validate()
    if cfg.mode not in ("burst", "burst_no_lao"):
        raise ConfigError(f"sweep supports the streaming modes, got {cfg.mode!r}")
    if not gs or not ns:
        raise ConfigError("sweep grid must name at least one G and one N")
    if len(gs) * len(ns) > cap:
        raise ConfigError(f"sweep grid has {len(gs) * len(ns)} points, "
                          f"cap is {cap}")
    rows = []
    for g in gs:
        for n in ns:
            if n % g != 0:
                raise ConfigError(f"grid point G={g}, N={n}: gpus must divide seq")
            point = RunConfig(**{**cfg.echo(), "gpus": g, "seq": n})
            problems, do = generate_inputs(point)
            tiles = _tiles_for(point, n // g)
            cluster = build_cluster(problems, g, tiles=tiles)
            ledger = CommLedger()
            duration = DurationModel(bandwidth_bytes=cfg.bandwidth,
                                     flops_rate=cfg.flops_rate)
            fwd = run_ring_pass(cluster, "forward", duration=duration,
                                ledger=ledger)
            bwd = run_ring_pass(cluster, "backward", do_slices=do,
                                duration=duration, ledger=ledger)
            spec = costs.ModelSpec(B=cfg.batch, N=n, Z=cfg.heads, d=cfg.dim,
                                   sram_bytes=cfg.sram_bytes)
            cspec = costs.ClusterSpec(G=g, bandwidth=cfg.bandwidth)
            model_f, model_b = costs.communication_overheads(spec, cspec, "burst")
            ring_f, ring_b = costs.communication_overheads(spec, cspec, "ring")
            makespans = _makespans(fwd, bwd)
            rows.append({
                "G": g,
                "N": n,
                "measured_forward": ledger.elements_sent_forward,
                "modeled_forward": model_f,
                "measured_backward": ledger.elements_sent_backward,
                "modeled_backward": model_b,
                "forward_matches": ledger.elements_sent_forward == model_f,
                "backward_matches": ledger.elements_sent_backward == model_b,
                "ring_modeled_backward": ring_b,
                "burst_ring_backward_ratio": (model_b / ring_b) if ring_b else 0.0,
                "ring_steps": ledger.ring_steps,
                "peak_activation": ledger.peak_activation_elements,
                "makespan_none": makespans["none"]["total"],
                "makespan_double_buffer": makespans["double_buffer"]["total"],
            })
    return rows


def run_cost(cfg: RunConfig) -> dict:
    cfg.validate()
    spec = costs.ModelSpec(B=cfg.batch, N=cfg.seq, Z=cfg.heads, d=cfg.dim,
                           sram_bytes=cfg.sram_bytes)
    cluster = costs.ClusterSpec(G=cfg.gpus, bandwidth=cfg.bandwidth)
    report = costs.cost_report(spec, cluster)
    report["schema_version"] = SCHEMA_VERSION
    return report


def run_trace(cfg: RunConfig) -> dict:
    """Event timeline plus ledger for one forward+backward run."""
    cfg.validate()
    if cfg.mode not in ("burst", "burst_no_lao"):
        raise ConfigError(f"trace supports the streaming modes, got {cfg.mode!r}")
    problems, do = generate_inputs(cfg)
    n_total = cfg.seq if cfg.seq % cfg.gpus == 0 else \
        cfg.seq + (cfg.gpus - cfg.seq % cfg.gpus)
    tiles = _tiles_for(cfg, n_total // cfg.gpus)
    cluster = build_cluster(problems, cfg.gpus, tiles=tiles, pad=cfg.pad)
    duration = DurationModel(bandwidth_bytes=cfg.bandwidth,
                             flops_rate=cfg.flops_rate)
    ledger = CommLedger()
    fwd = run_ring_pass(cluster, "forward", overlap=cfg.overlap,
                        executor=cfg.executor, duration=duration, ledger=ledger)
    bwd = run_ring_pass(cluster, "backward", do_slices=do, overlap=cfg.overlap,
                        executor=cfg.executor, duration=duration, ledger=ledger)
    lines = []
    for label, res in (("forward", fwd), ("backward", bwd)):
        for ev in res.trace.events:
            lines.append(json.dumps({
                "pass": label, "device": ev.device, "kind": ev.kind,
                "t_virtual": ev.t_virtual, "round": ev.round,
            }, sort_keys=True))
    return {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.echo(),
        "events_ndjson": "\n".join(lines) + "\n",
        "ledger": ledger.to_json(),
        "makespan": _makespans(fwd, bwd),
    }


def report_to_json(report) -> str:
    """Canonical serialization; byte-identical for identical runs."""
    return json.dumps(report, sort_keys=True, indent=2) + "\n"
