"""Analytical overhead model for distributed attention strategies.

Every function here evaluates a closed-form expression literally, with leading
constants of 1, and reports model units (elements, accesses, virtual seconds),
never predicted wall clock. Each evaluated quantity is paired with the formula
string it came from so reports can be audited without reading this file.

Two different quantities are conventionally both written M: the per-device
SRAM size that appears in the tiled activation terms, and the bit width of one
tensor element that appears in the runtime expressions. They are separate
fields here (sram_bytes and bits_per_element).

Method keys: "ring" (ring-circulated attention that stores its score blocks),
"tp" (tensor parallelism over heads), "burst" (the streaming ring mode this
package simulates). Memory rows take an additional lao flag for the tiled
variants; "ring" with lao=True is rejected, since separating the K and V
circulations into two rounds leaves no single pass to tile over.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

from .errors import ConfigError

METHODS = ("ring", "tp", "burst")

FORMULAS = {
    ("param", "ring"): "4HZd",
    ("param", "tp"): "4HZd/G",
    ("param", "burst"): "4HZd",
    ("act", "ring", False): "4BZNd/G + BZN^2/G + BNH/G",
    ("act", "tp", False): "4BZNd/G + BZN^2/G + BNH",
    ("act", "tp", True): "4BZNd/G + BZN^2/((M/4d)^2 G) + BNH",
    ("act", "burst", False): "4BZNd/G + BZN^2/G^2 + BNH/G",
    ("act", "burst", True): "4BZNd/G + BZN^2/((M/4d)^2 G^2) + BNH/G",
    ("comm_f", "ring"): "2BZNd",
    ("comm_b", "ring"): "6BZNd",
    ("comm_f", "tp"): "4BZNd",
    ("comm_b", "tp"): "4BZNd",
    ("comm_f", "burst"): "2BZNd",
    ("comm_b", "burst"): "3BZNd + 2BZN",
    ("io", "ring"): "BZN^2/G + BZNd",
    ("io", "tp"): "BZN^2/((M/d^2) G)",
    ("io", "burst"): "BZN^2/((M/d^2) G)",
}


@dataclass(frozen=True)
class ModelSpec:
    """Shape of the transformer block the costs are evaluated for."""

    B: int
    N: int
    Z: int
    d: int
    H: int | None = None
    d_ffn: int | None = None
    z_per_device: int | None = None
    bits_per_element: int = 32
    sram_bytes: int = 4096

    def __post_init__(self):
        for name in ("B", "N", "Z", "d", "bits_per_element", "sram_bytes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("H", "d_ffn", "z_per_device"):
            val = getattr(self, name)
            if val is not None and val <= 0:
                raise ConfigError(f"{name} must be positive when given")

    @property
    def h(self) -> int:
        return self.H if self.H is not None else self.Z * self.d

    @property
    def ffn(self) -> int:
        return self.d_ffn if self.d_ffn is not None else 4 * self.h

    def consistency_warnings(self) -> list[str]:
        out = []
        if self.H is not None and self.H != self.Z * self.d:
            out.append(f"H={self.H} does not equal Z*d={self.Z * self.d}; "
                       "the model dimension and the head layout disagree")
        return out


@dataclass(frozen=True)
class ClusterSpec:
    G: int
    bandwidth: float = 1.0e9

    def __post_init__(self):
        if self.G < 1:
            raise ConfigError("G must be at least 1")
        if self.bandwidth <= 0:
            raise ConfigError("bandwidth must be positive")


def _check_method(method: str) -> None:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")


def memory_overheads(m: ModelSpec, c: ClusterSpec, method: str,
                     lao: bool = False) -> tuple[float, float]:
    """(parameter_elements, activation_elements) for one method row."""
    _check_method(method)
    if method == "ring" and lao:
        raise ConfigError("the two-round K/V circulation cannot be tiled; "
                          "there is no ring row with lao")
    B, N, Z, d, G = m.B, m.N, m.Z, m.d, c.G
    H = m.h
    tile = (m.sram_bytes / (4 * d)) ** 2
    if method == "ring":
        param = 4 * H * Z * d
        act = 4 * B * Z * N * d / G + B * Z * N ** 2 / G + B * N * H / G
    elif method == "tp":
        param = 4 * H * Z * d / G
        quad = (B * Z * N ** 2 / (tile * G)) if lao else (B * Z * N ** 2 / G)
        act = 4 * B * Z * N * d / G + quad + B * N * H
    else:
        param = 4 * H * Z * d
        quad = (B * Z * N ** 2 / (tile * G ** 2)) if lao \
            else (B * Z * N ** 2 / G ** 2)
        act = 4 * B * Z * N * d / G + quad + B * N * H / G
    return param, act


def communication_overheads(m: ModelSpec, c: ClusterSpec,
                            method: str) -> tuple[float, float]:
    """(forward_elements, backward_elements); zero on a single device."""
    _check_method(method)
    if c.G == 1:
        return 0.0, 0.0
    B, N, Z, d = m.B, m.N, m.Z, m.d
    if method == "ring":
        return 2 * B * Z * N * d, 6 * B * Z * N * d
    if method == "tp":
        return 4 * B * Z * N * d, 4 * B * Z * N * d
    return 2 * B * Z * N * d, 3 * B * Z * N * d + 2 * B * Z * N


def io_accesses(m: ModelSpec, c: ClusterSpec, method: str) -> float:
    """Modeled per-device HBM accesses; constants 1, units 'accesses'."""
    _check_method(method)
    B, N, Z, d, G = m.B, m.N, m.Z, m.d, c.G
    if method == "ring":
        return B * Z * N ** 2 / G + B * Z * N * d
    return B * Z * N ** 2 / ((m.sram_bytes / d ** 2) * G)


def runtime_tp(m: ModelSpec, c: ClusterSpec, t_attn: float,
               t_ffn: float) -> dict:
    """Total virtual runtime of one block under head-parallel execution.

    The per-collective time covers one all-gather or one reduce-scatter; four
    of them happen per block. z_per_device defaults to Z/G when not supplied.
    """
    B, N, d, G = m.B, m.N, m.d, c.G
    zp = m.z_per_device if m.z_per_device is not None else m.Z / G
    t_comm = (B * N * zp * d) * m.bits_per_element * (G - 1) / (c.bandwidth * G)
    total = 4 * t_comm + t_attn / G + t_ffn / G
    return {
        "t_comm": t_comm,
        "total": total,
        "formula": "T = 4 t_comm + T_attn/G + T_ffn/G; "
                   "t_comm = B N Z' d M (G-1)/(b G)",
    }


def runtime_burst(m: ModelSpec, c: ClusterSpec, t_attn_f: float,
                  t_attn_b: float, t_ffn: float) -> dict:
    """Total virtual runtime of one block under the streaming ring mode.

    N' is the per-device partition length N/G. Communication terms can hide
    entirely behind compute, hence the max() structure.
    """
    B, Z, d, G = m.B, m.Z, m.d, c.G
    n_p = m.N / G
    unit = m.bits_per_element * (G - 1) / (c.bandwidth * G)
    t_cf = 2 * B * n_p * Z * d * unit
    t_cb = (3 * B * n_p * Z * d + 2 * B * n_p * Z) * unit
    t_cw = (4 * m.h * Z * d + 2 * m.h * m.ffn) * unit
    total = max(t_attn_f, t_cf) + max(t_attn_b, t_cb) + t_ffn + t_cw
    return {
        "t_comm_attn_f": t_cf,
        "t_comm_attn_b": t_cb,
        "t_comm_weights": t_cw,
        "total": total,
        "formula": "T = max(T_attn_f, t_cf) + max(T_attn_b, t_cb) + T_ffn + t_cw",
    }


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

_ROWS = (
    ("ring", False),
    ("tp", False),
    ("tp", True),
    ("burst", False),
    ("burst", True),
)


def _row_label(method: str, lao: bool) -> str:
    return f"{method}+lao" if lao else method


def cost_report(m: ModelSpec, c: ClusterSpec) -> dict:
    """All method rows at one spec, with formula strings for auditing."""
    methods = {}
    for method, lao in _ROWS:
        param, act = memory_overheads(m, c, method, lao)
        fwd, bwd = communication_overheads(m, c, method)
        methods[_row_label(method, lao)] = {
            "parameter_memory": param,
            "parameter_formula": FORMULAS[("param", method)],
            "activation_memory": act,
            "activation_formula": FORMULAS[("act", method, lao)],
            "comm_forward": fwd,
            "comm_forward_formula": FORMULAS[("comm_f", method)],
            "comm_backward": bwd,
            "comm_backward_formula": FORMULAS[("comm_b", method)],
            "io_accesses": io_accesses(m, c, method),
            "io_formula": FORMULAS[("io", method)],
        }
    report = {
        "spec": {
            "B": m.B, "N": m.N, "Z": m.Z, "d": m.d, "H": m.h,
            "d_ffn": m.ffn, "bits_per_element": m.bits_per_element,
            "sram_bytes": m.sram_bytes, "G": c.G, "bandwidth": c.bandwidth,
        },
        "methods": methods,
        "units": "elements / accesses (model units, constants 1)",
    }
    warnings = m.consistency_warnings()
    if warnings:
        report["warnings"] = warnings
    return report


def cost_grid(m: ModelSpec, gs: list[int], ns: list[int],
              bandwidth: float = 1.0e9) -> list[dict]:
    """One flat row per (method, G, N) point, ready for the CSV emitter."""
    rows = []
    for g in gs:
        for n in ns:
            spec = ModelSpec(B=m.B, N=n, Z=m.Z, d=m.d, H=m.H, d_ffn=m.d_ffn,
                             z_per_device=m.z_per_device,
                             bits_per_element=m.bits_per_element,
                             sram_bytes=m.sram_bytes)
            cl = ClusterSpec(G=g, bandwidth=bandwidth)
            for method, lao in _ROWS:
                param, act = memory_overheads(spec, cl, method, lao)
                fwd, bwd = communication_overheads(spec, cl, method)
                rows.append({
                    "method": _row_label(method, lao),
                    "G": g,
                    "N": n,
                    "parameter_memory": param,
                    "activation_memory": act,
                    "comm_forward": fwd,
                    "comm_backward": bwd,
                    "io_accesses": io_accesses(spec, cl, method),
                })
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def report_to_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"
