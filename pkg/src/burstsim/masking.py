"""Deterministic block sparsity masks.

A mask answers, for any rectangle of the score matrix given in global row and
column coordinates, whether that rectangle is fully computed, fully skipped,
or partially masked. Partial rectangles additionally expose a boolean
element-level map so the attention kernels can fill masked scores with -inf
before the row maximum is taken.

Three ingredients compose: an optional causal constraint (key position must
not exceed query position), an optional coarse block grid with explicitly
skipped cells, and an optional valid-column limit used when sequences are
zero-padded to a divisible length.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import MaskError


class Decision(Enum):
    COMPUTE = "compute"
    SKIP = "skip"
    PARTIAL = "partial"


@dataclass(frozen=True)
class BlockGrid:
    """Coarse allow/skip grid over the full score matrix."""

    n_query_blocks: int
    n_key_blocks: int
    skip: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.n_query_blocks < 1 or self.n_key_blocks < 1:
            raise MaskError("block grid needs at least one block per axis")
        for qb, kb in self.skip:
            if not (0 <= qb < self.n_query_blocks and 0 <= kb < self.n_key_blocks):
                raise MaskError(f"skip cell ({qb}, {kb}) outside grid")

    def _cells(self, lo: int, hi: int, total: int, n_blocks: int) -> list[int]:
        """Indices of grid cells intersecting [lo, hi) of an axis of length total."""
        out = []
        for k in range(n_blocks):
            b0 = (k * total) // n_blocks
            b1 = ((k + 1) * total) // n_blocks
            if b0 < hi and b1 > lo:
                out.append(k)
        return out

    def cell_bounds(self, idx: int, total: int, n_blocks: int) -> tuple[int, int]:
        return (idx * total) // n_blocks, ((idx + 1) * total) // n_blocks


@dataclass(frozen=True)
class BlockMask:
    """Composable mask: causal flag, optional grid, optional valid-column limit."""

    causal: bool = False
    grid: BlockGrid | None = None
    valid_cols: int | None = None
    valid_rows: int | None = None

    def is_trivial(self) -> bool:
        return not self.causal and self.grid is None and self.valid_cols is None

    def with_padding(self, valid_rows: int, valid_cols: int) -> "BlockMask":
        return replace(self, valid_rows=valid_rows, valid_cols=valid_cols)

    # -- rectangle-level decision ------------------------------------------

    def decision(self, r0: int, r1: int, c0: int, c1: int,
                 n_rows: int, n_cols: int) -> Decision:
        if r0 >= r1 or c0 >= c1:
            raise MaskError(f"empty rectangle [{r0},{r1})x[{c0},{c1})")
        full = True

        if self.valid_cols is not None:
            if c0 >= self.valid_cols:
                return Decision.SKIP
            if c1 > self.valid_cols:
                full = False

        if self.causal:
            if r1 - 1 < c0:
                return Decision.SKIP
            if not r0 >= c1 - 1:
                full = False

        if self.grid is not None:
            qcells = self.grid._cells(r0, r1, n_rows, self.grid.n_query_blocks)
            kcells = self.grid._cells(c0, c1, n_cols, self.grid.n_key_blocks)
            states = {(qb, kb) in self.grid.skip for qb in qcells for kb in kcells}
            if states == {True}:
                return Decision.SKIP
            if True in states:
                full = False

        return Decision.COMPUTE if full else Decision.PARTIAL

    # -- element-level map ----------------------------------------------------

    def allowed(self, r0: int, r1: int, c0: int, c1: int,
                n_rows: int, n_cols: int) -> np.ndarray:
        """Boolean (r1-r0) x (c1-c0) map; True where the score is computed."""
        rows = np.arange(r0, r1)
        cols = np.arange(c0, c1)
        out = np.ones((r1 - r0, c1 - c0), dtype=bool)
        if self.causal:
            out &= cols[None, :] <= rows[:, None]
        if self.valid_cols is not None:
            out &= cols[None, :] < self.valid_cols
        if self.grid is not None:
            for qb in self.grid._cells(r0, r1, n_rows, self.grid.n_query_blocks):
                ql, qh = self.grid.cell_bounds(qb, n_rows, self.grid.n_query_blocks)
                for kb in self.grid._cells(c0, c1, n_cols, self.grid.n_key_blocks):
                    if (qb, kb) not in self.grid.skip:
                        continue
                    kl, kh = self.grid.cell_bounds(kb, n_cols, self.grid.n_key_blocks)
                    rs = slice(max(ql, r0) - r0, min(qh, r1) - r0)
                    cs = slice(max(kl, c0) - c0, min(kh, c1) - c0)
                    out[rs, cs] = False
        return out

    # -- validation ----------------------------------------------------------

    def validate(self, n_rows: int, n_cols: int) -> None:
        """Reject masks that leave some real query row with no visible key."""
        if self.grid is not None:
            if n_rows % self.grid.n_query_blocks or n_cols % self.grid.n_key_blocks:
                raise MaskError(
                    f"grid {self.grid.n_query_blocks}x{self.grid.n_key_blocks} does not "
                    f"divide score matrix {n_rows}x{n_cols}")
        real_rows = self.valid_rows if self.valid_rows is not None else n_rows
        if real_rows == 0:
            return
        allowed = self.allowed(0, real_rows, 0, n_cols, n_rows, n_cols)
        uncovered = np.flatnonzero(~allowed.any(axis=1))
        if uncovered.size:
            raise MaskError(f"query row {int(uncovered[0])} has every key masked out")


def mask_from_spec(spec, n_rows: int | None = None) -> BlockMask | None:
    """Build a BlockMask from a config value.

    Accepts None / "none", "causal", a parsed JSON dict, or a path to a JSON
    file with keys n_query_blocks, n_key_blocks, skip (list of [qb, kb]) and
    an optional causal flag.
    """
    if spec is None or spec == "none":
        return None
    if spec == "causal":
        return BlockMask(causal=True)
    if isinstance(spec, (str, Path)):
        path = Path(spec)
        if not path.exists():
            raise MaskError(f"mask {spec!r} is neither 'none', 'causal', nor an existing file")
        try:
            spec = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise MaskError(f"mask file {path}: invalid JSON ({e})")
    if not isinstance(spec, dict):
        raise MaskError(f"unsupported mask spec {spec!r}")
    try:
        grid = BlockGrid(
            n_query_blocks=int(spec["n_query_blocks"]),
            n_key_blocks=int(spec["n_key_blocks"]),
            skip=frozenset((int(q), int(k)) for q, k in spec.get("skip", [])),
        )
    except KeyError as e:
        raise MaskError(f"mask spec missing key {e.args[0]!r}")
    return BlockMask(causal=bool(spec.get("causal", False)), grid=grid)
