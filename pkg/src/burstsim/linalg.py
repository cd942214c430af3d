"""Small dense linear-algebra substrate used by every numeric module.

Matrices are row-major, immutable after construction, and carry an explicit
dtype (float64 by default, float32 selectable). Every public operation
validates shapes and checks that its result is finite, so overflow surfaces
as an error instead of silently propagating NaN/Inf.

Reductions delegate to NumPy, whose reduction order is a fixed deterministic
function of the operand shape. Together with immutability this makes every
computation in the package bit-reproducible for a given seed and device count.

Allocation instrumentation: while a tracker is active (``track_allocations``),
each new Matrix/Vector buffer is recorded with its shape, and a live-element
gauge is maintained so tests can assert peak intermediate footprints.
"""

from __future__ import annotations

import weakref
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

DTYPES = {"double": np.float64, "single": np.float32}


def dtype_for(precision: str) -> np.dtype:
    try:
        return np.dtype(DTYPES[precision])
    except KeyError:
        raise ShapeError(f"unknown precision {precision!r}, expected one of {sorted(DTYPES)}")


def bytes_per_element(dtype: np.dtype) -> int:
    return np.dtype(dtype).itemsize


# ---------------------------------------------------------------------------
# Allocation tracking
# ---------------------------------------------------------------------------

class AllocationTracker:
    """Records every tracked buffer allocation and a live-element gauge.

    ``shapes`` keeps one (rows, cols) entry per allocation (vectors count as
    (n, 1)). ``peak_live_elements`` is the high-water mark of elements alive
    simultaneously; buffers are released when garbage collected, which under
    CPython's reference counting happens as soon as the last reference dies.
    """

    def __init__(self) -> None:
        self.shapes: list[tuple[int, int]] = []
        self.live_elements: int = 0
        self.peak_live_elements: int = 0
        self.total_elements: int = 0

    def note(self, rows: int, cols: int, buf: object | None = None) -> None:
        n = rows * cols
        self.shapes.append((rows, cols))
        self.total_elements += n
        self.live_elements += n
        if self.live_elements > self.peak_live_elements:
            self.peak_live_elements = self.live_elements
        if buf is not None:
            weakref.finalize(buf, self._release, n)

    def _release(self, n: int) -> None:
        self.live_elements -= n

    def count_shape(self, rows: int, cols: int) -> int:
        return sum(1 for s in self.shapes if s == (rows, cols))


_ACTIVE_TRACKER: ContextVar[AllocationTracker | None] = ContextVar(
    "burstsim_allocation_tracker", default=None
)


def active_tracker() -> AllocationTracker | None:
    return _ACTIVE_TRACKER.get()


def note_allocation(rows: int, cols: int, buf: object | None = None) -> None:
    """Record an allocation made outside the Matrix/Vector constructors."""
    tracker = _ACTIVE_TRACKER.get()
    if tracker is not None:
        tracker.note(rows, cols, buf)


@contextmanager
def track_allocations(tracker: AllocationTracker | None = None):
    t = tracker if tracker is not None else AllocationTracker()
    token = _ACTIVE_TRACKER.set(t)
    try:
        yield t
    finally:
        _ACTIVE_TRACKER.reset(token)


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class Matrix:
    """Immutable row-major 2-D array of float64 or float32."""

    __slots__ = ("_a", "__weakref__")

    def __init__(self, rows: int, cols: int, data: Sequence[float] | None = None,
                 dtype: np.dtype | type = np.float64):
        if rows < 0 or cols < 0:
            raise ShapeError(f"negative dimensions ({rows}, {cols})")
        dt = np.dtype(dtype)
        if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
            raise ShapeError(f"unsupported dtype {dt}")
        if data is None:
            arr = np.zeros((rows, cols), dtype=dt)
        else:
            arr = np.asarray(data, dtype=dt).reshape(rows, cols).copy()
        note_allocation(rows, cols, arr)
        self._a = _freeze(arr)

    # construction helpers ---------------------------------------------------

    @classmethod
    def zeros(cls, rows: int, cols: int, dtype: np.dtype | type = np.float64) -> "Matrix":
        return cls(rows, cols, None, dtype)

    @classmethod
    def from_rows(cls, rows: Iterable[Iterable[float]],
                  dtype: np.dtype | type = np.float64) -> "Matrix":
        data = [list(r) for r in rows]
        n = len(data)
        m = len(data[0]) if n else 0
        if any(len(r) != m for r in data):
            raise ShapeError("ragged rows")
        return cls(n, m, [x for r in data for x in r], dtype)

    @classmethod
    def from_array(cls, arr: np.ndarray, dtype: np.dtype | type | None = None) -> "Matrix":
        a = np.asarray(arr)
        if a.ndim != 2:
            raise ShapeError(f"expected 2-D array, got ndim={a.ndim}")
        dt = np.dtype(dtype) if dtype is not None else a.dtype
        return cls(a.shape[0], a.shape[1], a.reshape(-1), dt)

    @classmethod
    def _adopt(cls, arr: np.ndarray) -> "Matrix":
        """Wrap a freshly built private buffer without copying.

        The caller must hand over ownership; the buffer is frozen here. The
        allocation must already have been recorded via ``note_allocation``.
        """
        self = object.__new__(cls)
        self._a = _freeze(arr)
        return self

    # accessors ----------------------------------------------------------------

    @property
    def rows(self) -> int:
        return self._a.shape[0]

    @property
    def cols(self) -> int:
        return self._a.shape[1]

    @property
    def dtype(self) -> np.dtype:
        return self._a.dtype

    @property
    def array(self) -> np.ndarray:
        """Read-only NumPy view of the underlying buffer."""
        return self._a

    def __getitem__(self, idx):
        return self._a[idx]

    def row_block(self, r0: int, r1: int) -> "Matrix":
        """Copy of rows [r0, r1); the copy is a tracked allocation."""
        if not (0 <= r0 <= r1 <= self.rows):
            raise ShapeError(f"row block [{r0}, {r1}) out of range for {self.rows} rows")
        return Matrix.from_array(self._a[r0:r1])

    def to_lists(self) -> list[list[float]]:
        return self._a.tolist()

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols}, dtype={self._a.dtype})"


class Vector:
    """Immutable 1-D array; houses row statistics (rowmax, rowsum, lse, ...)."""

    __slots__ = ("_a", "__weakref__")

    def __init__(self, data: Sequence[float] | np.ndarray,
                 dtype: np.dtype | type = np.float64):
        arr = np.asarray(data, dtype=np.dtype(dtype)).reshape(-1).copy()
        note_allocation(arr.shape[0], 1, arr)
        self._a = _freeze(arr)

    @classmethod
    def zeros(cls, n: int, dtype: np.dtype | type = np.float64) -> "Vector":
        return cls(np.zeros(n, dtype=np.dtype(dtype)), dtype)

    @classmethod
    def full(cls, n: int, value: float, dtype: np.dtype | type = np.float64) -> "Vector":
        return cls(np.full(n, value, dtype=np.dtype(dtype)), dtype)

    @classmethod
    def _adopt(cls, arr: np.ndarray) -> "Vector":
        self = object.__new__(cls)
        self._a = _freeze(arr)
        return self

    @property
    def n(self) -> int:
        return self._a.shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self._a.dtype

    @property
    def array(self) -> np.ndarray:
        return self._a

    def __getitem__(self, idx):
        return self._a[idx]

    def to_list(self) -> list[float]:
        return self._a.tolist()

    def __repr__(self) -> str:
        return f"Vector({self.n}, dtype={self._a.dtype})"


# ---------------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------------

def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


def _same_dtype(a, b, op: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")


def _new_matrix(arr: np.ndarray, op: str) -> Matrix:
    _ensure_finite(arr, op)
    note_allocation(arr.shape[0], arr.shape[1], arr)
    return Matrix._adopt(arr)


def _new_vector(arr: np.ndarray, op: str, check: bool = True) -> Vector:
    if check:
        _ensure_finite(arr, op)
    note_allocation(arr.shape[0], 1, arr)
    return Vector._adopt(arr)


# ---------------------------------------------------------------------------
# Matrix operations
# ---------------------------------------------------------------------------

def matmul(a: Matrix, b: Matrix) -> Matrix:
    """a @ b with exact shape checking."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ ({a.cols} vs {b.rows})")
    _same_dtype(a, b, "matmul")
    return _new_matrix(a.array @ b.array, "matmul")


def matmul_transposed(a: Matrix, b: Matrix) -> Matrix:
    """a @ b.T without materializing the transpose."""
    if a.cols != b.cols:
        raise ShapeError(f"matmul_transposed: widths differ ({a.cols} vs {b.cols})")
    _same_dtype(a, b, "matmul_transposed")
    return _new_matrix(a.array @ b.array.T, "matmul_transposed")


def transpose(a: Matrix) -> Matrix:
    return _new_matrix(a.array.T.copy(), "transpose")


def add(a: Matrix, b: Matrix) -> Matrix:
    if (a.rows, a.cols) != (b.rows, b.cols):
        raise ShapeError(f"add: shapes differ ({a.rows}x{a.cols} vs {b.rows}x{b.cols})")
    _same_dtype(a, b, "add")
    return _new_matrix(a.array + b.array, "add")


def sub(a: Matrix, b: Matrix) -> Matrix:
    if (a.rows, a.cols) != (b.rows, b.cols):
        raise ShapeError(f"sub: shapes differ ({a.rows}x{a.cols} vs {b.rows}x{b.cols})")
    _same_dtype(a, b, "sub")
    return _new_matrix(a.array - b.array, "sub")


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    if (a.rows, a.cols) != (b.rows, b.cols):
        raise ShapeError(f"hadamard: shapes differ ({a.rows}x{a.cols} vs {b.rows}x{b.cols})")
    _same_dtype(a, b, "hadamard")
    return _new_matrix(a.array * b.array, "hadamard")


def scale(a: Matrix, s: float) -> Matrix:
    return _new_matrix(a.array * a.dtype.type(s), "scale")


def exp(a: Matrix) -> Matrix:
    return _new_matrix(np.exp(a.array), "exp")


def rowmax(a: Matrix) -> Vector:
    """Per-row maximum; errors on a zero-column matrix."""
    if a.cols == 0:
        raise ShapeError("rowmax: matrix has no columns")
    return _new_vector(a.array.max(axis=1), "rowmax", check=False)


def rowsum(a: Matrix) -> Vector:
    if a.cols == 0:
        raise ShapeError("rowsum: matrix has no columns")
    return _new_vector(a.array.sum(axis=1), "rowsum")


def softmax_rows(a: Matrix) -> Matrix:
    """Row-wise softmax, shifted by the row maximum for stability."""
    if a.rows == 0 or a.cols == 0:
        raise ShapeError("softmax_rows: empty matrix")
    m = a.array.max(axis=1, keepdims=True)
    p = np.exp(a.array - m)
    p /= p.sum(axis=1, keepdims=True)
    return _new_matrix(p, "softmax_rows")


def sub_rows(a: Matrix, v: Vector) -> Matrix:
    """result[i][j] = a[i][j] - v[i] (vector broadcast across each row)."""
    if a.rows != v.n:
        raise ShapeError(f"sub_rows: {a.rows} rows vs vector length {v.n}")
    _same_dtype(a, v, "sub_rows")
    return _new_matrix(a.array - v.array[:, None], "sub_rows")


def mul_rows(a: Matrix, v: Vector) -> Matrix:
    """result[i][j] = a[i][j] * v[i]."""
    if a.rows != v.n:
        raise ShapeError(f"mul_rows: {a.rows} rows vs vector length {v.n}")
    _same_dtype(a, v, "mul_rows")
    return _new_matrix(a.array * v.array[:, None], "mul_rows")


def div_rows(a: Matrix, v: Vector) -> Matrix:
    """result[i][j] = a[i][j] / v[i]; errors if any v[i] == 0."""
    if a.rows != v.n:
        raise ShapeError(f"div_rows: {a.rows} rows vs vector length {v.n}")
    _same_dtype(a, v, "div_rows")
    if np.any(v.array == 0):
        raise ShapeError("div_rows: zero divisor")
    return _new_matrix(a.array / v.array[:, None], "div_rows")


# ---------------------------------------------------------------------------
# Vector operations
# ---------------------------------------------------------------------------

def _vshape(u: Vector, w: Vector, op: str) -> None:
    if u.n != w.n:
        raise ShapeError(f"{op}: lengths differ ({u.n} vs {w.n})")
    _same_dtype(u, w, op)


def vadd(u: Vector, w: Vector) -> Vector:
    _vshape(u, w, "vadd")
    return _new_vector(u.array + w.array, "vadd")


def vsub(u: Vector, w: Vector) -> Vector:
    _vshape(u, w, "vsub")
    return _new_vector(u.array - w.array, "vsub")


def vmul(u: Vector, w: Vector) -> Vector:
    _vshape(u, w, "vmul")
    return _new_vector(u.array * w.array, "vmul")


def vmax(u: Vector, w: Vector) -> Vector:
    _vshape(u, w, "vmax")
    return _new_vector(np.maximum(u.array, w.array), "vmax", check=False)


def vexp(u: Vector) -> Vector:
    return _new_vector(np.exp(u.array), "vexp")


def vlog(u: Vector) -> Vector:
    if np.any(u.array <= 0):
        raise ShapeError("vlog: nonpositive input")
    return _new_vector(np.log(u.array), "vlog")


def vscale(u: Vector, s: float) -> Vector:
    return _new_vector(u.array * u.dtype.type(s), "vscale")


# ---------------------------------------------------------------------------
# Comparison helpers
# ---------------------------------------------------------------------------

def max_abs_diff(a: Matrix, b: Matrix) -> float:
    if (a.rows, a.cols) != (b.rows, b.cols):
        raise ShapeError(f"max_abs_diff: shapes differ ({a.rows}x{a.cols} vs {b.rows}x{b.cols})")
    if a.rows * a.cols == 0:
        return 0.0
    return float(np.max(np.abs(a.array.astype(np.float64) - b.array.astype(np.float64))))


def vec_max_abs_diff(u: Vector, w: Vector) -> float:
    if u.n != w.n:
        raise ShapeError(f"vec_max_abs_diff: lengths differ ({u.n} vs {w.n})")
    if u.n == 0:
        return 0.0
    return float(np.max(np.abs(u.array.astype(np.float64) - w.array.astype(np.float64))))
