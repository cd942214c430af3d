"""Kernels against slow, independently written references.

The matmul oracle is a bare triple loop; the row-sum oracle uses Kahan
compensation. Neither shares a line of code with the module under test.
"""

import math

import numpy as np
import pytest

from burstsim.errors import NonFiniteError, ShapeError
from burstsim.linalg import (AllocationTracker, Matrix, Vector, add,
                             bytes_per_element, div_rows, dtype_for, exp,
                             hadamard, matmul, matmul_transposed, max_abs_diff,
                             mul_rows, rowmax, rowsum, scale, softmax_rows,
                             sub, sub_rows, track_allocations, transpose, vadd,
                             vexp, vlog, vmax, vmul, vsub)


def triple_loop_matmul(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i][t] * b[t][j]
            out[i][j] = acc
    return out


def kahan_rowsum(rows):
    out = []
    for row in rows:
        acc = 0.0
        c = 0.0
        for x in row:
            y = x - c
            t = acc + y
            c = (t - acc) - y
            acc = t
        out.append(acc)
    return out


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("shape", [(1, 1, 1), (3, 2, 4), (5, 7, 3)])
def test_matmul_against_triple_loop(make_rng, seed, shape):
    n, k, m = shape
    rng = make_rng(seed)
    a = Matrix.from_array(rng.standard_normal((n, k)))
    b = Matrix.from_array(rng.standard_normal((k, m)))
    got = matmul(a, b).to_lists()
    want = triple_loop_matmul(a.to_lists(), b.to_lists())
    assert np.allclose(got, want, atol=1e-12, rtol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_matmul_transposed_matches_explicit_transpose(make_rng, seed):
    rng = make_rng(seed)
    a = Matrix.from_array(rng.standard_normal((4, 6)))
    b = Matrix.from_array(rng.standard_normal((5, 6)))
    direct = matmul_transposed(a, b)
    via_t = matmul(a, transpose(b))
    assert max_abs_diff(direct, via_t) == 0.0


@pytest.mark.parametrize("rows,cols", [(1, 1), (4, 9), (7, 23)])
def test_rowsum_against_kahan(make_rng, rows, cols):
    rng = make_rng(rows * 31 + cols)
    a = Matrix.from_array(rng.standard_normal((rows, cols)) * 100)
    got = rowsum(a).to_list()
    want = kahan_rowsum(a.to_lists())
    assert np.allclose(got, want, atol=1e-10)


def test_softmax_hand_value():
    # exp(0) = 1, exp(ln 3) = 3, so the row normalizes to [1/4, 3/4]
    a = Matrix.from_rows([[0.0, math.log(3.0)]])
    got = softmax_rows(a).to_lists()[0]
    assert got[0] == pytest.approx(0.25, abs=1e-15)
    assert got[1] == pytest.approx(0.75, abs=1e-15)


def test_softmax_rows_sum_to_one(make_rng):
    a = Matrix.from_array(make_rng(9).standard_normal((6, 11)) * 50)
    s = softmax_rows(a)
    assert np.allclose(rowsum(s).to_list(), [1.0] * 6, atol=1e-12)


def test_softmax_overflow_guarded():
    a = Matrix.from_rows([[1e4, 1e4 + 1.0]])
    s = softmax_rows(a).to_lists()[0]
    assert all(math.isfinite(x) for x in s)
    assert s[1] > s[0]


def test_elementwise_ops(make_rng):
    rng = make_rng(2)
    a = Matrix.from_array(rng.standard_normal((3, 4)))
    b = Matrix.from_array(rng.standard_normal((3, 4)))
    assert np.allclose(add(a, b).array, a.array + b.array)
    assert np.allclose(sub(a, b).array, a.array - b.array)
    assert np.allclose(hadamard(a, b).array, a.array * b.array)
    assert np.allclose(scale(a, 2.5).array, a.array * 2.5)
    assert np.allclose(exp(a).array, np.exp(a.array))


def test_row_broadcast_ops(make_rng):
    rng = make_rng(3)
    a = Matrix.from_array(rng.standard_normal((4, 5)))
    v = Vector(rng.standard_normal(4))
    assert np.allclose(sub_rows(a, v).array, a.array - v.array[:, None])
    assert np.allclose(mul_rows(a, v).array, a.array * v.array[:, None])
    w = Vector(np.abs(rng.standard_normal(4)) + 0.5)
    assert np.allclose(div_rows(a, w).array, a.array / w.array[:, None])


def test_div_rows_rejects_zero():
    a = Matrix.from_rows([[1.0], [2.0]])
    with pytest.raises(ShapeError):
        div_rows(a, Vector([1.0, 0.0]))


def test_vector_ops(make_rng):
    rng = make_rng(4)
    u = Vector(rng.standard_normal(6))
    w = Vector(rng.standard_normal(6))
    assert np.allclose(vadd(u, w).array, u.array + w.array)
    assert np.allclose(vsub(u, w).array, u.array - w.array)
    assert np.allclose(vmul(u, w).array, u.array * w.array)
    assert np.allclose(vmax(u, w).array, np.maximum(u.array, w.array))
    assert np.allclose(vexp(u).array, np.exp(u.array))
    pos = Vector(np.abs(rng.standard_normal(6)) + 0.1)
    assert np.allclose(vlog(pos).array, np.log(pos.array))


def test_vlog_rejects_nonpositive():
    with pytest.raises((ShapeError, NonFiniteError)):
        vlog(Vector([1.0, 0.0]))


def test_rowmax_allows_neg_inf():
    a = Matrix.from_rows([[-np.inf, -np.inf]])
    assert rowmax(a).to_list() == [-np.inf]


def test_rowmax_rejects_empty_rows():
    with pytest.raises(ShapeError):
        rowmax(Matrix.zeros(2, 0))


def test_matmul_shape_mismatch():
    a = Matrix.zeros(2, 3)
    b = Matrix.zeros(4, 5)
    with pytest.raises(ShapeError):
        matmul(a, b)


def test_nonfinite_rejected():
    a = Matrix.from_rows([[1.0, 2.0]])
    b = Matrix.from_rows([[1e308], [1e308]])
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        matmul(scale(a, 1e308), b)


def test_matrix_is_immutable(make_rng):
    a = Matrix.from_array(make_rng(5).standard_normal((2, 2)))
    with pytest.raises((ValueError, RuntimeError)):
        a.array[0, 0] = 99.0


def test_matrix_from_array_copies():
    src = np.ones((2, 2))
    m = Matrix.from_array(src)
    src[0, 0] = 7.0
    assert m.array[0, 0] == 1.0


def test_row_block_bounds():
    m = Matrix.zeros(4, 2)
    blk = m.row_block(1, 3)
    assert (blk.rows, blk.cols) == (2, 2)
    with pytest.raises(ShapeError):
        m.row_block(2, 6)


def test_dtype_helpers():
    assert dtype_for("double") == np.dtype(np.float64)
    assert dtype_for("single") == np.dtype(np.float32)
    assert bytes_per_element(np.dtype(np.float64)) == 8
    assert bytes_per_element(np.dtype(np.float32)) == 4
    with pytest.raises(ShapeError):
        dtype_for("half")


def test_unsupported_matrix_dtype():
    with pytest.raises(ShapeError):
        Matrix.from_array(np.zeros((2, 2), dtype=np.int64))


class TestAllocationTracker:
    def test_notes_shapes_and_totals(self):
        tr = AllocationTracker()
        with track_allocations(tr):
            Matrix.zeros(3, 4)
            Vector.zeros(5)
        assert (3, 4) in tr.shapes
        assert (5, 1) in tr.shapes
        assert tr.total_elements == 17

    def test_live_gauge_falls_when_buffers_die(self):
        tr = AllocationTracker()
        with track_allocations(tr):
            a = Matrix.zeros(10, 10)
            peak_holding = tr.live_elements
            del a
            import gc
            gc.collect()
            low = tr.live_elements
        assert peak_holding == 100
        assert low == 0
        assert tr.peak_live_elements == 100

    def test_count_shape(self):
        tr = AllocationTracker()
        with track_allocations(tr):
            Matrix.zeros(2, 2)
            Matrix.zeros(2, 2)
            Matrix.zeros(3, 3)
        assert tr.count_shape(2, 2) == 2
        assert tr.count_shape(3, 3) == 1
        assert tr.count_shape(9, 9) == 0

    def test_nesting_restores_outer_tracker(self):
        outer = AllocationTracker()
        inner = AllocationTracker()
        with track_allocations(outer):
            Matrix.zeros(1, 1)
            with track_allocations(inner):
                Matrix.zeros(2, 2)
            Matrix.zeros(1, 2)
        assert outer.total_elements == 3
        assert inner.total_elements == 4


def test_matmul_reduction_is_deterministic(make_rng):
    rng = make_rng(11)
    a = Matrix.from_array(rng.standard_normal((17, 13)))
    b = Matrix.from_array(rng.standard_normal((13, 7)))
    first = matmul(a, b)
    for _ in range(5):
        assert max_abs_diff(matmul(a, b), first) == 0.0
