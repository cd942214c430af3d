"""Streaming kernels: the merge recurrence and tiled/untiled equivalence."""

import math

import numpy as np
import pytest

from burstsim.dense import AttnProblem, backward_dense, forward_dense
from burstsim.errors import MaskError, ShapeError
from burstsim.linalg import AllocationTracker, Matrix, Vector, track_allocations
from burstsim.local_attn import (DEFAULT_SRAM_BYTES, PartialAttn, TileSpec,
                                 local_backward, local_forward_tiled,
                                 local_forward_untiled)
from burstsim.masking import BlockGrid, BlockMask


class TestPartialAttn:
    def test_merge_hand_value(self):
        # states (m=1, l=2) and (m=3, l=4) merge to m=3,
        # l = 2*e^(1-3) + 4*e^0 = 2e^-2 + 4
        a = PartialAttn(o=np.array([[2.0]]), m=np.array([1.0]),
                        l=np.array([2.0]))
        b = PartialAttn(o=np.array([[8.0]]), m=np.array([3.0]),
                        l=np.array([4.0]))
        a.merge(b)
        assert a.m[0] == 3.0
        assert a.l[0] == pytest.approx(4.270670566473225, abs=1e-15)
        assert a.o[0, 0] == pytest.approx(2.0 * math.exp(-2.0) + 8.0,
                                          abs=1e-14)

    def test_merge_with_empty_is_exact_passthrough(self):
        rng = np.random.default_rng(0)
        o = rng.standard_normal((3, 2))
        m = rng.standard_normal(3)
        l = np.abs(rng.standard_normal(3)) + 0.5
        state = PartialAttn.empty(3, 2)
        other = PartialAttn(o=o.copy(), m=m.copy(), l=l.copy())
        state.merge(other)
        assert np.array_equal(state.o, o)
        assert np.array_equal(state.m, m)
        assert np.array_equal(state.l, l)

    def test_merge_is_commutative_in_value(self):
        rng = np.random.default_rng(1)
        def fresh(seed):
            r = np.random.default_rng(seed)
            return PartialAttn(o=r.standard_normal((4, 3)),
                               m=r.standard_normal(4),
                               l=np.abs(r.standard_normal(4)) + 0.1)
        ab = fresh(10); ab.merge(fresh(20))
        ba = fresh(20); ba.merge(fresh(10))
        assert np.allclose(ab.o, ba.o, atol=1e-14)
        assert np.allclose(ab.m, ba.m)
        assert np.allclose(ab.l, ba.l, atol=1e-14)

    def test_merge_is_associative_in_value(self):
        def fresh(seed):
            r = np.random.default_rng(seed)
            return PartialAttn(o=r.standard_normal((2, 2)),
                               m=r.standard_normal(2),
                               l=np.abs(r.standard_normal(2)) + 0.1)
        left = fresh(1); left.merge(fresh(2)); left.merge(fresh(3))
        inner = fresh(2); inner.merge(fresh(3))
        right = fresh(1); right.merge(inner)
        assert np.allclose(left.o, right.o, atol=1e-13)
        assert np.allclose(left.l, right.l, atol=1e-13)

    def test_empty_state_invariant(self):
        s = PartialAttn.empty(4, 3)
        assert np.isneginf(s.m).all()
        assert (s.l == 0).all()
        assert not s.o.any()

    def test_finalize_normalizes_once(self):
        s = PartialAttn(o=np.array([[6.0, 9.0]]), m=np.array([0.0]),
                        l=np.array([3.0]))
        o, lse = s.finalize()
        assert np.allclose(o.array, [[2.0, 3.0]])
        assert lse.to_list() == pytest.approx([math.log(3.0)])

    def test_finalize_rejects_unvisited_rows(self):
        with pytest.raises(MaskError):
            PartialAttn.empty(2, 2).finalize()


class TestTileSpec:
    def test_sram_derivation(self):
        # tile side = sram_bytes / (4 * d * elem_bytes), clamped to partition
        t = TileSpec.for_partition(64, 4, sram_bytes=512, elem_bytes=8)
        assert t.tile_rows == t.tile_cols == 4
        t = TileSpec.for_partition(2, 4, sram_bytes=512, elem_bytes=8)
        assert t.tile_rows == 2
        t = TileSpec.for_partition(64, 1024, sram_bytes=512, elem_bytes=8)
        assert t.tile_rows == 1  # never zero

    def test_default_budget(self):
        t = TileSpec.for_partition(1024, 8)
        assert t.tile_rows == DEFAULT_SRAM_BYTES // (4 * 8 * 8)

    def test_rejects_degenerate(self):
        with pytest.raises(ShapeError):
            TileSpec(0, 4)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("n,d", [(8, 4), (12, 5), (16, 8)])
def test_untiled_matches_dense(make_problem, seed, n, d):
    p, _ = make_problem(n, d, seed)
    out = forward_dense(p)
    part = local_forward_untiled(p.Q, p.K, p.V, p.scale)
    o, lse = part.finalize()
    assert np.array_equal(o.array, out.O.array)
    assert np.array_equal(lse.array, out.lse.array)


@pytest.mark.parametrize("tile", [1, 2, 4, 8, 16])
def test_tiled_matches_dense_for_every_tile_size(make_problem, tile):
    n, d = 16, 4
    p, _ = make_problem(n, d, 2)
    out = forward_dense(p)
    part = local_forward_tiled(p.Q, p.K, p.V, p.scale, TileSpec(tile, tile))
    o, lse = part.finalize()
    assert np.max(np.abs(o.array - out.O.array)) < 1e-12
    assert np.max(np.abs(lse.array - out.lse.array)) < 1e-12


def test_single_tile_is_bitwise_untiled(make_problem):
    p, _ = make_problem(8, 4, 3)
    whole = local_forward_untiled(p.Q, p.K, p.V, p.scale).finalize()
    tiled = local_forward_tiled(p.Q, p.K, p.V, p.scale,
                                TileSpec(8, 8)).finalize()
    assert np.array_equal(whole[0].array, tiled[0].array)
    assert np.array_equal(whole[1].array, tiled[1].array)


def test_rectangular_tiles(make_problem):
    p, _ = make_problem(12, 4, 4)
    out = forward_dense(p)
    part = local_forward_tiled(p.Q, p.K, p.V, p.scale, TileSpec(3, 5))
    o, _ = part.finalize()
    assert np.max(np.abs(o.array - out.O.array)) < 1e-12


@pytest.mark.parametrize("seed", range(4))
def test_key_tile_order_is_value_irrelevant(make_problem, seed):
    n = 16
    p, _ = make_problem(n, 4, seed)
    base = local_forward_tiled(p.Q, p.K, p.V, p.scale,
                               TileSpec(4, 4)).finalize()
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(4))
    perm = local_forward_tiled(p.Q, p.K, p.V, p.scale, TileSpec(4, 4),
                               key_tile_order=order).finalize()
    assert np.max(np.abs(base[0].array - perm[0].array)) < 1e-13
    assert np.max(np.abs(base[1].array - perm[1].array)) < 1e-13


def test_key_tile_order_must_be_permutation(make_problem):
    p, _ = make_problem(8, 4, 0)
    with pytest.raises(ShapeError):
        local_forward_tiled(p.Q, p.K, p.V, p.scale, TileSpec(4, 4),
                            key_tile_order=[0, 0])


def test_masked_tiled_matches_masked_dense(make_problem):
    n = 16
    mask = BlockMask(causal=True, grid=BlockGrid(4, 4, frozenset({(3, 0)})))
    p, _ = make_problem(n, 4, 5, mask=mask)
    out = forward_dense(p)
    part = local_forward_tiled(p.Q, p.K, p.V, p.scale, TileSpec(4, 4),
                               mask=mask, n_total=n)
    o, lse = part.finalize()
    assert np.max(np.abs(o.array - out.O.array)) < 1e-12
    assert np.max(np.abs(lse.array - out.lse.array)) < 1e-12


def test_masked_kernel_requires_span():
    q = Matrix.zeros(4, 2)
    with pytest.raises(MaskError):
        local_forward_untiled(q, q, q, 1.0, mask=BlockMask(causal=True))


class TestAllocationFootprint:
    def test_untiled_materializes_exactly_one_score_buffer(self, make_problem):
        p, _ = make_problem(16, 4, 0)
        tr = AllocationTracker()
        with track_allocations(tr):
            local_forward_untiled(p.Q, p.K, p.V, p.scale)
        assert tr.count_shape(16, 16) == 1

    def test_tiled_never_materializes_quadratic(self, make_problem):
        n, d, t = 32, 4, 4
        p, _ = make_problem(n, d, 1)
        tr = AllocationTracker()
        with track_allocations(tr):
            local_forward_tiled(p.Q, p.K, p.V, p.scale, TileSpec(t, t))
        assert tr.count_shape(n, n) == 0
        biggest = max(r * c for r, c in tr.shapes)
        assert biggest <= max(t * t, n * d)

    def test_tiled_peak_is_bounded(self, make_problem):
        n, d, t = 32, 4, 4
        p, _ = make_problem(n, d, 2)
        tr = AllocationTracker()
        with track_allocations(tr):
            part = local_forward_tiled(p.Q, p.K, p.V, p.scale, TileSpec(t, t))
        # c * (tile area + partition rows * d) with a small constant
        assert tr.peak_live_elements <= 8 * (t * t + n * d)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("tiles", [None, TileSpec(2, 2), TileSpec(4, 8)])
def test_backward_matches_dense(make_problem, seed, tiles):
    n, d = 16, 4
    p, do = make_problem(n, d, seed)
    out = forward_dense(p)
    want = backward_dense(p, do)
    d_stat = Vector((do.array * out.O.array).sum(axis=1))
    dq, dk, dv = local_backward(p.Q, p.K, p.V, do, out.lse, d_stat, p.scale,
                                tiles=tiles)
    for got, ref in zip((dq, dk, dv), want):
        assert np.max(np.abs(got.array - ref.array)) < 1e-12


def test_backward_untiled_is_bitwise_dense(make_problem):
    p, do = make_problem(8, 4, 7)
    out = forward_dense(p)
    want = backward_dense(p, do)
    d_stat = Vector((do.array * out.O.array).sum(axis=1))
    got = local_backward(p.Q, p.K, p.V, do, out.lse, d_stat, p.scale)
    for g, w in zip(got, want):
        assert np.array_equal(g.array, w.array)


def test_backward_masked(make_problem):
    n = 12
    mask = BlockMask(causal=True)
    p, do = make_problem(n, 4, 8, mask=mask)
    out = forward_dense(p)
    want = backward_dense(p, do)
    d_stat = Vector((do.array * out.O.array).sum(axis=1))
    dq, dk, dv = local_backward(p.Q, p.K, p.V, do, out.lse, d_stat, p.scale,
                                tiles=TileSpec(3, 3), mask=mask, n_total=n)
    for got, ref in zip((dq, dk, dv), want):
        assert np.max(np.abs(got.array - ref.array)) < 1e-12


def test_backward_untiled_materializes_two_quadratic_buffers(make_problem):
    # the probability block and the dO V^T product; the algebra needs both
    n = 16
    p, do = make_problem(n, 4, 3)
    out = forward_dense(p)
    d_stat = Vector((do.array * out.O.array).sum(axis=1))
    tr = AllocationTracker()
    with track_allocations(tr):
        local_backward(p.Q, p.K, p.V, do, out.lse, d_stat, p.scale)
    assert tr.count_shape(n, n) == 2


def test_backward_tiled_never_materializes_quadratic(make_problem):
    n, t = 32, 4
    p, do = make_problem(n, 4, 4)
    out = forward_dense(p)
    d_stat = Vector((do.array * out.O.array).sum(axis=1))
    tr = AllocationTracker()
    with track_allocations(tr):
        local_backward(p.Q, p.K, p.V, do, out.lse, d_stat, p.scale,
                       tiles=TileSpec(t, t))
    assert tr.count_shape(n, n) == 0
