"""Ring state transitions driven by a hand-rolled hop loop.

The loop here is deliberately independent of the executors in ``sim``: it
rotates payload lists in plain Python so that the numeric transitions get
exercised without any scheduling machinery in the way.
"""

import numpy as np
import pytest

from burstsim import ring
from burstsim.dense import AttnProblem, backward_dense, forward_dense
from burstsim.errors import MissingForwardError, ShapeError
from burstsim.linalg import Matrix
from burstsim.local_attn import TileSpec
from burstsim.masking import BlockGrid, BlockMask


def run_forward(states, scale, tiles=None, mask=None, start_offset=0):
    G = len(states)
    bodies = [ring.initial_forward_body(states, i, start_offset)
              for i in range(G)]
    for st in states:
        ring.init_forward(st)
    for _ in range(G):
        for st, body in zip(states, bodies):
            ring.forward_step(st, body, scale, tiles, mask)
        bodies = [bodies[-1]] + bodies[:-1]
    for st in states:
        ring.finalize_forward(st)


def run_backward(states, do_blocks, scale, tiles=None, mask=None):
    G = len(states)
    bodies = [ring.init_backward(st, do) for st, do in zip(states, do_blocks)]
    for _ in range(G):
        for st, body in zip(states, bodies):
            ring.backward_step(st, body, scale, tiles, mask)
        bodies = [bodies[-1]] + bodies[:-1]
    # each record is back at its origin after G hops
    for st, body in zip(states, bodies):
        assert body.origin == st.device_id
    return bodies


def gather(states, bodies=None):
    n, d = states[0].n_valid, states[0].q.cols
    o = np.zeros((n, d))
    lse = np.zeros(n)
    dk = np.zeros((n, d))
    dv = np.zeros((n, d))
    dq = np.zeros((n, d))
    for st in states:
        lo, hi = st.row_offset, st.row_offset + st.rows
        hi_v = min(hi, n)
        if lo >= n:
            continue
        take = hi_v - lo
        o[lo:hi_v] = st.o.array[:take]
        lse[lo:hi_v] = st.lse.array[:take]
        if st.dk is not None:
            dk[lo:hi_v] = st.dk[:take]
            dv[lo:hi_v] = st.dv[:take]
    if bodies is not None:
        for body in bodies:
            lo = body.row_offset
            hi_v = min(lo + body.q.rows, n)
            if lo >= n:
                continue
            dq[lo:hi_v] = body.dq[:hi_v - lo]
    return o, lse, dq, dk, dv


class TestPartition:
    def test_even_split(self, make_problem):
        p, _ = make_problem(16, 4, 0)
        states = ring.partition(p.Q, p.K, p.V, 4)
        assert [st.row_offset for st in states] == [0, 4, 8, 12]
        assert all(st.rows == 4 for st in states)
        assert all(st.n_total == st.n_valid == 16 for st in states)
        joined = np.concatenate([st.q.array for st in states])
        assert np.array_equal(joined, p.Q.array)

    def test_non_divisible_rejected(self, make_problem):
        p, _ = make_problem(10, 4, 0)
        with pytest.raises(ShapeError):
            ring.partition(p.Q, p.K, p.V, 4)

    def test_padding(self, make_problem):
        p, _ = make_problem(10, 4, 0)
        states = ring.partition(p.Q, p.K, p.V, 4, pad=True)
        assert all(st.rows == 3 for st in states)
        assert states[0].n_total == 12 and states[0].n_valid == 10
        # padded tail rows are zero
        assert not states[3].q.array[1:].any()

    def test_bad_device_count(self, make_problem):
        p, _ = make_problem(8, 4, 0)
        with pytest.raises(ShapeError):
            ring.partition(p.Q, p.K, p.V, 0)

    def test_shape_mismatch(self, make_problem):
        p, _ = make_problem(8, 4, 0)
        with pytest.raises(ShapeError):
            ring.partition(p.Q, p.K, Matrix.zeros(8, 3), 2)


class TestBodies:
    def test_forward_element_count(self, make_problem):
        p, _ = make_problem(8, 4, 0)
        states = ring.partition(p.Q, p.K, p.V, 2)
        body = ring.initial_forward_body(states, 0)
        assert body.element_count() == 2 * 4 * 4

    def test_backward_element_count(self, make_problem):
        p, do = make_problem(8, 4, 0)
        states = ring.partition(p.Q, p.K, p.V, 2)
        run_forward(states, p.scale)
        body = ring.init_backward(states[0], do.row_block(0, 4))
        assert body.element_count() == 3 * 4 * 4 + 2 * 4

    def test_initial_body_rotation(self, make_problem):
        p, _ = make_problem(8, 4, 0)
        states = ring.partition(p.Q, p.K, p.V, 4)
        assert ring.initial_forward_body(states, 2).origin == 2
        assert ring.initial_forward_body(states, 2, start_offset=1).origin == 1
        assert ring.initial_forward_body(states, 0, start_offset=3).origin == 1


def test_single_device_is_bitwise_dense(make_problem):
    p, do = make_problem(16, 4, 0)
    out = forward_dense(p)
    want = backward_dense(p, do)
    states = ring.partition(p.Q, p.K, p.V, 1)
    run_forward(states, p.scale)
    bodies = run_backward(states, [do], p.scale)
    o, lse, dq, dk, dv = gather(states, bodies)
    assert np.array_equal(o, out.O.array)
    assert np.array_equal(lse, out.lse.array)
    assert np.array_equal(dq, want[0].array)
    assert np.array_equal(dk, want[1].array)
    assert np.array_equal(dv, want[2].array)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("G", [2, 4, 8])
def test_ring_matches_dense(make_problem, G, seed):
    n, d = 16, 4
    p, do = make_problem(n, d, seed)
    out = forward_dense(p)
    want = backward_dense(p, do)
    states = ring.partition(p.Q, p.K, p.V, G)
    run_forward(states, p.scale)
    do_blocks = [do.row_block(st.row_offset, st.row_offset + st.rows)
                 for st in states]
    bodies = run_backward(states, do_blocks, p.scale)
    o, lse, dq, dk, dv = gather(states, bodies)
    assert np.max(np.abs(o - out.O.array)) < 1e-12
    assert np.max(np.abs(lse - out.lse.array)) < 1e-12
    assert np.max(np.abs(dq - want[0].array)) < 1e-11
    assert np.max(np.abs(dk - want[1].array)) < 1e-11
    assert np.max(np.abs(dv - want[2].array)) < 1e-11


@pytest.mark.parametrize("offset", [0, 1, 3])
def test_start_offset_is_value_irrelevant(make_problem, offset):
    p, _ = make_problem(16, 4, 1)
    base = ring.partition(p.Q, p.K, p.V, 4)
    run_forward(base, p.scale)
    rotated = ring.partition(p.Q, p.K, p.V, 4)
    run_forward(rotated, p.scale, start_offset=offset)
    for a, b in zip(base, rotated):
        assert np.max(np.abs(a.o.array - b.o.array)) < 1e-13
        assert np.max(np.abs(a.lse.array - b.lse.array)) < 1e-13


def test_ring_with_tiles_matches_dense(make_problem):
    p, do = make_problem(16, 4, 2)
    out = forward_dense(p)
    want = backward_dense(p, do)
    states = ring.partition(p.Q, p.K, p.V, 4)
    run_forward(states, p.scale, tiles=TileSpec(2, 2))
    do_blocks = [do.row_block(st.row_offset, st.row_offset + st.rows)
                 for st in states]
    bodies = run_backward(states, do_blocks, p.scale, tiles=TileSpec(2, 2))
    o, lse, dq, dk, dv = gather(states, bodies)
    assert np.max(np.abs(o - out.O.array)) < 1e-12
    assert np.max(np.abs(dq - want[0].array)) < 1e-11


def test_causal_ring_matches_dense(make_problem):
    mask = BlockMask(causal=True)
    p, do = make_problem(16, 4, 3, mask=mask)
    out = forward_dense(p)
    want = backward_dense(p, do)
    states = ring.partition(p.Q, p.K, p.V, 4)
    run_forward(states, p.scale, mask=mask)
    do_blocks = [do.row_block(st.row_offset, st.row_offset + st.rows)
                 for st in states]
    bodies = run_backward(states, do_blocks, p.scale, mask=mask)
    o, lse, dq, dk, dv = gather(states, bodies)
    assert np.max(np.abs(o - out.O.array)) < 1e-12
    assert np.max(np.abs(dk - want[1].array)) < 1e-11
    assert np.max(np.abs(dv - want[2].array)) < 1e-11


def test_padded_ring_matches_dense(make_problem):
    n = 10
    p, do = make_problem(n, 4, 4)
    out = forward_dense(p)
    states = ring.partition(p.Q, p.K, p.V, 4, pad=True)
    mask = BlockMask().with_padding(n, n)
    run_forward(states, p.scale, mask=mask)
    o, lse, _, _, _ = gather(states)
    assert np.max(np.abs(o - out.O.array)) < 1e-12
    assert np.max(np.abs(lse - out.lse.array)) < 1e-12


def test_masked_hop_reports_skip(make_problem):
    # block-causal grid: device 0's queries never see device 3's keys
    mask = BlockMask(causal=True)
    p, _ = make_problem(16, 4, 5, mask=mask)
    states = ring.partition(p.Q, p.K, p.V, 4)
    ring.init_forward(states[0])
    body = ring.initial_forward_body(states, 3)  # origin 3, offset 12
    stats = ring.forward_step(states[0], body, p.scale, None, mask)
    assert stats.computed is False
    stats = ring.forward_step(states[0], ring.initial_forward_body(states, 0),
                              p.scale, None, mask)
    assert stats.computed is True


class TestOrderingFaults:
    def test_forward_step_needs_init(self, make_problem):
        p, _ = make_problem(8, 4, 0)
        states = ring.partition(p.Q, p.K, p.V, 2)
        body = ring.initial_forward_body(states, 0)
        with pytest.raises(MissingForwardError):
            ring.forward_step(states[0], body, p.scale, None, None)

    def test_finalize_needs_init(self, make_problem):
        p, _ = make_problem(8, 4, 0)
        states = ring.partition(p.Q, p.K, p.V, 2)
        with pytest.raises(MissingForwardError):
            ring.finalize_forward(states[0])

    def test_backward_needs_forward(self, make_problem):
        p, do = make_problem(8, 4, 0)
        states = ring.partition(p.Q, p.K, p.V, 2)
        with pytest.raises(MissingForwardError):
            ring.init_backward(states[0], do.row_block(0, 4))

    def test_backward_step_needs_init(self, make_problem):
        p, do = make_problem(8, 4, 0)
        states = ring.partition(p.Q, p.K, p.V, 2)
        run_forward(states, p.scale)
        body = ring.init_backward(states[0], do.row_block(0, 4))
        with pytest.raises(MissingForwardError):
            ring.backward_step(states[1], body, p.scale, None, None)

    def test_backward_do_shape_checked(self, make_problem):
        p, do = make_problem(8, 4, 0)
        states = ring.partition(p.Q, p.K, p.V, 2)
        run_forward(states, p.scale)
        with pytest.raises(ShapeError):
            ring.init_backward(states[0], do)
