import csv

import numpy as np
import pytest

from dualsparse.errors import ContractViolation, DomainError, ShapeError, UnsupportedError
from dualsparse.neuron import SpikeTensor
from dualsparse.orchestrator import (LayerGeometry, Orchestrator, address_stream, buffer_requirements,
                                     orchestrate, orchestrate_fast, reference_reorder, stride_schedule,
                                     window_offsets, write_trace_csv)

# (T, C_o, C_i, F_wi, F_hi, K_w, K_h) = (2, 2, 3, 4, 4, 3, 3)
SMALL = LayerGeometry(f_hi=4, f_wi=4, c_i=3, c_o=2, k_h=3, k_w=3, t=2)


def loop_oracle(x: np.ndarray, g: LayerGeometry) -> np.ndarray:
    p = g.padding
    xp = np.pad(x, ((p, p), (p, p), (0, 0), (0, 0)))
    out = []
    for i in range(g.f_ho):
        for j in range(g.f_wo):
            for _ in range(g.replicas):
                for t in range(g.t):
                    for kh in range(g.k_h):
                        for kw in range(g.k_w):
                            for ci in range(g.c_i):
                                out.append(xp[i + kh, j + kw, ci, t])
    return np.array(out, dtype=np.uint8)


def random_geometry(rng, holding_free=False) -> LayerGeometry:
    k_h, k_w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    pad = int(rng.integers(0, 2))
    f_hi = int(rng.integers(max(1, k_h - 2 * pad), 7))
    f_wi = int(rng.integers(max(1, k_w - 2 * pad), 7))
    c_o = int(rng.integers(1, 5))
    return LayerGeometry(f_hi, f_wi, int(rng.integers(1, 4)), c_o, k_h, k_w, int(rng.integers(1, 4)),
                         pad, p_co=int(rng.integers(1, c_o + 1)))


def test_stride_schedule_examples():
    g = LayerGeometry(f_hi=4, f_wi=4, c_i=3, c_o=1, k_h=3, k_w=3, t=2)
    inc = dict(stride_schedule(g))
    assert inc["window"] == 6
    assert inc["row_end"] == 18
    assert inc["new_map"] == 66
    assert inc["channel"] == 2 and inc["column"] == 2
    assert inc["kernel_row"] == ((4 - 3) * 3 + 1) * 2


def test_stride_other_than_one_unsupported():
    g = LayerGeometry(f_hi=4, f_wi=4, c_i=1, c_o=1, k_h=3, k_w=3, t=1, stride=2)
    with pytest.raises(UnsupportedError):
        stride_schedule(g)


def test_buffer_requirements_examples():
    g = LayerGeometry(f_hi=16, f_wi=16, c_i=32, c_o=64, k_h=3, k_w=3, t=4, p_co=26)
    assert buffer_requirements(g) == (26, 4480)
    g1 = LayerGeometry(f_hi=5, f_wi=7, c_i=6, c_o=2, k_h=1, k_w=1, t=3)
    assert buffer_requirements(g1)[1] == 3 * 6


def test_geometry_validation():
    with pytest.raises(ShapeError):
        LayerGeometry(f_hi=2, f_wi=2, c_i=1, c_o=1, k_h=3, k_w=3, t=1)
    with pytest.raises(DomainError):
        LayerGeometry(f_hi=2, f_wi=2, c_i=0, c_o=1, k_h=1, k_w=1, t=1)


def test_small_reference_configuration(rng):
    x = SpikeTensor.random((4, 4, 3, 2), 0.5, rng)
    res = orchestrate(x, SMALL)
    want = loop_oracle(x.bits, SMALL)
    assert np.array_equal(res.stream, want)
    assert np.array_equal(reference_reorder(x, SMALL), want)
    win = 2 * 27
    first = res.stream[:2 * win]
    assert np.array_equal(first[:win], first[win:])


def test_identity_reorder():
    g = LayerGeometry(f_hi=1, f_wi=1, c_i=1, c_o=1, k_h=1, k_w=1, t=1)
    for v in (0, 1):
        x = SpikeTensor(np.full((1, 1, 1, 1), v, dtype=np.uint8))
        assert orchestrate(x, g).stream.tolist() == [v]


def test_single_window_replays(rng):
    g = LayerGeometry(f_hi=2, f_wi=3, c_i=2, c_o=3, k_h=2, k_w=3, t=2)
    x = SpikeTensor.random((2, 3, 2, 2), 0.5, rng)
    per_t = [x.bits[..., t].reshape(-1) for t in range(2)]
    want = np.concatenate(per_t * 3)
    assert np.array_equal(reference_reorder(x, g), want)
    assert np.array_equal(orchestrate(x, g).stream, want)


def test_same_padding_border_zeros():
    g = LayerGeometry(f_hi=3, f_wi=3, c_i=1, c_o=1, k_h=3, k_w=3, t=1, padding=1)
    x = SpikeTensor(np.ones((3, 3, 1, 1), dtype=np.uint8))
    first = reference_reorder(x, g)[:9].reshape(3, 3)
    assert not first[0].any() and not first[:, 0].any()
    assert first[1:, 1:].all()


def test_channel_within_temporal_order(rng):
    g = LayerGeometry(f_hi=1, f_wi=1, c_i=4, c_o=1, k_h=1, k_w=1, t=3)
    x = SpikeTensor.random((1, 1, 4, 3), 0.5, rng)
    assert np.array_equal(orchestrate(x, g).stream, x.bits[0, 0].T.reshape(-1))


@pytest.mark.parametrize("seed", range(20))
def test_random_geometries_with_throttling(seed):
    rng = np.random.default_rng(seed)
    g = random_geometry(rng)
    x = SpikeTensor.random((g.f_hi, g.f_wi, g.c_i, g.t), 0.5, rng)
    bursts = rng.random(4096) < 0.6
    ready = rng.random(4096) < 0.7
    res = orchestrate(x, g, holding=int(rng.integers(0, 20)),
                      consumer_ready=lambda c: bool(ready[c % 4096]),
                      producer_valid=lambda c: bool(bursts[c % 4096]))
    want = loop_oracle(x.bits, g)
    assert np.array_equal(res.stream, want)
    assert np.array_equal(orchestrate_fast(x, g), want)


def test_addresses_only_grow_within_window():
    offs = window_offsets(SMALL)
    per = offs.reshape(SMALL.replicas, SMALL.t, -1)
    for rep in per:
        for t, row in enumerate(rep):
            assert row[0] == t and np.all(np.diff(row) > 0)


def test_address_stream_in_buffer_range():
    _, s_buf = buffer_requirements(SMALL)
    a = address_stream(SMALL).reshape(SMALL.f_ho * SMALL.f_wo, -1)
    span = a.max(axis=1) - a.min(axis=1) + 1
    assert span.max() <= s_buf


def test_reuse_bound_with_no_holding(rng):
    for _ in range(30):
        g = random_geometry(rng)
        _, s_buf = buffer_requirements(g)
        x = SpikeTensor.random((g.f_hi, g.f_wi, g.c_i, g.t), 0.5, rng)
        res = orchestrate(x, g, holding=0)
        assert np.array_equal(res.stream, loop_oracle(x.bits, g))
        assert res.peak_occupancy <= s_buf
        assert res.peak_reuse <= s_buf


def test_unthrottled_producer_violates_contract(rng):
    x = SpikeTensor.random((4, 4, 3, 2), 0.5, rng)
    with pytest.raises(ContractViolation):
        orchestrate(x, SMALL, holding=0, consumer_ready=lambda c: c % 5 == 0, respect_full=False)


def test_stalled_consumer_reports_no_progress(rng):
    x = SpikeTensor.random((4, 4, 3, 2), 0.5, rng)
    orch = Orchestrator(SMALL, holding=0)
    with pytest.raises(ContractViolation):
        orch.run(x.bits.reshape(-1), consumer_ready=lambda c: False, max_idle=100)


def test_push_never_stalls_with_room(rng):
    x = SpikeTensor.random((4, 4, 3, 2), 0.5, rng)
    res = orchestrate(x, SMALL, holding=x.bits.size)
    assert res.push_stalls == 0
    assert res.cycles >= len(res.stream)
    # a full buffer does make the producer wait
    assert orchestrate(x, SMALL, holding=0).push_stalls > 0


def test_trace_csv(tmp_path, rng):
    x = SpikeTensor.random((4, 4, 3, 2), 0.5, rng)
    res = orchestrate(x, SMALL, record=True)
    write_trace_csv(res.trace, tmp_path / "t.csv")
    with open(tmp_path / "t.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert set(r["action"] for r in rows) <= {"push", "pop", "stall"}
    pops = [int(r["address"]) for r in rows if r["action"] == "pop"]
    assert len(pops) == len(res.stream)
    pushes = [int(r["address"]) for r in rows if r["action"] == "push"]
    assert pushes == list(range(4 * 4 * 3 * 2))
