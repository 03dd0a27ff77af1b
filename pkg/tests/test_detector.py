import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dualsparse.detector import (PIPELINE_DEPTH, DetectorSlice, DetectorState, FetchKind, bias_absorb_step,
                                 bits_to_int, detector_run, extract_onehot, inclusive_count, int_to_bits,
                                 issue_cycles_from_matches, popcount, prefix_and_offset, segment_matches,
                                 split_segments, write_trace_csv)
from dualsparse.errors import EmptyError, LogicError, ShapeError
from dualsparse.neuron import NeuronModel, NeuronParams, NeuronState, neuron_step


def test_extract_onehot_examples():
    assert extract_onehot(0b0110) == (0b0010, 0b0100)
    assert extract_onehot(0b1000) == (0b1000, 0)
    with pytest.raises(EmptyError):
        extract_onehot(0)


def test_extraction_enumerates_bits_exhaustively():
    for x in range(1, 1 << 16):
        seen = []
        while x:
            y, x = extract_onehot(x)
            seen.append(y)
        want = [1 << i for i in range(16) if sum(seen) >> i & 1]
        assert seen == want


def test_prefix_worked_example():
    y, mask = 0b0100, 0b1101
    assert (y - 1) | y == 0b0111
    assert ((y << 1) - 1) & mask == 0b0101
    assert inclusive_count(y, mask) == 2
    assert prefix_and_offset(y, mask) == 1


def test_prefix_first_weight():
    assert prefix_and_offset(0b0001, 0b1011) == 0


def test_prefix_preconditions():
    with pytest.raises(LogicError):
        prefix_and_offset(0b0110, 0b1111)
    with pytest.raises(LogicError):
        prefix_and_offset(0b0010, 0b1101)


@given(st.integers(1, (1 << 20) - 1), st.data())
def test_prefix_matches_scan(mask, data):
    bits = [i for i in range(20) if mask >> i & 1]
    pos = data.draw(st.sampled_from(bits))
    assert prefix_and_offset(1 << pos, mask) == bits.index(pos)
    assert inclusive_count(1 << pos, mask) == bits.index(pos) + 1


def test_bit_helpers_round_trip(rng):
    v = rng.integers(0, 2, 37)
    assert int_to_bits(bits_to_int(v), 37).tolist() == v.tolist()
    segs = split_segments(v, 16)
    assert len(segs) == 3
    assert segs[2] < (1 << 5)
    assert popcount(0b1011) == 3


def test_slice_invariant():
    with pytest.raises(ShapeError):
        DetectorSlice([0b11], np.array([1]), 0, 1, 4)


def _if(th):
    return NeuronParams(NeuronModel.IF, th)


def test_worked_single_vector():
    # spikes 1011 and mask 1101: matches at bits {0, 3}, addresses 0 and 2
    sl = DetectorSlice([0b1101], np.array([3, -2, 5]), bias=0, threshold=100, segment_len=4)
    spikes = int_to_bits(0b1011, 4)
    run = detector_run(spikes[None, None, :], sl, _if(100), t=1)
    addrs = [e.address for e in run.trace if e.event == "fetch_weight"]
    assert addrs == [0, 2]
    assert run.fetches == 2
    assert run.issue_cycles == 2 + 1      # two pairs, then the bias cycle
    assert run.bias_cycles == 1
    assert run.latency == run.issue_cycles + PIPELINE_DEPTH - 1


def test_worked_vector_current():
    sl = DetectorSlice([0b1101], np.array([3, -2, 5]), bias=0, threshold=7, segment_len=4)
    spikes = int_to_bits(0b1011, 4)[None, None, :]
    # 3 + 5 = 8 > 7 fires, but not against threshold 8
    assert detector_run(spikes, sl, _if(7), t=1).spikes.item() == 1
    sl.threshold = 8
    assert detector_run(spikes, sl, _if(8), t=1).spikes.item() == 0


def test_all_zero_spikes_are_bubbles_only():
    w = np.array([1, 0, 2, 3, 0, 4, 5, 6, 1])
    sl = DetectorSlice.from_dense(w, 0, 1, 4)
    run = detector_run(np.zeros((2, 3, 9), dtype=np.uint8), sl, _if(1), t=3)
    assert not run.spikes.any()
    assert run.fetches == 0 and run.bias_cycles == 0
    assert run.issue_cycles == run.bubbles == 2 * 3 * 3


def test_bias_absorb_step_cases():
    s = DetectorState()
    kind, s2 = bias_absorb_step(s, True, True)
    assert kind is FetchKind.BIAS and not s2.bias_cycle
    kind, s2 = bias_absorb_step(s, False, True)
    assert kind is FetchKind.WEIGHT and s2.bias_cycle
    kind, s2 = bias_absorb_step(s, False, False)
    assert kind is FetchKind.WEIGHT and not s2.bias_cycle
    kind, _ = bias_absorb_step(s, True, False)
    assert kind is FetchKind.NONE


def test_bias_rides_final_bubble():
    w = np.ones(8, dtype=int)
    sl = DetectorSlice.from_dense(w, bias=2, threshold=100, segment_len=4)
    spikes = np.array([[[1, 1, 0, 0, 0, 0, 0, 0]]], dtype=np.uint8)
    run = detector_run(spikes, sl, _if(100), t=1)
    assert run.issue_cycles == 2 + 1       # two matches, then the bubble that carries the bias
    assert run.bias_cycles == 0
    assert [e.event for e in run.trace if e.event.startswith("fetch")] == ["fetch_weight"] * 2 + ["fetch_bias"]


def test_bias_extra_cycle_after_match():
    w = np.ones(8, dtype=int)
    sl = DetectorSlice.from_dense(w, bias=2, threshold=100, segment_len=4)
    spikes = np.array([[[0, 0, 0, 0, 0, 0, 1, 0]]], dtype=np.uint8)
    run = detector_run(spikes, sl, _if(100), t=1)
    assert run.issue_cycles == 1 + 1 + 1
    assert run.bias_cycles == 1


def _dense_channel(wins, w, b, params, t):
    out = np.zeros(wins.shape[:2], dtype=np.uint8)
    for p in range(wins.shape[0]):
        st_ = NeuronState()
        for ti in range(t):
            cur = int(wins[p, ti] @ w) + b
            st_, out[p, ti] = neuron_step(st_, cur, params)
    return out


@pytest.mark.parametrize("seed", range(10))
def test_random_slices_match_dense_and_formula(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 60))
    seg = int(rng.choice([1, 3, 4, 8, 16]))
    t = int(rng.integers(1, 5))
    w = rng.integers(-8, 8, n) * (rng.random(n) < rng.uniform(0, 1))
    b = int(rng.integers(-5, 6))
    params = NeuronParams(NeuronModel.LIF if seed % 2 else NeuronModel.IF, int(rng.integers(-2, 10)))
    wins = (rng.random((5, t, n)) < rng.uniform(0, 1)).astype(np.uint8)
    sl = DetectorSlice.from_dense(w, b, params.v_threshold, seg, base=int(rng.integers(0, 10)))
    run = detector_run(wins, sl, params, t, detector_id=seed)
    assert np.array_equal(run.spikes, _dense_channel(wins, w, b, params, t))
    m = segment_matches(wins, (w != 0)[None, :].astype(np.uint8), seg)[..., 0, :]
    assert run.issue_cycles == int(issue_cycles_from_matches(m).sum())
    assert run.fetches == int(m.sum())
    # trace invariants
    fetched = [e for e in run.trace if e.event == "fetch_weight"]
    for e in fetched:
        assert sl.base <= e.address < sl.base + sl.weights.size
    assert all(e.detector_id == seed for e in run.trace)


def test_zero_skip_and_monotone_addresses(rng):
    n, seg = 32, 8
    w = rng.integers(-8, 8, n) * (rng.random(n) < 0.5)
    sl = DetectorSlice.from_dense(w, 0, 5, seg)
    wins = (rng.random((3, 2, n)) < 0.5).astype(np.uint8)
    run = detector_run(wins, sl, _if(5), t=2)
    nz_pos = np.flatnonzero(w)
    events = [e for e in run.trace if e.event == "fetch_weight"]
    i = 0
    for p in range(3):
        for ti in range(2):
            hits = [k for k in np.flatnonzero(wins[p, ti]) if w[k] != 0]
            got = [events[i + j].address for j in range(len(hits))]
            i += len(hits)
            # every fetched address points at a weight whose spike and mask bits are 1
            assert got == [int(np.searchsorted(nz_pos, k)) for k in hits]
            assert all(a < b for a, b in zip(got, got[1:]))
    assert i == len(events)


def test_out_of_slice_address_raises():
    sl = DetectorSlice([0b11], np.array([1, 1]), 0, 5, 2, base=4)
    with pytest.raises(LogicError):
        detector_run(np.ones((1, 1, 2), dtype=np.uint8), sl, _if(5), 1, ram_size=5)


def test_window_wider_than_masks_rejected():
    sl = DetectorSlice([0b1], np.array([1]), 0, 5, 2)
    with pytest.raises(ShapeError):
        detector_run(np.ones((1, 1, 3), dtype=np.uint8), sl, _if(5), 1)


def test_trace_csv(tmp_path):
    sl = DetectorSlice([0b1101], np.array([3, -2, 5]), 1, 1, 4)
    run = detector_run(int_to_bits(0b1011, 4)[None, None, :], sl, _if(1), 1, detector_id=3)
    write_trace_csv(run.trace, tmp_path / "d.csv")
    with open(tmp_path / "d.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["event"] for r in rows} <= {"and", "extract", "fetch_weight", "fetch_bias", "fire", "bubble"}
    assert {r["detector_id"] for r in rows} == {"3"}
    assert any(r["event"] == "fire" for r in rows)
