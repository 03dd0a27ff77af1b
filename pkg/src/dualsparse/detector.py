"""Cycle-level model of one dual-side sparsity detector.

A detector walks the per-timestep window vector one segment at a time. Each
segment is ANDed with the weight mask, and the matched positions are pulled
out one per cycle, lowest first. Each match becomes a weight-RAM address by
counting the mask bits below it. A segment with no match still costs one
bubble cycle. The bias is added as one extra weight: it rides the final
bubble when the last segment of a timestep had no match, and costs one
extra cycle otherwise.

Bit vectors are Python ints with position 0 as the least significant bit.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import EmptyError, LogicError, ShapeError
from .neuron import NeuronParams, NeuronState, check_acc, neuron_step

PIPELINE_DEPTH = 7   # AND at the first stage through weight fetch at the last


def popcount(x: int) -> int:
    return bin(x).count("1")


def extract_onehot(x: int) -> tuple[int, int]:
    """Lowest set bit of ``x`` and ``x`` with that bit cleared."""
    if x == 0:
        raise EmptyError("no set bit to extract")
    y = x & ~(x - 1)
    return y, x & ~y


def _check_onehot(y: int, mask: int):
    if y <= 0 or y & (y - 1):
        raise LogicError(f"{y:#b} is not one-hot")
    if not y & mask:
        raise LogicError(f"bit {y:#b} is not set in mask {mask:#b}")


def inclusive_count(y: int, mask: int) -> int:
    """popcount(mask AND (all bits up to and including y's bit))."""
    _check_onehot(y, mask)
    return popcount(mask & ((y << 1) - 1))


def prefix_and_offset(y: int, mask: int) -> int:
    """Storage index of the weight at y's position among the mask's set bits."""
    _check_onehot(y, mask)
    return popcount(mask & (y - 1))


def bits_to_int(bits) -> int:
    arr = np.asarray(bits, dtype=np.uint8)
    return int.from_bytes(np.packbits(arr, bitorder="little").tobytes(), "little")


def int_to_bits(x: int, n: int) -> np.ndarray:
    raw = np.frombuffer(x.to_bytes(-(-n // 8) or 1, "little"), dtype=np.uint8)
    return np.unpackbits(raw, bitorder="little")[:n]


def split_segments(vec, segment_len: int) -> list[int]:
    """Chop a bit vector into segment words; the last one is zero-padded."""
    vec = np.asarray(vec, dtype=np.uint8)
    n = max(1, -(-len(vec) // segment_len))
    padded = np.zeros(n * segment_len, dtype=np.uint8)
    padded[:len(vec)] = vec
    return [bits_to_int(padded[i * segment_len:(i + 1) * segment_len]) for i in range(n)]


class FetchKind(str, Enum):
    NONE = "none"
    WEIGHT = "weight"
    BIAS = "bias"


@dataclass
class DetectorSlice:
    """One output channel's share of a detector's RAMs.

    ``weights`` are the channel's nonzero values, segment-major and LSB-first
    within a segment; ``base`` is where they start in the detector's weight RAM.
    """

    masks: list[int]
    weights: np.ndarray
    bias: int
    threshold: int
    segment_len: int
    base: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.int64).reshape(-1)
        limit = 1 << self.segment_len
        if any(m < 0 or m >= limit for m in self.masks):
            raise ShapeError(f"mask segment wider than {self.segment_len} bits")
        if sum(popcount(m) for m in self.masks) != self.weights.size:
            raise ShapeError("mask popcount does not match the number of stored weights")

    @classmethod
    def from_dense(cls, w_vec, bias: int, threshold: int, segment_len: int, base: int = 0) -> "DetectorSlice":
        w_vec = np.asarray(w_vec, dtype=np.int64).reshape(-1)
        return cls(split_segments(w_vec != 0, segment_len), w_vec[w_vec != 0], int(bias),
                   int(threshold), segment_len, base)

    @property
    def window_len_padded(self) -> int:
        return len(self.masks) * self.segment_len

    def dense(self, window_len: int) -> np.ndarray:
        mask = np.concatenate([int_to_bits(m, self.segment_len) for m in self.masks])[:window_len]
        out = np.zeros(window_len, dtype=np.int64)
        out[mask.astype(bool)] = self.weights
        return out


@dataclass(frozen=True)
class DetectorState:
    x: int = 0
    pair_count: int = 0
    offset_reg: int = 0
    base_reg: int = 0
    v: NeuronState = NeuronState()
    bias_cycle: bool = False
    t_index: int = 0


def bias_absorb_step(state: DetectorState, is_bubble: bool, last: bool) -> tuple[FetchKind, DetectorState]:
    """What the current issue cycle fetches, and the updated bias flag.

    On the final vector-pair of a timestep a bubble carries the bias itself;
    a non-bubble cycle fetches its weight and flags the bias for the next cycle.
    """
    if not last:
        return (FetchKind.NONE if is_bubble else FetchKind.WEIGHT), replace(state, bias_cycle=False)
    if is_bubble:
        return FetchKind.BIAS, replace(state, bias_cycle=False)
    return FetchKind.WEIGHT, replace(state, bias_cycle=True)


@dataclass
class DetectorEvent:
    cycle: int
    detector_id: int
    event: str
    address: int = -1


@dataclass
class DetectorRun:
    spikes: np.ndarray          # (pixels, t)
    issue_cycles: int
    fetches: int
    bubbles: int
    bias_cycles: int            # extra cycles spent on a bias
    latency: int                # issue cycles plus pipeline fill
    trace: list[DetectorEvent] = field(default_factory=list)


def _as_windows(spike_vectors, t: int) -> np.ndarray:
    s = np.asarray(spike_vectors, dtype=np.uint8)
    if s.ndim == 2:
        s = s[None]
    if s.ndim != 3 or s.shape[1] != t:
        raise ShapeError(f"spike vectors must be (pixels, t={t}, window), got {s.shape}")
    return s


def detector_run(spike_vectors, sl: DetectorSlice, params: NeuronParams, t: int,
                 detector_id: int = 0, record: bool = True, ram_size: int | None = None,
                 start_cycle: int = 0) -> DetectorRun:
    """Process consecutive output pixels of one channel.

    ``spike_vectors`` is (pixels, t, window_len) in orchestrator order. The
    membrane is carried across the timesteps of a pixel and cleared between
    pixels.
    """
    wins = _as_windows(spike_vectors, t)
    if wins.shape[2] > sl.window_len_padded:
        raise ShapeError(f"window of {wins.shape[2]} bits exceeds the slice masks")
    ram_end = sl.base + sl.weights.size if ram_size is None else ram_size
    n_seg = len(sl.masks)
    out = np.zeros(wins.shape[:2], dtype=np.uint8)
    trace: list[DetectorEvent] = []
    cycle = start_cycle
    fetches = bubbles = bias_cycles = 0
    for p in range(wins.shape[0]):
        state = DetectorState(base_reg=sl.base)
        for ti in range(t):
            state = replace(state, offset_reg=0, t_index=ti)
            acc = 0
            for k, seg in enumerate(split_segments(wins[p, ti], sl.segment_len)[:n_seg]):
                mask = sl.masks[k]
                x = seg & mask
                last = k == n_seg - 1
                state = replace(state, x=x, pair_count=popcount(x))
                if record:
                    trace.append(DetectorEvent(cycle, detector_id, "and"))
                if x == 0:
                    kind, state = bias_absorb_step(state, True, last)
                    bubbles += 1
                    if record:
                        trace.append(DetectorEvent(cycle, detector_id, "bubble"))
                    if kind is FetchKind.BIAS:
                        acc = check_acc(acc + sl.bias, "current")
                        if record:
                            trace.append(DetectorEvent(cycle, detector_id, "fetch_bias"))
                    cycle += 1
                while state.x:
                    y, x_next = extract_onehot(state.x)
                    addr = state.base_reg + state.offset_reg + prefix_and_offset(y, mask)
                    if not (sl.base <= addr < ram_end):
                        raise LogicError(f"weight address {addr} outside slice [{sl.base}, {ram_end})")
                    kind, state = bias_absorb_step(state, False, last and x_next == 0)
                    acc = check_acc(acc + int(sl.weights[addr - sl.base]), "current")
                    fetches += 1
                    if record:
                        trace.append(DetectorEvent(cycle, detector_id, "extract", addr))
                        trace.append(DetectorEvent(cycle, detector_id, "fetch_weight", addr))
                    state = replace(state, x=x_next, pair_count=state.pair_count - 1)
                    cycle += 1
                if state.bias_cycle:
                    acc = check_acc(acc + sl.bias, "current")
                    bias_cycles += 1
                    if record:
                        trace.append(DetectorEvent(cycle, detector_id, "fetch_bias"))
                    state = replace(state, bias_cycle=False)
                    cycle += 1
                state = replace(state, offset_reg=state.offset_reg + popcount(mask))
            v, fired = neuron_step(state.v, acc, params)
            state = replace(state, v=v)
            out[p, ti] = fired
            if fired and record:
                trace.append(DetectorEvent(cycle - 1, detector_id, "fire"))
    issued = cycle - start_cycle
    latency = issued + PIPELINE_DEPTH - 1 if issued else 0
    return DetectorRun(out, issued, fetches, bubbles, bias_cycles, latency, trace)


def segment_matches(wins: np.ndarray, mask_bits: np.ndarray, segment_len: int) -> np.ndarray:
    """Matched pairs per segment: (..., window) spikes against (channels, window) masks.

    Returns (..., channels, n_segments) counts.
    """
    n = wins.shape[-1]
    n_seg = max(1, -(-n // segment_len))
    pad = n_seg * segment_len - n
    sw = np.pad(wins, [(0, 0)] * (wins.ndim - 1) + [(0, pad)]).astype(np.float32)
    mw = np.pad(mask_bits, ((0, 0), (0, pad))).astype(np.float32)
    sw = sw.reshape(sw.shape[:-1] + (n_seg, segment_len))
    mw = mw.reshape(mw.shape[0], n_seg, segment_len)
    return np.einsum("...kl,ckl->...ck", sw, mw).round().astype(np.int64)


def issue_cycles_from_matches(matches: np.ndarray) -> np.ndarray:
    """Closed-form cycles per timestep from per-segment match counts (last axis)."""
    return np.maximum(matches, 1).sum(axis=-1) + (matches[..., -1] > 0)


def write_trace_csv(events, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(("cycle", "detector_id", "event", "address"))
        for e in events:
            wr.writerow((e.cycle, e.detector_id, e.event, e.address))
