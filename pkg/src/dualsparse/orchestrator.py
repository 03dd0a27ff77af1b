"""Line-buffer address generator that turns the canonical input stream into im2col order.

Input bits arrive in (f_h, f_w, c_i, t) order with time innermost. For every
output pixel the orchestrator replays its receptive field ceil(c_o / p_co)
times, and each replay runs time-major: for t, then (k_h, k_w, c_i). So the
channels inside one timestep come out contiguous.

The pop address is always base + offset. Both counters move only by adding
increments taken from ``stride_schedule``, which is the only place where
products of geometry terms appear.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractViolation, DomainError, ShapeError, UnsupportedError
from .neuron import SpikeTensor


@dataclass(frozen=True)
class LayerGeometry:
    """Geometry of one convolution. f_hi and f_wi are the sizes before padding."""

    f_hi: int
    f_wi: int
    c_i: int
    c_o: int
    k_h: int
    k_w: int
    t: int
    padding: int = 0
    p_co: int = 1
    p_ci: int = 1
    stride: int = 1

    def __post_init__(self):
        for name in ("f_hi", "f_wi", "c_i", "c_o", "k_h", "k_w", "t", "p_co", "p_ci", "stride"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise DomainError("padding must be non-negative")
        if self.f_ho < 1 or self.f_wo < 1:
            raise ShapeError(f"kernel {self.k_h}x{self.k_w} does not fit padded input {self.f_hp}x{self.f_wp}")

    @property
    def f_hp(self) -> int:
        return self.f_hi + 2 * self.padding

    @property
    def f_wp(self) -> int:
        return self.f_wi + 2 * self.padding

    @property
    def f_ho(self) -> int:
        return self.f_hp - self.k_h + 1

    @property
    def f_wo(self) -> int:
        return self.f_wp - self.k_w + 1

    @property
    def replicas(self) -> int:
        return -(-self.c_o // self.p_co)

    @property
    def window_len(self) -> int:
        """Bits in one timestep of one window (the flattened k_h, k_w, c_i vector)."""
        return self.k_h * self.k_w * self.c_i

    @property
    def pops_per_window(self) -> int:
        return self.replicas * self.t * self.window_len

    @classmethod
    def for_layer(cls, layer, f_hi: int, f_wi: int, p_co: int = 1, p_ci: int = 1) -> "LayerGeometry":
        return cls(f_hi, f_wi, layer.c_i, layer.c_o, layer.k_h, layer.k_w, layer.t,
                   layer.padding, p_co, p_ci)


def buffer_requirements(g: LayerGeometry) -> tuple[int, int]:
    """(v_buf, s_buf): vector buffers and reuse-sector bits.

    The width term is the padded input width, which is what the reuse span
    actually needs; it equals the output width for stride-1 'same' layers.
    """
    return g.p_co, ((g.k_h - 1) * g.f_wp + g.k_w) * g.t * g.c_i


def stride_schedule(g: LayerGeometry) -> list[tuple[str, int | None]]:
    """Increment table. Base events first, then offset events; resets carry None."""
    if g.stride != 1:
        raise UnsupportedError(f"only stride 1 is modelled, got {g.stride}")
    ct = g.c_i * g.t
    return [
        ("window", ct),
        ("row_end", g.k_w * ct),
        ("new_map", ((g.k_h - 1) * g.f_wp + g.k_w) * ct),
        ("channel", g.t),
        ("column", g.t),
        ("kernel_row", ((g.f_wp - g.k_w) * g.c_i + 1) * g.t),
        ("timestep", None),
        ("replica", None),
    ]


def pad_bits(bits: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return bits
    return np.pad(bits, ((padding, padding), (padding, padding), (0, 0), (0, 0)))


def reference_reorder(inp: SpikeTensor, g: LayerGeometry) -> np.ndarray:
    """Explicit im2col emission: loops (f_ho, f_wo, replica, t, k_h, k_w, c_i)."""
    _check_input(inp, g)
    x = pad_bits(inp.bits, g.padding)
    win = np.lib.stride_tricks.sliding_window_view(x, (g.k_h, g.k_w), axis=(0, 1))
    # (ho, wo, ci, t, kh, kw) -> (ho, wo, t, kh, kw, ci)
    win = win.transpose(0, 1, 3, 4, 5, 2)
    rep = np.broadcast_to(win[:, :, None], (g.f_ho, g.f_wo, g.replicas) + win.shape[2:])
    return np.ascontiguousarray(rep).reshape(-1)


def _check_input(inp: SpikeTensor, g: LayerGeometry):
    if inp.dims != (g.f_hi, g.f_wi, g.c_i, g.t):
        raise ShapeError(f"input dims {inp.dims} do not match geometry {(g.f_hi, g.f_wi, g.c_i, g.t)}")


def window_offsets(g: LayerGeometry) -> np.ndarray:
    """Offset counter values for one window, produced by the increment table."""
    inc = dict(stride_schedule(g))
    out = np.empty(g.pops_per_window, dtype=np.int64)
    i = 0
    for _r in range(g.replicas):
        for t in range(g.t):
            off = t
            for kh in range(g.k_h):
                if kh:
                    off += inc["kernel_row"] - inc["column"]
                for kw in range(g.k_w):
                    for ci in range(g.c_i):
                        out[i] = off
                        i += 1
                        off += inc["channel"]
    return out


def window_bases(g: LayerGeometry, frames: int = 1) -> np.ndarray:
    """Base counter value for every window, accumulated from the increment table."""
    inc = dict(stride_schedule(g))
    n = g.f_ho * g.f_wo * frames
    steps = np.full(n, inc["window"], dtype=np.int64)
    steps[0] = 0
    col = np.arange(n) % g.f_wo
    steps[1:][col[1:] == 0] = inc["row_end"]
    steps[1:][(np.arange(1, n) % (g.f_ho * g.f_wo)) == 0] = inc["new_map"]
    return np.cumsum(steps)


def address_stream(g: LayerGeometry, frames: int = 1) -> np.ndarray:
    """All pop addresses in order, from the accumulated base and offset counters."""
    return (window_bases(g, frames)[:, None] + window_offsets(g)[None, :]).reshape(-1)


def orchestrate_fast(inp: SpikeTensor, g: LayerGeometry) -> np.ndarray:
    """Functional stream from the counter addresses, without cycle timing."""
    _check_input(inp, g)
    flat = pad_bits(inp.bits, g.padding).reshape(-1)
    return flat[address_stream(g)]


@dataclass
class TraceRow:
    cycle: int
    action: str
    address: int


@dataclass
class OrchestratorResult:
    stream: np.ndarray
    cycles: int
    peak_occupancy: int
    push_stalls: int
    pop_stalls: int
    peak_reuse: int           # widest span base..pop address actually referenced
    trace: list[TraceRow] = field(default_factory=list)


class Orchestrator:
    """Cycle-level model: a bit-addressed RAM with a push pointer and base/offset read counters.

    Each cycle the consumer may pop one bit and the producer may push one.
    Flags are registered: ``full`` and the pop-readiness test use the state at
    the start of the cycle, so the next pop address never depends on data
    popped in the same cycle.
    """

    def __init__(self, g: LayerGeometry, holding: int | None = None, frames: int = 1):
        self.g = g
        self.frames = frames
        _, s_buf = buffer_requirements(g)
        self.holding = g.f_wp * g.c_i * g.t if holding is None else int(holding)
        if self.holding < 0:
            raise DomainError("holding area cannot be negative")
        self.depth = s_buf + self.holding
        self.ram = np.zeros(self.depth, dtype=np.uint8)
        self.inc = dict(stride_schedule(g))
        self.push_count = 0
        self.base = 0
        self.offset = 0
        # status register counters, innermost last
        self.win_row = self.win_col = self.frame = 0
        self.rep = self.t = self.kh = self.kw = self.ci = 0
        self.done = False
        self.full_reg = False

    @property
    def pop_address(self) -> int:
        return self.base + self.offset

    def occupancy(self) -> int:
        return self.push_count - self.base

    def _advance(self):
        """Move the counters past the element just popped."""
        g, inc = self.g, self.inc
        if self.ci + 1 < g.c_i:
            self.ci += 1
            self.offset += inc["channel"]
            return
        self.ci = 0
        if self.kw + 1 < g.k_w:
            self.kw += 1
            self.offset += inc["column"]
            return
        self.kw = 0
        if self.kh + 1 < g.k_h:
            self.kh += 1
            self.offset += inc["kernel_row"]
            return
        self.kh = 0
        if self.t + 1 < g.t:
            self.t += 1
            self.offset = self.t
            return
        self.t = 0
        self.offset = 0
        if self.rep + 1 < g.replicas:
            self.rep += 1
            return
        self.rep = 0
        if self.win_col + 1 < g.f_wo:
            self.win_col += 1
            self.base += inc["window"]
            return
        self.win_col = 0
        if self.win_row + 1 < g.f_ho:
            self.win_row += 1
            self.base += inc["row_end"]
            return
        self.win_row = 0
        if self.frame + 1 < self.frames:
            self.frame += 1
            self.base += inc["new_map"]
            return
        self.done = True

    def run(self, bits: np.ndarray, consumer_ready: Callable[[int], bool] | None = None,
            producer_valid: Callable[[int], bool] | None = None, respect_full: bool = True,
            record: bool = False, max_idle: int = 10_000) -> OrchestratorResult:
        """Stream ``bits`` (already padded, canonical order) through the buffer."""
        total_pops = self.g.pops_per_window * self.g.f_ho * self.g.f_wo * self.frames
        out = np.empty(total_pops, dtype=np.uint8)
        n_out = 0
        trace: list[TraceRow] = []
        peak = reuse = 0
        push_stalls = pop_stalls = 0
        idle = 0
        cycle = 0
        n_in = len(bits)
        while not self.done:
            push_at_start = self.push_count
            full = self.full_reg
            did_something = False
            # pop side
            want_pop = consumer_ready is None or consumer_ready(cycle)
            if want_pop:
                addr = self.pop_address
                if addr < push_at_start:
                    out[n_out] = self.ram[addr % self.depth]
                    reuse = max(reuse, self.offset + 1)
                    n_out += 1
                    if record:
                        trace.append(TraceRow(cycle, "pop", addr))
                    self._advance()
                    did_something = True
                else:
                    pop_stalls += 1
                    if record:
                        trace.append(TraceRow(cycle, "stall", addr))
            # push side
            has_data = self.push_count < n_in and (producer_valid is None or producer_valid(cycle))
            if has_data:
                if full:
                    if not respect_full:
                        raise ContractViolation(
                            f"cycle {cycle}: producer pushed into a full buffer (depth {self.depth})")
                    push_stalls += 1
                    if record:
                        trace.append(TraceRow(cycle, "stall", self.push_count))
                else:
                    self.ram[self.push_count % self.depth] = bits[self.push_count]
                    if record:
                        trace.append(TraceRow(cycle, "push", self.push_count))
                    self.push_count += 1
                    did_something = True
            peak = max(peak, self.occupancy())
            self.full_reg = self.occupancy() >= self.depth
            idle = 0 if did_something else idle + 1
            if idle > max_idle:
                raise ContractViolation(f"no progress for {max_idle} cycles at cycle {cycle}")
            cycle += 1
        return OrchestratorResult(out[:n_out], cycle, peak, push_stalls, pop_stalls, reuse, trace)


def orchestrate(inp: SpikeTensor, g: LayerGeometry, holding: int | None = None,
                consumer_ready: Callable[[int], bool] | None = None,
                producer_valid: Callable[[int], bool] | None = None,
                respect_full: bool = True, record: bool = False) -> OrchestratorResult:
    """Pad, then stream the input through a cycle-level Orchestrator."""
    _check_input(inp, g)
    bits = pad_bits(inp.bits, g.padding).reshape(-1)
    orch = Orchestrator(g, holding)
    return orch.run(bits, consumer_ready, producer_valid, respect_full, record)


def write_trace_csv(rows, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(("cycle", "action", "address"))
        for r in rows:
            wr.writerow((r.cycle, r.action, r.address))
