"""Layer-pipelined simulation: padding, orchestrator, detector array, neuron update, maxpool.

Functional results come from the compiled bitmap model and are checked
against the dense oracle. Timing is a tandem-queue model at output-pixel
granularity:

- An output pixel's service time is the sum over its channel replicas of
  the slowest detector's issue cycles.
- A window may start once its last input pixel has been pushed into the line
  buffer.
- A pixel can only be pushed when the pixel ``capacity`` places earlier has
  been released.
- A finished pixel only leaves its stage when the next stage accepts it.

The cross-layer dependencies are solved by repeated forward sweeps until the
schedule stops changing.
"""
from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .detector import PIPELINE_DEPTH, issue_cycles_from_matches, segment_matches
from .errors import BudgetError, ContractViolation, DomainError, ShapeError
from .network import QuantizedNetwork, parse_padding
from .neuron import (NeuronModel, SpikeTensor, check_acc, classify, maxpool_reference,
                     membrane_update, run_network_dense)
from .orchestrator import buffer_requirements, orchestrate, orchestrate_fast, pad_bits

DEFAULT_CLOCK_HZ = 333e6


def pad(inp: SpikeTensor, mode, k: int = 3) -> SpikeTensor:
    """Zero border for 'same' (odd k) or an explicit amount; 'valid' is the identity."""
    return SpikeTensor(pad_bits(inp.bits, parse_padding(mode, k, k)))


def maxpool_spikes(inp: SpikeTensor, window: int = 2, stride: int = 2) -> SpikeTensor:
    """OR over each 2x2 block; a trailing odd row or column is dropped."""
    if window != 2 or stride != 2:
        raise DomainError("only 2x2 pooling with stride 2 is modelled")
    return SpikeTensor(maxpool_reference(inp.bits))


def estimate_spike_sparsity(net: QuantizedNetwork, batches: int = 4, batch_size: int = 8,
                            rng: np.random.Generator | None = None,
                            input_density: float = 0.5) -> list[float]:
    """Mean fraction of 1-bits at each layer's input over random Bernoulli inputs.

    Entry 0 is the network input itself. The values are densities (the
    workload-scaling convention); sparsity is one minus these.
    """
    if batches < 1:
        raise DomainError("need at least one batch")
    rng = rng or np.random.default_rng(0)
    ones = np.zeros(len(net.layers))
    total = np.zeros(len(net.layers))
    for _ in range(batches * batch_size):
        x = SpikeTensor.random(net.input_dims, input_density, rng)
        outs = [x] + run_network_dense(x, net)[:-1]
        for i, o in enumerate(outs):
            ones[i] += o.bits.sum()
            total[i] += o.bits.size
    return [float(a / b) for a, b in zip(ones, total)]


# --- architecture strings and workload balancing -------------------------

@dataclass(frozen=True)
class LayerShape:
    kind: str
    c_o: int
    c_i: int
    f_ho: int
    f_wo: int
    k_h: int
    k_w: int
    t: int
    padding: int = 0
    maxpool: bool = False

    @property
    def mac(self) -> int:
        return self.c_o * self.c_i * self.f_wo * self.f_ho * self.k_w * self.k_h * self.t


_CONV = re.compile(r"^(\d+)c(\d+)(?:p(\d+))?$")
_FC = re.compile(r"^(\d+)(?:fc)?$")


def parse_arch(text: str, t: int = 4) -> list[LayerShape]:
    """Parse strings like '1x28x28-8c3p1-16c3p2-mp2-...-10fc' (input is CxHxW)."""
    tokens = text.strip().split("-")
    try:
        c, h, w = (int(v) for v in tokens[0].split("x"))
    except ValueError:
        raise DomainError(f"bad input spec {tokens[0]!r}; expected CxHxW") from None
    shapes: list[LayerShape] = []
    for tok in tokens[1:]:
        if tok == "mp2":
            if not shapes or shapes[-1].maxpool:
                raise DomainError("mp2 must follow a layer")
            shapes[-1] = LayerShape(**{**asdict(shapes[-1]), "maxpool": True})
            h, w = h // 2, w // 2
            continue
        m = _CONV.match(tok)
        if m:
            c_o, k, p = int(m[1]), int(m[2]), int(m[3] or 0)
            ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
            shapes.append(LayerShape("conv", c_o, c, ho, wo, k, k, t, p))
            c, h, w = c_o, ho, wo
            continue
        m = _FC.match(tok)
        if m:
            shapes.append(LayerShape("fc", int(m[1]), c, 1, 1, h, w, t))
            c, h, w = int(m[1]), 1, 1
            continue
        raise DomainError(f"unrecognised layer token {tok!r}")
    return shapes


SCNN_MODELS = {
    "SCNN5": "1x28x28-8c3p1-16c3p2-mp2-32c3p1-mp2-64c3p1-64c3p1-mp2-10fc",
    "SCNN7": "2x48x48-16c3p1-32c3p1-mp2-32c3p1-64c3p1-mp2-64c3p1-128c3p1-mp2-128c3p1-10",
    "SCNN9": "3x32x32-16c3p1-32c3p1-mp2-32c3p1-64c3p1-mp2-64c3p1-128c3p1-mp2-128c3p1-256c3p1-mp2-10",
}


def network_shapes(net: QuantizedNetwork) -> list[LayerShape]:
    shapes = []
    for layer, (h, w, _c, _t) in zip(net.layers, net.layer_input_dims()):
        ho, wo = layer.conv_out_hw(h, w)
        shapes.append(LayerShape(layer.kind, layer.c_o, layer.c_i, ho, wo, layer.k_h, layer.k_w,
                                 layer.t, layer.padding, layer.maxpool))
    return shapes


def _frac(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


def unit_workloads(shapes: Sequence[LayerShape], s1, s2, p_co) -> list[Fraction]:
    return [_frac(sh.mac) * _frac(a) * _frac(b) / p for sh, a, b, p in zip(shapes, s1, s2, p_co)]


def balance_parallelism(net, s1: Sequence[float], s2: Sequence[float], budget: int | None = None,
                        target: float | None = None, cap_to_channels: bool = True) -> list[int]:
    """Per-layer P_Co equalising MAC * s1 * s2 / P_Co across the pipeline.

    Step 1 sets P_l = floor(W_l / w) with w the lightest layer's workload.
    Step 2 lowers w through successive breakpoints, each adding one unit to at
    least one layer, until the next step would exceed ``budget`` (total units),
    the heaviest per-unit workload is at most ``target``, or no layer can grow.
    Every stop point keeps max/min per-unit workload below 1 + 1/min(P).
    With ``cap_to_channels`` a layer never gets more units than output channels.
    """
    shapes = network_shapes(net) if isinstance(net, QuantizedNetwork) else list(net)
    n = len(shapes)
    if len(s1) != n or len(s2) != n:
        raise ShapeError(f"need one s1 and s2 per layer ({n})")
    for v in list(s1) + list(s2):
        if not 0 < v <= 1:
            raise DomainError(f"occupancy fractions must lie in (0, 1], got {v}")
    if budget is not None and budget <= 0:
        raise BudgetError("budget must be positive")
    work = [_frac(sh.mac) * _frac(a) * _frac(b) for sh, a, b in zip(shapes, s1, s2)]
    caps = [sh.c_o if cap_to_channels else None for sh in shapes]

    def alloc(w: Fraction) -> list[int]:
        out = []
        for wl, cap in zip(work, caps):
            p = max(1, math.floor(wl / w))
            out.append(min(p, cap) if cap else p)
        return out

    w = min(work)
    p = alloc(w)
    if budget is not None and sum(p) > budget:
        raise BudgetError(f"balanced allocation needs {sum(p)} units, budget is {budget}")
    if budget is None and target is None:
        return p
    while True:
        if target is not None and max(wl / pl for wl, pl in zip(work, p)) <= _frac(target):
            return p
        growable = [wl / (pl + 1) for wl, pl, cap in zip(work, p, caps) if cap is None or pl < cap]
        if not growable:
            return p
        w_next = max(growable)
        p_next = alloc(w_next)
        if budget is not None and sum(p_next) > budget:
            return p
        p, w = p_next, w_next


def workload_spread(shapes: Sequence[LayerShape], s1, s2, p_co) -> Fraction:
    """max/min per-unit workload across layers."""
    u = unit_workloads(shapes, s1, s2, p_co)
    return max(u) / min(u)


# --- simulation -----------------------------------------------------------

@dataclass
class PipelineConfig:
    p_co: list[int]
    p_ci: list[int] | None = None
    holding: list[int | None] | None = None
    clock_hz: float = DEFAULT_CLOCK_HZ

    def holding_for(self, i: int) -> int | None:
        return None if self.holding is None else self.holding[i]


@dataclass
class StageStats:
    layer: int
    cycles: int            # first start to last departure
    stalls: int            # cycles minus busy cycles
    bubbles: int           # bubble slots on each replica's critical detector
    fetches: int           # matched (spike, weight) pairs over all detectors
    issue_cycles: int      # issue slots summed over every detector
    busy: int
    output_spikes: int
    input_density: float
    spike_density: float   # density of this stage's output spikes


@dataclass
class SimResult:
    output: SpikeTensor
    outputs: list[SpikeTensor]
    classification: int
    stats: list[StageStats]
    total_cycles: int
    clock_hz: float = DEFAULT_CLOCK_HZ

    @property
    def issue_cycles(self) -> int:
        return sum(s.issue_cycles for s in self.stats)

    def summary(self) -> dict:
        busy = [s.busy for s in self.stats]
        bottleneck = int(np.argmax(busy)) if busy else 0
        interval = max(busy) if busy else 0
        return {
            "total_cycles": self.total_cycles,
            "issue_cycles": self.issue_cycles,
            "bottleneck_layer": bottleneck,
            "bottleneck_busy_cycles": interval,
            "classification": self.classification,
            "clock_hz": self.clock_hz,
            "latency_s": self.total_cycles / self.clock_hz,
            "projected_outputs_per_s": (self.clock_hz / interval) if interval else None,
            "note": "model-projected from cycle counts at the declared clock; not a measurement",
        }


@dataclass
class _LayerRun:
    out_conv: np.ndarray       # (ho, wo, c_o, t) before pooling
    out: np.ndarray            # after optional pooling
    service: np.ndarray        # (ho*wo,) cycles per window
    issue: int
    bubbles: int
    fetches: int


def _layer_fast(x: np.ndarray, cl, p_co: int) -> _LayerRun:
    g = cl.geometry(x.shape[0], x.shape[1], p_co)
    stream = orchestrate_fast(SpikeTensor(x), g)
    n_win = g.f_ho * g.f_wo
    wins = stream.reshape(n_win, g.replicas, g.t, g.window_len)
    mask = cl.mask_matrix()                                     # (c_o, window_len)
    weights = cl.dense_weights()                                # decoded from detector RAM
    c_o = cl.c_o
    groups = np.arange(c_o) // p_co
    cur = np.empty((n_win, g.t, c_o), dtype=np.int64)
    matches = np.empty((n_win, g.t, c_o, -(-g.window_len // cl.p_ci)), dtype=np.int64)
    for r in range(g.replicas):
        ch = np.flatnonzero(groups == r)
        xr = wins[:, r].astype(np.int64)                        # (win, t, window)
        cur[:, :, ch] = xr @ weights[ch].T
        matches[:, :, ch] = segment_matches(wins[:, r], mask[ch], cl.p_ci)
    cur += cl.bias[None, None, :]
    check_acc(cur, "current")
    v = np.zeros((n_win, c_o), dtype=np.int64)
    spikes = np.zeros((n_win, c_o, g.t), dtype=np.uint8)
    model = NeuronModel(cl.neuron)
    for ti in range(g.t):
        v = check_acc(membrane_update(v, cur[:, ti], model), "membrane potential")
        fired = v > cl.threshold[None, :]
        spikes[:, :, ti] = fired
        v[fired] = 0
    cyc = issue_cycles_from_matches(matches).sum(axis=1)        # (win, c_o)
    bub = (matches == 0).sum(axis=(1, 3))                       # (win, c_o)
    service = np.zeros(n_win, dtype=np.int64)
    bubbles = 0
    for r in range(g.replicas):
        ch = np.flatnonzero(groups == r)
        crit = ch[np.argmax(cyc[:, ch], axis=1)]
        service += cyc[np.arange(n_win), crit]
        bubbles += int(bub[np.arange(n_win), crit].sum())
    out_conv = spikes.reshape(g.f_ho, g.f_wo, c_o, g.t)
    out = maxpool_reference(out_conv) if cl.maxpool else out_conv
    return _LayerRun(out_conv, out, service, int(cyc.sum()), bubbles, int(matches.sum()))


def _layer_cycle(x: np.ndarray, cl, p_co: int, holding) -> _LayerRun:
    """Same layer through the cycle-level orchestrator and per-detector runs."""
    from .detector import detector_run
    from .neuron import NeuronParams

    g = cl.geometry(x.shape[0], x.shape[1], p_co)
    res = orchestrate(SpikeTensor(x), g, holding=holding)
    n_win = g.f_ho * g.f_wo
    wins = res.stream.reshape(n_win, g.replicas, g.t, g.window_len)
    spikes = np.zeros((n_win, cl.c_o, g.t), dtype=np.uint8)
    service = np.zeros(n_win, dtype=np.int64)
    issue = bubbles = fetches = 0
    for r in range(g.replicas):
        chans = [c for c in range(cl.c_o) if c // p_co == r]
        per = np.zeros((n_win, len(chans)), dtype=np.int64)
        bub = np.zeros((n_win, len(chans)), dtype=np.int64)
        for j, c in enumerate(chans):
            sl = cl.detector_slice(c)
            params = NeuronParams(cl.neuron, int(cl.threshold[c]))
            for p in range(n_win):
                run = detector_run(wins[p:p + 1, r], sl, params, g.t, detector_id=c % p_co, record=False)
                spikes[p, c] = run.spikes[0]
                per[p, j] = run.issue_cycles
                bub[p, j] = run.bubbles
                fetches += run.fetches
        issue += int(per.sum())
        crit = np.argmax(per, axis=1)
        service += per[np.arange(n_win), crit]
        bubbles += int(bub[np.arange(n_win), crit].sum())
    out_conv = spikes.reshape(g.f_ho, g.f_wo, cl.c_o, g.t)
    out = maxpool_reference(out_conv) if cl.maxpool else out_conv
    return _LayerRun(out_conv, out, service, issue, bubbles, fetches)


@dataclass
class _Stage:
    f_hp: int
    f_wp: int
    f_ho: int
    f_wo: int
    k_h: int
    k_w: int
    pad: int
    capacity: int            # pixels the line buffer holds
    service: np.ndarray
    maxpool: bool
    start: np.ndarray = field(init=False)
    finish: np.ndarray = field(init=False)
    dep: np.ndarray = field(init=False)
    push: np.ndarray = field(init=False)

    def __post_init__(self):
        n = self.f_ho * self.f_wo
        self.start = np.zeros(n, dtype=np.int64)
        self.finish = np.zeros(n, dtype=np.int64)
        self.dep = np.zeros(n, dtype=np.int64)
        self.push = np.zeros(self.f_hp * self.f_wp, dtype=np.int64)


def _produced_pixel(stage: _Stage, p: int) -> int | None:
    """Index (in the stage's unpadded output raster) of the pixel window p completes."""
    oh, ow = divmod(p, stage.f_wo)
    if not stage.maxpool:
        return oh * stage.f_wo + ow
    if oh % 2 == 1 and ow % 2 == 1 and oh // 2 < stage.f_ho // 2 and ow // 2 < stage.f_wo // 2:
        return (oh // 2) * (stage.f_wo // 2) + ow // 2
    return None


def _schedule(stages: list[_Stage], max_sweeps: int = 1000) -> None:
    """Solve the pixel-level max-plus timing system by repeated forward sweeps."""
    n_layers = len(stages)
    for _sweep in range(max_sweeps):
        changed = False
        arrival = None    # unpadded pixel arrival times for the current stage
        for li, st in enumerate(stages):
            h_in, w_in = st.f_hp - 2 * st.pad, st.f_wp - 2 * st.pad
            if li == 0:
                arrival = np.arange(h_in * w_in, dtype=np.int64)
            push = np.zeros_like(st.push)
            latest_real = 0
            for q in range(st.f_hp * st.f_wp):
                y, x = divmod(q, st.f_wp)
                yi, xi = y - st.pad, x - st.pad
                if 0 <= yi < h_in and 0 <= xi < w_in:
                    av = int(arrival[yi * w_in + xi])
                    latest_real = av
                else:
                    av = latest_real
                t = av
                if q:
                    t = max(t, int(push[q - 1]))
                j = q - st.capacity
                if j >= 0:
                    t = max(t, _released(st, j))
                push[q] = t
            nxt = stages[li + 1] if li + 1 < n_layers else None
            start = np.empty_like(st.start)
            finish = np.empty_like(st.finish)
            dep = np.empty_like(st.dep)
            prev_dep = 0
            out_arrival = {}
            for p in range(st.f_ho * st.f_wo):
                oh, ow = divmod(p, st.f_wo)
                need = (oh + st.k_h - 1) * st.f_wp + (ow + st.k_w - 1)
                s = max(prev_dep, int(push[need]))
                f = s + int(st.service[p])
                d = f
                pix = _produced_pixel(st, p)
                if pix is not None:
                    out_arrival[pix] = f
                    if nxt is not None:
                        d = max(d, _downstream_push(nxt, pix, st))
                start[p], finish[p], dep[p] = s, f, d
                prev_dep = d
            if not (np.array_equal(push, st.push) and np.array_equal(dep, st.dep)
                    and np.array_equal(finish, st.finish)):
                changed = True
            st.push, st.start, st.finish, st.dep = push, start, finish, dep
            if nxt is not None:
                n_out = (nxt.f_hp - 2 * nxt.pad) * (nxt.f_wp - 2 * nxt.pad)
                arrival = np.array([out_arrival[i] for i in range(n_out)], dtype=np.int64)
        if not changed:
            return
    raise ContractViolation(f"pipeline schedule did not settle after {max_sweeps} sweeps")


def _released(st: _Stage, j: int) -> int:
    """Time pixel j leaves the line buffer: when the last window based at or before it finishes."""
    y, x = divmod(j, st.f_wp)
    oh = min(y, st.f_ho - 1)
    ow = min(x, st.f_wo - 1) if y <= st.f_ho - 1 else st.f_wo - 1
    return int(st.finish[oh * st.f_wo + ow])


def _downstream_push(nxt: _Stage, pix: int, prod: _Stage) -> int:
    """Push time of producer pixel ``pix`` into the next stage's padded raster."""
    w_in = nxt.f_wp - 2 * nxt.pad
    yi, xi = divmod(pix, w_in)
    return int(nxt.push[(yi + nxt.pad) * nxt.f_wp + xi + nxt.pad])


def simulate(model, inp: SpikeTensor, cfg: PipelineConfig | None = None, engine: str = "fast") -> SimResult:
    """Run a compiled model (or a QuantizedNetwork, compiled on the fly) on one input."""
    from .model_io import ModelFile, compile_model

    if isinstance(model, QuantizedNetwork):
        if cfg is None:
            cfg = PipelineConfig([1] * len(model.layers))
        model = compile_model(model, cfg)
    if not isinstance(model, ModelFile):
        raise DomainError(f"cannot simulate a {type(model).__name__}")
    if cfg is None:
        cfg = PipelineConfig([cl.p_co for cl in model.layers])
    if len(cfg.p_co) != len(model.layers):
        raise ShapeError("one P_Co per layer is required")
    if any(int(p) != cl.p_co for p, cl in zip(cfg.p_co, model.layers)):
        raise ShapeError("configuration P_Co differs from the compiled detector layout")
    if tuple(inp.dims) != tuple(model.input_dims):
        raise ShapeError(f"input dims {inp.dims} do not match model input {model.input_dims}")
    if engine not in ("fast", "cycle"):
        raise DomainError(f"unknown engine {engine!r}")

    x = inp.bits
    outs: list[SpikeTensor] = []
    stages: list[_Stage] = []
    stats: list[StageStats] = []
    for i, cl in enumerate(model.layers):
        p_co = cfg.p_co[i]
        h, w = x.shape[:2]
        g = cl.geometry(h, w, p_co)
        hold = cfg.holding_for(i)
        if engine == "fast":
            run = _layer_fast(x, cl, p_co)
        else:
            run = _layer_cycle(x, cl, p_co, hold)
        _, s_buf = buffer_requirements(g)
        holding = g.f_wp * g.c_i * g.t if hold is None else hold
        cap = (s_buf + holding) // (g.c_i * g.t)
        stages.append(_Stage(g.f_hp, g.f_wp, g.f_ho, g.f_wo, g.k_h, g.k_w, g.padding, cap,
                             run.service, cl.maxpool))
        stats.append(StageStats(i, 0, 0, run.bubbles, run.fetches, run.issue, int(run.service.sum()),
                                int(run.out.sum()), float(x.mean()), float(run.out.mean())))
        x = run.out
        outs.append(SpikeTensor(x))
    _schedule(stages)
    for st, ss in zip(stages, stats):
        ss.cycles = int(st.dep[-1] - st.start[0]) if st.dep.size else 0
        ss.stalls = ss.cycles - ss.busy
    total = int(stages[-1].dep[-1]) + PIPELINE_DEPTH - 1 if stages else 0
    return SimResult(outs[-1], outs, classify(outs[-1]), stats, total, cfg.clock_hz)


STATS_COLUMNS = ("layer", "cycles", "stalls", "bubbles", "fetches", "spike_density",
                 "issue_cycles", "busy", "output_spikes", "input_density")


def write_stats_csv(result: SimResult, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(STATS_COLUMNS)
        for s in result.stats:
            wr.writerow((s.layer, s.cycles, s.stalls, s.bubbles, s.fetches, f"{s.spike_density:.6f}",
                         s.issue_cycles, s.busy, s.output_spikes, f"{s.input_density:.6f}"))


def write_summary_json(result: SimResult, path):
    with open(path, "w") as fh:
        json.dump(result.summary(), fh, indent=2)
