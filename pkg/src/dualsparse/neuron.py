"""Integer IF/LIF neuron dynamics and the dense reference inference path.

Everything here is exact integer arithmetic. Membrane potentials and input
currents are checked against a signed 32-bit accumulator; leaving that range
raises ``OverflowError`` instead of wrapping.

The dense path is the functional oracle for the sparse hardware model: for a
given output pixel and channel the potential is carried across all timesteps
before moving on, which is the same temporal-inner order the accelerator uses.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import DomainError, ShapeError

if TYPE_CHECKING:
    from .network import QuantizedLayer, QuantizedNetwork

ACC_BITS = 32
ACC_MIN = -(1 << (ACC_BITS - 1))
ACC_MAX = (1 << (ACC_BITS - 1)) - 1


class NeuronModel(str, Enum):
    IF = "IF"
    LIF = "LIF"


@dataclass(frozen=True)
class NeuronParams:
    model: NeuronModel
    v_threshold: int
    bias: int = 0
    tau_m: int = 2
    v_reset: int = 0

    def __post_init__(self):
        object.__setattr__(self, "model", NeuronModel(self.model))
        if self.model is NeuronModel.LIF and self.tau_m != 2:
            raise DomainError(f"LIF leak is fixed at tau_m=2, got {self.tau_m}")
        if self.v_reset != 0:
            raise DomainError("v_reset must be 0")


@dataclass(frozen=True)
class NeuronState:
    v: int = 0


def check_acc(value, what: str = "accumulator"):
    """Raise OverflowError if ``value`` (scalar or array) leaves the 32-bit range."""
    if isinstance(value, np.ndarray):
        if value.size and (value.min() < ACC_MIN or value.max() > ACC_MAX):
            raise OverflowError(f"{what} exceeds {ACC_BITS}-bit signed range")
    elif value < ACC_MIN or value > ACC_MAX:
        raise OverflowError(f"{what} {value} exceeds {ACC_BITS}-bit signed range")
    return value


def membrane_update(v, current, model: NeuronModel):
    """Potential before the threshold test. Works on ints and int arrays.

    LIF halves the gap to the input with floor division, i.e. the arithmetic
    right shift a tau_m=2 leak becomes in hardware.
    """
    if model is NeuronModel.LIF:
        return v + (current - v) // 2
    return v + current


def integrate_current(spikes: Sequence[int], weights: Sequence[int], bias: int) -> int:
    if len(spikes) != len(weights):
        raise ShapeError(f"{len(spikes)} spikes vs {len(weights)} weights")
    acc = int(bias)
    for s, w in zip(spikes, weights):
        if s:
            acc = check_acc(acc + int(w), "current")
    return check_acc(acc, "current")


def neuron_step(state: NeuronState, current: int, params: NeuronParams) -> tuple[NeuronState, int]:
    check_acc(current, "current")
    v = check_acc(membrane_update(state.v, int(current), params.model), "membrane potential")
    if v > params.v_threshold:
        return NeuronState(params.v_reset), 1
    return NeuronState(v), 0


class SpikeTensor:
    """Binary activations with dims (f_h, f_w, c, t).

    The canonical flat order is f_h outermost, then f_w, c, and t innermost,
    which is C order over the stored array.
    """

    __slots__ = ("bits",)

    def __init__(self, bits):
        arr = np.asarray(bits)
        if arr.ndim != 4:
            raise ShapeError(f"spike tensor must be 4-D (f_h, f_w, c, t), got shape {arr.shape}")
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"spike tensor dims must be positive, got {arr.shape}")
        if arr.dtype != np.uint8:
            if arr.size and not np.isin(arr, (0, 1)).all():
                raise DomainError("spike tensor values must be 0 or 1")
            arr = arr.astype(np.uint8)
        elif arr.size and arr.max() > 1:
            raise DomainError("spike tensor values must be 0 or 1")
        self.bits = arr

    @classmethod
    def zeros(cls, dims) -> "SpikeTensor":
        return cls(np.zeros(tuple(dims), dtype=np.uint8))

    @classmethod
    def from_flat(cls, flat, dims) -> "SpikeTensor":
        flat = np.asarray(flat, dtype=np.uint8)
        dims = tuple(int(d) for d in dims)
        if flat.size != int(np.prod(dims)):
            raise ShapeError(f"{flat.size} bits cannot fill dims {dims}")
        return cls(flat.reshape(dims))

    @classmethod
    def random(cls, dims, density: float, rng: np.random.Generator) -> "SpikeTensor":
        return cls((rng.random(tuple(dims)) < density).astype(np.uint8))

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(self.bits.shape)

    def flat(self) -> np.ndarray:
        return self.bits.reshape(-1)

    def density(self) -> float:
        return float(self.bits.mean())

    def __eq__(self, other):
        if not isinstance(other, SpikeTensor):
            return NotImplemented
        return self.dims == other.dims and bool(np.array_equal(self.bits, other.bits))

    def __repr__(self):
        return f"SpikeTensor(dims={self.dims}, ones={int(self.bits.sum())})"


def layer_currents(x: np.ndarray, layer: "QuantizedLayer") -> np.ndarray:
    """Input currents (f_ho, f_wo, c_o, t); the layer padding is applied here."""
    p = layer.padding
    xp = np.pad(x.astype(np.int64), ((p, p), (p, p), (0, 0), (0, 0)))
    # (f_ho, f_wo, c_i, t, k_h, k_w)
    win = np.lib.stride_tricks.sliding_window_view(xp, (layer.k_h, layer.k_w), axis=(0, 1))
    w = np.asarray(layer.weights, dtype=np.int64)
    cur = np.einsum("hwctyx,oyxc->hwot", win, w, optimize=True)
    cur = cur + np.asarray(layer.bias, dtype=np.int64)[None, None, :, None]
    return check_acc(cur, "current")


def run_layer_dense(inp: SpikeTensor, layer: "QuantizedLayer") -> SpikeTensor:
    """Dense loop-nest evaluation of one layer, including its optional maxpool."""
    f_h, f_w, c, t = inp.dims
    if c != layer.c_i or t != layer.t:
        raise ShapeError(f"input dims {inp.dims} do not match layer (c_i={layer.c_i}, t={layer.t})")
    ho, wo = layer.conv_out_hw(f_h, f_w)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"kernel {layer.k_h}x{layer.k_w} does not fit input {f_h}x{f_w}")

    cur = layer_currents(inp.bits, layer)
    thr = np.asarray(layer.threshold, dtype=np.int64)[None, None, :]
    model = NeuronModel(layer.neuron)
    v = np.zeros(cur.shape[:3], dtype=np.int64)
    out = np.zeros(cur.shape, dtype=np.uint8)
    for step in range(t):
        v = check_acc(membrane_update(v, cur[..., step], model), "membrane potential")
        fired = v > thr
        out[..., step] = fired
        v[fired] = 0

    if layer.maxpool:
        out = maxpool_reference(out)
    return SpikeTensor(out)


def maxpool_reference(bits: np.ndarray) -> np.ndarray:
    """2x2/stride-2 max over binary maps, trailing odd row/col dropped."""
    h, w = bits.shape[0] // 2 * 2, bits.shape[1] // 2 * 2
    if h == 0 or w == 0:
        raise ShapeError(f"cannot pool a {bits.shape[0]}x{bits.shape[1]} map")
    b = bits[:h, :w]
    return b.reshape(h // 2, 2, w // 2, 2, *b.shape[2:]).max(axis=(1, 3))


def run_network_dense(inp: SpikeTensor, net: "QuantizedNetwork") -> list[SpikeTensor]:
    """Outputs of every layer, in order."""
    outs = []
    x = inp
    for layer in net.layers:
        x = run_layer_dense(x, layer)
        outs.append(x)
    return outs


def classify(out: SpikeTensor) -> int:
    """Argmax of per-channel spike counts, lowest index wins ties."""
    counts = out.bits.sum(axis=(0, 1, 3))
    return int(np.argmax(counts))
