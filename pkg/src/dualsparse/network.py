"""Layer and network containers shared by compression, simulation and I/O.

Weights are stored as (c_o, k_h, k_w, c_i). That flattening order is the
order in which the orchestrator emits a window for one timestep, so the same
array doubles as the source of each output channel's bitmap mask.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, ShapeError
from .neuron import NeuronModel

FORMAT_QUANTIZED = "dualsparse-quantized/1"
FORMAT_REAL = "dualsparse-real/1"


def parse_padding(padding, k_h: int, k_w: int) -> int:
    """Per-side zero padding for 'same', 'valid' or an explicit amount."""
    if isinstance(padding, str):
        if padding == "valid":
            return 0
        if padding == "same":
            if k_h != k_w or k_h % 2 == 0:
                raise DomainError(f"'same' padding needs an odd square kernel, got {k_h}x{k_w}")
            return (k_h - 1) // 2
        padding = int(padding)
    if padding < 0:
        raise DomainError(f"padding must be non-negative, got {padding}")
    return int(padding)


def int_range(bits: int) -> tuple[int, int]:
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


@dataclass
class QuantizedLayer:
    kind: str
    c_o: int
    c_i: int
    k_h: int
    k_w: int
    padding: int
    t: int
    weights: np.ndarray
    bias: np.ndarray
    threshold: np.ndarray
    neuron: NeuronModel = NeuronModel.IF
    maxpool: bool = False
    weight_bits: int = 4
    wide_bits: int = 16

    def __post_init__(self):
        self.neuron = NeuronModel(self.neuron)
        self.weights = np.asarray(self.weights, dtype=np.int64)
        self.bias = np.asarray(self.bias, dtype=np.int64).reshape(-1)
        self.threshold = np.asarray(self.threshold, dtype=np.int64).reshape(-1)
        if self.kind not in ("conv", "fc"):
            raise DomainError(f"unknown layer kind {self.kind!r}")
        shape = (self.c_o, self.k_h, self.k_w, self.c_i)
        if self.weights.shape != shape:
            raise ShapeError(f"weights have shape {self.weights.shape}, expected {shape}")
        if self.bias.shape != (self.c_o,) or self.threshold.shape != (self.c_o,):
            raise ShapeError("bias and threshold need one entry per output channel")
        if self.kind == "fc" and self.padding:
            raise DomainError("fully-connected layers take no padding")
        self.check_ranges()

    def check_ranges(self):
        lo, hi = int_range(self.weight_bits)
        if self.weights.size and (self.weights.min() < lo or self.weights.max() > hi):
            raise DomainError(f"weights outside [{lo}, {hi}]")
        lo, hi = int_range(self.wide_bits)
        for name in ("bias", "threshold"):
            arr = getattr(self, name)
            if arr.min() < lo or arr.max() > hi:
                raise DomainError(f"{name} outside [{lo}, {hi}]")

    def conv_out_hw(self, f_h: int, f_w: int) -> tuple[int, int]:
        return f_h + 2 * self.padding - self.k_h + 1, f_w + 2 * self.padding - self.k_w + 1

    def out_hw(self, f_h: int, f_w: int) -> tuple[int, int]:
        ho, wo = self.conv_out_hw(f_h, f_w)
        if self.maxpool:
            ho, wo = ho // 2, wo // 2
        return ho, wo

    def weight_sparsity(self) -> float:
        return float((self.weights == 0).mean())

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "c_o": self.c_o, "c_i": self.c_i,
            "k_h": self.k_h, "k_w": self.k_w, "padding": self.padding, "t": self.t,
            "neuron": self.neuron.value, "maxpool": self.maxpool,
            "weight_bits": self.weight_bits, "wide_bits": self.wide_bits,
            "weights": self.weights.tolist(), "bias": self.bias.tolist(),
            "threshold": self.threshold.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizedLayer":
        return cls(**d)


@dataclass
class QuantizedNetwork:
    input_dims: tuple[int, int, int, int]
    layers: list[QuantizedLayer] = field(default_factory=list)

    def __post_init__(self):
        self.input_dims = tuple(int(d) for d in self.input_dims)
        self.validate()

    def validate(self):
        h, w, c, t = self.input_dims
        for i, layer in enumerate(self.layers):
            if layer.c_i != c or layer.t != t:
                raise ShapeError(f"layer {i} expects c_i={layer.c_i}, t={layer.t}; gets c={c}, t={t}")
            ho, wo = layer.conv_out_hw(h, w)
            if ho <= 0 or wo <= 0:
                raise ShapeError(f"layer {i} kernel does not fit its {h}x{w} input")
            if layer.kind == "fc" and (layer.k_h, layer.k_w) != (h, w):
                raise ShapeError(f"fc layer {i} kernel must span its {h}x{w} input")
            h, w = layer.out_hw(h, w)
            if h <= 0 or w <= 0:
                raise ShapeError(f"layer {i} maxpool leaves an empty map")
            c = layer.c_o

    def layer_input_dims(self) -> list[tuple[int, int, int, int]]:
        dims = []
        h, w, c, t = self.input_dims
        for layer in self.layers:
            dims.append((h, w, c, t))
            h, w = layer.out_hw(h, w)
            c = layer.c_o
        return dims

    def output_dims(self) -> tuple[int, int, int, int]:
        h, w, c, t = self.input_dims
        for layer in self.layers:
            h, w = layer.out_hw(h, w)
            c = layer.c_o
        return h, w, c, t

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_QUANTIZED,
            "input_dims": list(self.input_dims),
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizedNetwork":
        if d.get("format") != FORMAT_QUANTIZED:
            raise DomainError(f"not a quantized network file (format={d.get('format')!r})")
        return cls(tuple(d["input_dims"]), [QuantizedLayer.from_dict(x) for x in d["layers"]])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "QuantizedNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RealLayer:
    """Real-valued layer before quantization; same layout as QuantizedLayer."""

    kind: str
    c_o: int
    c_i: int
    k_h: int
    k_w: int
    padding: int
    t: int
    weights: np.ndarray
    bias: np.ndarray
    threshold: np.ndarray
    neuron: NeuronModel = NeuronModel.IF
    maxpool: bool = False

    def __post_init__(self):
        self.neuron = NeuronModel(self.neuron)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        self.threshold = np.asarray(self.threshold, dtype=np.float64).reshape(-1)
        shape = (self.c_o, self.k_h, self.k_w, self.c_i)
        if self.weights.shape != shape:
            raise ShapeError(f"weights have shape {self.weights.shape}, expected {shape}")
        if self.bias.shape != (self.c_o,) or self.threshold.shape != (self.c_o,):
            raise ShapeError("bias and threshold need one entry per output channel")


def load_real_network(path) -> tuple[tuple[int, int, int, int], list[RealLayer]]:
    d = json.loads(Path(path).read_text())
    if d.get("format") != FORMAT_REAL:
        raise DomainError(f"not a real-weights file (format={d.get('format')!r})")
    return tuple(d["input_dims"]), [RealLayer(**x) for x in d["layers"]]


def save_real_network(path, input_dims, layers: list[RealLayer]):
    doc = {"format": FORMAT_REAL, "input_dims": list(input_dims), "layers": []}
    for layer in layers:
        doc["layers"].append({
            "kind": layer.kind, "c_o": layer.c_o, "c_i": layer.c_i, "k_h": layer.k_h,
            "k_w": layer.k_w, "padding": layer.padding, "t": layer.t,
            "neuron": layer.neuron.value, "maxpool": layer.maxpool,
            "weights": layer.weights.tolist(), "bias": layer.bias.tolist(),
            "threshold": layer.threshold.tolist(),
        })
    Path(path).write_text(json.dumps(doc))
