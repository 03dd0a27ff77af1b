"""Deployable bitmap model files and spike tensor files.

FFLS layout (little-endian throughout):

    header   : b"FFLS", u16 version, u16 layer count, u16 x4 input (f_h, f_w, c, t)
    per layer: u8 kind (0 conv, 1 fc), u8 neuron (0 IF, 1 LIF), u8 maxpool, u8 padding,
               u16 x7 (c_o, c_i, k_h, k_w, t, p_co, p_ci),
               u32 mask byte count, mask blob,
               u32 weight count, weight blob (4-bit two's complement, low nibble first),
               i16 x c_o bias, i16 x c_o threshold

Masks and weights are laid out detector by detector. Detector d holds
channels d, d + p_co, d + 2*p_co, ... in that order. Each channel contributes
its mask segments of p_ci bits, with the last segment zero-padded. Its
nonzero weights follow in segment order, least significant position first.
Mask bits are packed LSB-first into bytes.

Spike files: b"SPKT", u16 version, u16 x4 dims (f_h, f_w, c, t), then the
bits in canonical order packed LSB-first.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detector import DetectorSlice, bits_to_int
from .errors import CompileError, ModelFormatError, ShapeError
from .network import QuantizedLayer, QuantizedNetwork
from .neuron import NeuronModel, SpikeTensor
from .orchestrator import LayerGeometry

MAGIC = b"FFLS"
VERSION = 1
SPIKE_MAGIC = b"SPKT"
SPIKE_VERSION = 1
DEFAULT_P_CI = 16

_HEADER = struct.Struct("<4sHH4H")
_LAYER = struct.Struct("<4B7H")


@dataclass
class CompiledLayer:
    kind: str
    c_o: int
    c_i: int
    k_h: int
    k_w: int
    t: int
    padding: int
    neuron: NeuronModel
    maxpool: bool
    p_co: int
    p_ci: int
    masks: np.ndarray            # (c_o, n_seg * p_ci) uint8
    ram: list[np.ndarray]        # nonzero weights per detector
    bias: np.ndarray
    threshold: np.ndarray
    _bases: list[int] = field(init=False, repr=False)

    def __post_init__(self):
        self.neuron = NeuronModel(self.neuron)
        self.masks = np.asarray(self.masks, dtype=np.uint8)
        self.bias = np.asarray(self.bias, dtype=np.int64)
        self.threshold = np.asarray(self.threshold, dtype=np.int64)
        if self.masks.shape != (self.c_o, self.n_seg * self.p_ci):
            raise ShapeError(f"mask array {self.masks.shape} does not match the layer geometry")
        if self.masks[:, self.window_len:].any():
            raise ShapeError("segment padding bits must be zero")
        self._bases = [0] * self.c_o
        for d in range(self.n_detectors):
            chans = range(d, self.c_o, self.p_co)
            counts = [int(self.masks[c].sum()) for c in chans]
            if sum(counts) != len(self.ram[d]):
                raise ShapeError(f"detector {d}: mask popcount {sum(counts)} != {len(self.ram[d])} weights")
            base = 0
            for c, n in zip(chans, counts):
                self._bases[c] = base
                base += n

    @property
    def window_len(self) -> int:
        return self.k_h * self.k_w * self.c_i

    @property
    def n_seg(self) -> int:
        return max(1, -(-self.window_len // self.p_ci))

    @property
    def n_detectors(self) -> int:
        return min(self.p_co, self.c_o)

    def mask_matrix(self) -> np.ndarray:
        return self.masks[:, :self.window_len]

    def channel_weights(self, c: int) -> np.ndarray:
        d = c % self.p_co
        base = self._bases[c]
        return self.ram[d][base:base + int(self.masks[c].sum())]

    def detector_slice(self, c: int) -> DetectorSlice:
        seg = self.masks[c].reshape(self.n_seg, self.p_ci)
        words = [bits_to_int(s) for s in seg]
        return DetectorSlice(words, self.channel_weights(c), int(self.bias[c]), int(self.threshold[c]),
                             self.p_ci, self._bases[c])

    def dense_weights(self) -> np.ndarray:
        """(c_o, window_len) weights reconstructed from the detector RAMs."""
        out = np.zeros((self.c_o, self.window_len), dtype=np.int64)
        m = self.mask_matrix().astype(bool)
        for c in range(self.c_o):
            out[c, m[c]] = self.channel_weights(c)
        return out

    def geometry(self, f_hi: int, f_wi: int, p_co: int | None = None) -> LayerGeometry:
        return LayerGeometry(f_hi, f_wi, self.c_i, self.c_o, self.k_h, self.k_w, self.t,
                             self.padding, p_co or self.p_co, self.p_ci)

    def to_quantized(self) -> QuantizedLayer:
        w = self.dense_weights().reshape(self.c_o, self.k_h, self.k_w, self.c_i)
        return QuantizedLayer(self.kind, self.c_o, self.c_i, self.k_h, self.k_w, self.padding, self.t,
                              w, self.bias, self.threshold, self.neuron, self.maxpool)


@dataclass
class ModelFile:
    input_dims: tuple[int, int, int, int]
    layers: list[CompiledLayer]
    version: int = VERSION

    def to_network(self) -> QuantizedNetwork:
        return QuantizedNetwork(self.input_dims, [cl.to_quantized() for cl in self.layers])

    def to_bytes(self) -> bytes:
        return encode_model(self)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelFile":
        return decode_model(Path(path).read_bytes())

    def __eq__(self, other):
        if not isinstance(other, ModelFile):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()


def compile_layer(layer: QuantizedLayer, p_co: int, p_ci: int = DEFAULT_P_CI) -> CompiledLayer:
    if p_co < 1 or p_ci < 1:
        raise CompileError(f"parallelism must be positive, got P_Co={p_co}, P_Ci={p_ci}")
    if layer.weight_bits != 4:
        raise CompileError(f"weights must be 4-bit, layer has {layer.weight_bits}")
    if layer.wide_bits > 16:
        raise CompileError("bias and threshold must fit 16 bits")
    flat = layer.weights.reshape(layer.c_o, -1)
    n = flat.shape[1]
    n_seg = max(1, -(-n // p_ci))
    masks = np.zeros((layer.c_o, n_seg * p_ci), dtype=np.uint8)
    masks[:, :n] = flat != 0
    ram = []
    for d in range(min(p_co, layer.c_o)):
        vals = [flat[c][flat[c] != 0] for c in range(d, layer.c_o, p_co)]
        ram.append(np.concatenate(vals).astype(np.int64) if vals else np.zeros(0, dtype=np.int64))
    return CompiledLayer(layer.kind, layer.c_o, layer.c_i, layer.k_h, layer.k_w, layer.t, layer.padding,
                         layer.neuron, layer.maxpool, p_co, p_ci, masks, ram, layer.bias.copy(),
                         layer.threshold.copy())


def compile_model(net: QuantizedNetwork, cfg) -> ModelFile:
    """Bitmap-pack every layer, distributing channels over cfg.p_co detectors."""
    p_co = list(cfg.p_co)
    if len(p_co) != len(net.layers):
        raise CompileError(f"{len(p_co)} parallelism entries for {len(net.layers)} layers")
    p_ci = list(getattr(cfg, "p_ci", None) or [DEFAULT_P_CI] * len(net.layers))
    if len(p_ci) != len(net.layers):
        raise CompileError(f"{len(p_ci)} segment lengths for {len(net.layers)} layers")
    try:
        net.validate()
    except ShapeError as exc:
        raise CompileError(f"inconsistent network geometry: {exc}") from exc
    layers = [compile_layer(layer, pc, pi) for layer, pc, pi in zip(net.layers, p_co, p_ci)]
    return ModelFile(tuple(net.input_dims), layers)


def _pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8), bitorder="little").tobytes()


def _unpack_bits(raw: bytes, n: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    if bits.size < n:
        raise ModelFormatError(f"expected {n} bits, blob holds {bits.size}")
    return bits[:n]


def _pack_nibbles(values: np.ndarray) -> bytes:
    v = np.asarray(values, dtype=np.int64)
    if v.size and (v.min() < -8 or v.max() > 7):
        raise CompileError("weight outside the 4-bit range")
    u = (v & 0xF).astype(np.uint8)
    if u.size % 2:
        u = np.concatenate([u, np.zeros(1, dtype=np.uint8)])
    return (u[0::2] | (u[1::2] << 4)).tobytes()


def _unpack_nibbles(raw: bytes, n: int) -> np.ndarray:
    b = np.frombuffer(raw, dtype=np.uint8)
    u = np.empty(b.size * 2, dtype=np.int64)
    u[0::2] = b & 0xF
    u[1::2] = b >> 4
    u = u[:n]
    return np.where(u >= 8, u - 16, u)


def _detector_order(cl: CompiledLayer) -> list[int]:
    return [c for d in range(cl.n_detectors) for c in range(d, cl.c_o, cl.p_co)]


def encode_model(m: ModelFile) -> bytes:
    out = bytearray(_HEADER.pack(MAGIC, m.version, len(m.layers), *m.input_dims))
    for cl in m.layers:
        out += _LAYER.pack(0 if cl.kind == "conv" else 1, 0 if cl.neuron is NeuronModel.IF else 1,
                           int(cl.maxpool), cl.padding, cl.c_o, cl.c_i, cl.k_h, cl.k_w, cl.t,
                           cl.p_co, cl.p_ci)
        order = _detector_order(cl)
        mask_blob = _pack_bits(cl.masks[order].reshape(-1))
        weights = np.concatenate(cl.ram) if cl.ram else np.zeros(0, dtype=np.int64)
        out += struct.pack("<I", len(mask_blob)) + mask_blob
        out += struct.pack("<I", weights.size) + _pack_nibbles(weights)
        out += cl.bias.astype("<i2").tobytes() + cl.threshold.astype("<i2").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError("file truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))


def decode_model(data: bytes) -> ModelFile:
    rd = _Reader(data)
    magic, version, n_layers, *dims = rd.unpack(_HEADER)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ModelFormatError(f"unsupported model version {version} (this reader handles {VERSION})")
    layers = []
    for _ in range(n_layers):
        kind, neuron, maxpool, padding, c_o, c_i, k_h, k_w, t, p_co, p_ci = rd.unpack(_LAYER)
        if kind > 1 or neuron > 1 or maxpool > 1 or min(c_o, c_i, k_h, k_w, t, p_co, p_ci) < 1:
            raise ModelFormatError("corrupt layer record")
        n_seg = max(1, -(-(k_h * k_w * c_i) // p_ci))
        (mask_len,) = struct.unpack("<I", rd.take(4))
        bits = _unpack_bits(rd.take(mask_len), c_o * n_seg * p_ci)
        (n_w,) = struct.unpack("<I", rd.take(4))
        weights = _unpack_nibbles(rd.take((n_w + 1) // 2), n_w)
        bias = np.frombuffer(rd.take(2 * c_o), dtype="<i2").astype(np.int64)
        thr = np.frombuffer(rd.take(2 * c_o), dtype="<i2").astype(np.int64)
        n_det = min(p_co, c_o)
        order = [c for d in range(n_det) for c in range(d, c_o, p_co)]
        masks = np.zeros((c_o, n_seg * p_ci), dtype=np.uint8)
        masks[order] = bits.reshape(c_o, n_seg * p_ci)
        if int(masks.sum()) != n_w:
            raise ModelFormatError(f"mask popcount {int(masks.sum())} != {n_w} stored weights")
        ram, pos = [], 0
        for d in range(n_det):
            cnt = int(sum(masks[c].sum() for c in range(d, c_o, p_co)))
            ram.append(weights[pos:pos + cnt])
            pos += cnt
        try:
            layers.append(CompiledLayer("conv" if kind == 0 else "fc", c_o, c_i, k_h, k_w, t, padding,
                                        NeuronModel.IF if neuron == 0 else NeuronModel.LIF,
                                        bool(maxpool), p_co, p_ci, masks, ram, bias, thr))
        except ShapeError as exc:
            raise ModelFormatError(str(exc)) from exc
    if rd.pos != len(data):
        raise ModelFormatError(f"{len(data) - rd.pos} trailing bytes")
    m = ModelFile(tuple(dims), layers, version)
    try:
        m.to_network()
    except (ShapeError, ValueError) as exc:
        raise ModelFormatError(f"inconsistent geometry chain: {exc}") from exc
    return m


def write_spikes(path, x: SpikeTensor):
    Path(path).write_bytes(struct.pack("<4sH4H", SPIKE_MAGIC, SPIKE_VERSION, *x.dims) + _pack_bits(x.flat()))


def read_spikes(path) -> SpikeTensor:
    data = Path(path).read_bytes()
    head = struct.Struct("<4sH4H")
    if len(data) < head.size:
        raise ModelFormatError("spike file truncated")
    magic, version, *dims = head.unpack_from(data)
    if magic != SPIKE_MAGIC:
        raise ModelFormatError(f"bad spike file magic {magic!r}")
    if version != SPIKE_VERSION:
        raise ModelFormatError(f"unsupported spike file version {version}")
    n = int(np.prod(dims))
    raw = data[head.size:]
    if len(raw) != -(-n // 8):
        raise ModelFormatError(f"spike payload is {len(raw)} bytes, expected {-(-n // 8)}")
    return SpikeTensor.from_flat(_unpack_bits(raw, n), dims)
