import struct

import numpy as np
import pytest

from dualsparse.errors import CompileError, ModelFormatError
from dualsparse.model_io import (ModelFile, compile_layer, compile_model, decode_model, read_spikes,
                                 write_spikes)
from dualsparse.network import QuantizedLayer, QuantizedNetwork
from dualsparse.neuron import SpikeTensor, run_network_dense
from dualsparse.pipeline import PipelineConfig, simulate

from conftest import random_network


def _tiny():
    w = np.array([1, 0, -1]).reshape(1, 1, 1, 3)
    return QuantizedNetwork((1, 1, 3, 1), [QuantizedLayer("fc", 1, 3, 1, 1, 0, 1, w, [2], [5])])


def test_hand_packed_bytes():
    data = compile_model(_tiny(), PipelineConfig([1], [4])).to_bytes()
    want = struct.pack("<4sHH4H", b"FFLS", 1, 1, 1, 1, 3, 1)
    want += struct.pack("<4B7H", 1, 0, 0, 0, 1, 3, 1, 1, 1, 1, 4)
    want += struct.pack("<I", 1) + bytes([0b0101])
    want += struct.pack("<I", 2) + bytes([0xF1])     # 1 in the low nibble, -1 in the high one
    want += struct.pack("<hh", 2, 5)
    assert data == want


def test_round_trip_random(tmp_path, rng):
    for _ in range(10):
        net = random_network(rng)
        p_co = [int(rng.integers(1, layer.c_o + 1)) for layer in net.layers]
        m = compile_model(net, PipelineConfig(p_co, [int(rng.choice([1, 3, 8]))] * len(p_co)))
        m.save(tmp_path / "m.ffls")
        back = ModelFile.load(tmp_path / "m.ffls")
        assert back == m
        assert back.to_bytes() == (tmp_path / "m.ffls").read_bytes()
        for a, b in zip(back.to_network().layers, net.layers):
            assert np.array_equal(a.weights, b.weights)
            assert np.array_equal(a.bias, b.bias) and np.array_equal(a.threshold, b.threshold)


def test_compile_deterministic(rng):
    net = random_network(rng)
    cfg = PipelineConfig([1] * len(net.layers))
    assert compile_model(net, cfg).to_bytes() == compile_model(net, cfg).to_bytes()


def test_detector_distribution(rng):
    w = rng.integers(1, 8, (5, 1, 1, 4))
    layer = QuantizedLayer("fc", 5, 4, 1, 1, 0, 1, w, [0] * 5, [1] * 5)
    cl = compile_layer(layer, p_co=2, p_ci=4)
    assert cl.n_detectors == 2
    assert np.array_equal(cl.ram[0], w[[0, 2, 4]].reshape(-1))
    assert np.array_equal(cl.ram[1], w[[1, 3]].reshape(-1))


def test_empty_weight_channel():
    w = np.zeros((2, 1, 1, 3), dtype=int)
    w[1, 0, 0, 0] = 3
    layer = QuantizedLayer("fc", 2, 3, 1, 1, 0, 1, w, [0, 0], [1, 1])
    cl = compile_layer(layer, p_co=2, p_ci=4)
    assert cl.ram[0].size == 0 and not cl.masks[0].any()


def test_one_layer_decode_and_simulate(rng):
    m = decode_model(compile_model(_tiny(), PipelineConfig([1], [4])).to_bytes())
    for bits in range(8):
        x = SpikeTensor.from_flat([(bits >> i) & 1 for i in range(3)], (1, 1, 3, 1))
        assert simulate(m, x).output == run_network_dense(x, _tiny())[-1]


def test_version_and_magic_rejected():
    data = bytearray(compile_model(_tiny(), PipelineConfig([1])).to_bytes())
    bad = bytearray(data)
    bad[4:6] = struct.pack("<H", 2)
    with pytest.raises(ModelFormatError, match="version"):
        decode_model(bytes(bad))
    bad = bytearray(data)
    bad[0:4] = b"XXXX"
    with pytest.raises(ModelFormatError, match="magic"):
        decode_model(bytes(bad))


def test_corruption_detected():
    data = compile_model(_tiny(), PipelineConfig([1], [4])).to_bytes()
    with pytest.raises(ModelFormatError):
        decode_model(data[:-1])
    with pytest.raises(ModelFormatError):
        decode_model(data + b"\0")
    # flip a mask bit so the popcount no longer matches the weight count
    i = data.index(bytes([0b0101]))
    with pytest.raises(ModelFormatError):
        decode_model(data[:i] + bytes([0b0111]) + data[i + 1:])


def test_compile_errors(rng):
    net = random_network(rng)
    with pytest.raises(CompileError):
        compile_model(net, PipelineConfig([1] * (len(net.layers) + 1)))
    with pytest.raises(CompileError):
        compile_layer(net.layers[0], 0)


def test_spike_file_round_trip(tmp_path, rng):
    x = SpikeTensor.random((3, 5, 2, 3), 0.5, rng)
    write_spikes(tmp_path / "x.spk", x)
    assert read_spikes(tmp_path / "x.spk") == x
    assert (tmp_path / "x.spk").stat().st_size == 14 + -(-90 // 8)
    (tmp_path / "bad.spk").write_bytes(b"SPKT")
    with pytest.raises(ModelFormatError):
        read_spikes(tmp_path / "bad.spk")
