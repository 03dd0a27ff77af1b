import numpy as np
import pytest

from dualsparse.network import QuantizedLayer, QuantizedNetwork
from dualsparse.neuron import NeuronModel


def random_layer(rng, kind, c_i, c_o, h, w, t, k=3, padding=0, sparsity=0.5, maxpool=False,
                 neuron=None, thr_range=(0, 10)):
    if kind == "fc":
        k_h, k_w, padding = h, w, 0
    else:
        k_h = k_w = k
    wts = rng.integers(-8, 8, (c_o, k_h, k_w, c_i))
    wts[rng.random(wts.shape) < sparsity] = 0
    if neuron is None:
        neuron = NeuronModel.LIF if rng.random() < 0.5 else NeuronModel.IF
    return QuantizedLayer(kind, c_o, c_i, k_h, k_w, padding, t, wts,
                          rng.integers(-3, 4, c_o), rng.integers(*thr_range, c_o), neuron, maxpool)


def random_network(rng, sparsity=None, t=None, max_conv=3):
    """Small random conv stack ending in a fully-connected layer."""
    t = t or int(rng.choice([1, 2, 4]))
    sparsity = float(rng.choice([0, 0.5, 0.85, 0.95])) if sparsity is None else sparsity
    h = w = int(rng.integers(3, 7))
    c = int(rng.integers(1, 4))
    dims = (h, w, c, t)
    layers = []
    for _ in range(int(rng.integers(0, max_conv + 1))):
        k = int(rng.choice([1, 3]))
        p = int(rng.integers(0, 2)) if k == 3 else 0
        if h + 2 * p - k + 1 < 1:
            p = 1
        c_o = int(rng.integers(1, 5))
        ho = h + 2 * p - k + 1
        mp = bool(rng.random() < 0.3 and ho >= 2)
        layer = random_layer(rng, "conv", c, c_o, h, w, t, k, p, sparsity, mp)
        layers.append(layer)
        h, w = layer.out_hw(h, w)
        c = c_o
    layers.append(random_layer(rng, "fc", c, int(rng.integers(1, 5)), h, w, t, sparsity=sparsity))
    return QuantizedNetwork(dims, layers)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
