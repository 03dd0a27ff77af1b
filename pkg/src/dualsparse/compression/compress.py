"""Whole-network compression entry point used by the command line."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DomainError
from ..network import QuantizedNetwork, RealLayer
from .channels import prune_network
from .lsq import QuantConfig, quantize_layer
from .training import TrainConfig, make_toy_problem, toy_train_prune


@dataclass
class CompressResult:
    network: QuantizedNetwork
    removed_channels: dict[int, list[int]] = field(default_factory=dict)
    loss: float | None = None
    baseline_loss: float | None = None
    weight_sparsity: float = 0.0


def compress_network(input_dims, layers: list[RealLayer], bits: int = 4, lam: float = 0.0,
                     epochs: int = 0, seed: int = 0) -> CompressResult:
    """Quantize (and with epochs > 0, rewire-train) a real-valued network.

    Training only exists at toy scale: it needs a two-layer fully-connected
    network on a 1x1 input and runs on the seeded synthetic task whose
    feature, class and timestep counts match that network. With epochs = 0
    every layer is LSQ-quantized from its max-magnitude scale and lam is
    unused. Silent hidden channels are removed afterwards in both cases.
    """
    qcfg = QuantConfig(weight_bits=bits)
    loss = base = None
    if epochs > 0:
        h, w, c, t = input_dims
        if len(layers) != 2 or (h, w) != (1, 1) or any(layer.kind != "fc" for layer in layers):
            raise DomainError("training needs a two-layer fully-connected network on a 1x1 input")
        l1, l2 = layers
        init = tuple((layer.weights.reshape(layer.c_o, -1), layer.bias, layer.threshold) for layer in layers)
        problem = make_toy_problem(seed, n_features=c, n_classes=l2.c_o, t=t)
        cfg = TrainConfig(hidden=l1.c_o, seed=seed, neuron=l1.neuron, init=init)
        report = toy_train_prune(problem, epochs, lam, qcfg, cfg)
        qlayers = report.network.layers
        loss, base = report.loss, report.baseline_loss
    else:
        qlayers = [quantize_layer(layer, qcfg)[0] for layer in layers]
    pruned, removed = prune_network(qlayers)
    net = QuantizedNetwork(tuple(input_dims), pruned)
    sizes = np.array([layer.weights.size for layer in net.layers])
    zeros = np.array([(layer.weights == 0).sum() for layer in net.layers])
    return CompressResult(net, removed, loss, base, float(zeros.sum() / sizes.sum()))
