"""Silent output-channel detection by replaying bias-only membrane dynamics."""
from __future__ import annotations

import numpy as np

from ..errors import DomainError, ShapeError
from ..network import QuantizedLayer
from ..neuron import NeuronModel


def prune_silent_channels(biases, thresholds, t: int) -> list[int]:
    """Channels whose bias alone pushes the potential past threshold within t steps.

    The potential starts at 0 and gains the bias every step (no leak); a
    channel is active once it is strictly above its threshold.
    """
    if t < 1:
        raise DomainError(f"need at least one timestep, got {t}")
    biases = [int(b) for b in np.asarray(biases).reshape(-1)]
    thresholds = [int(v) for v in np.asarray(thresholds).reshape(-1)]
    if len(biases) != len(thresholds):
        raise ShapeError(f"{len(biases)} biases vs {len(thresholds)} thresholds")
    active = []
    for c, (b, v_th) in enumerate(zip(biases, thresholds)):
        v = 0
        for _ in range(t):
            v += b
            if v > v_th:
                active.append(c)
                break
    return active


def removable_channels(layer: QuantizedLayer) -> list[int]:
    """All-zero-weight channels that can never fire.

    For LIF the bias-only replay above over-estimates the potential only when
    the threshold is non-negative, so negative-threshold LIF channels are kept.
    """
    active = set(prune_silent_channels(layer.bias, layer.threshold, layer.t))
    zero = ~layer.weights.reshape(layer.c_o, -1).any(axis=1)
    out = []
    for c in range(layer.c_o):
        if not zero[c] or c in active:
            continue
        if layer.neuron is NeuronModel.LIF and layer.threshold[c] < 0:
            continue
        out.append(c)
    return out


def drop_output_channels(layers: list[QuantizedLayer], index: int, channels) -> list[QuantizedLayer]:
    """Remove output channels of ``layers[index]`` and the matching inputs downstream."""
    channels = sorted(set(int(c) for c in channels))
    layer = layers[index]
    keep = np.array([c for c in range(layer.c_o) if c not in channels], dtype=np.int64)
    if keep.size == 0:
        raise DomainError("cannot remove every output channel of a layer")
    out = list(layers)
    out[index] = _replace(layer, c_o=int(keep.size), weights=layer.weights[keep],
                          bias=layer.bias[keep], threshold=layer.threshold[keep])
    if index + 1 < len(layers):
        nxt = layers[index + 1]
        out[index + 1] = _replace(nxt, c_i=int(keep.size), weights=nxt.weights[..., keep])
    return out


def _replace(layer: QuantizedLayer, **changes) -> QuantizedLayer:
    fields = layer.to_dict()
    fields.update(changes)
    return QuantizedLayer(**fields)


def prune_network(layers: list[QuantizedLayer]) -> tuple[list[QuantizedLayer], dict[int, list[int]]]:
    """Apply the silent-channel pass to every hidden layer; the output layer keeps its classes."""
    out = list(layers)
    removed: dict[int, list[int]] = {}
    for i in range(len(out) - 1):
        chans = removable_channels(out[i])
        if chans and len(chans) < out[i].c_o:
            out = drop_output_channels(out, i, chans)
            removed[i] = chans
    return out, removed
