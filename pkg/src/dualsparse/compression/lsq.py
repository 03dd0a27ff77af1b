"""Learned-step-size quantisation with a per-channel shared scale.

One scale per output channel covers that channel's weights (narrow range) and
its bias and threshold (wide range). Integer layers never carry the scale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError
from ..network import QuantizedLayer, RealLayer


@dataclass(frozen=True)
class QuantConfig:
    weight_bits: int = 4
    bias_threshold_bits: int = 16
    per_channel: bool = True

    def __post_init__(self):
        if self.weight_bits < 2:
            raise DomainError("weight_bits must be at least 2")
        if self.bias_threshold_bits <= self.weight_bits:
            raise DomainError("bias/threshold range must be wider than the weight range")
        if not self.per_channel:
            raise DomainError("only per-channel scales are supported")

    @property
    def q_n(self) -> int:
        return 1 << (self.weight_bits - 1)

    @property
    def q_p(self) -> int:
        return (1 << (self.weight_bits - 1)) - 1

    @property
    def wide_q_n(self) -> int:
        return 1 << (self.bias_threshold_bits - 1)

    @property
    def wide_q_p(self) -> int:
        return (1 << (self.bias_threshold_bits - 1)) - 1


def round_half_away(x):
    """Round to nearest, ties away from zero."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_scale(s):
    if np.any(np.asarray(s) <= 0):
        raise DomainError("quantization scale must be positive")


def lsq_quantize(r, s, q_n: int, q_p: int):
    _check_scale(s)
    q = round_half_away(np.clip(np.asarray(r, dtype=np.float64) / s, -q_n, q_p))
    if np.ndim(q) == 0:
        return int(q)
    return q.astype(np.int64)


def lsq_dequantize(q, s):
    if np.ndim(q) == 0 and np.ndim(s) == 0:
        return q * s
    return np.asarray(q) * s


def lsq_scale_gradient(r, s, q_n: int, q_p: int):
    """d(dequantized)/d(scale) under the straight-through estimator."""
    _check_scale(s)
    u = np.asarray(r, dtype=np.float64) / s
    g = np.where(u <= -q_n, -float(q_n), np.where(u >= q_p, float(q_p), -u + round_half_away(u)))
    return float(g) if np.ndim(g) == 0 else g


def lsq_input_mask(r, s, q_n: int, q_p: int):
    """Straight-through pass mask for d(dequantized)/d(r)."""
    u = np.asarray(r, dtype=np.float64) / s
    return ((u > -q_n) & (u < q_p)).astype(np.float64)


def init_scales(weights: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """max|w| / q_p per output channel, 1.0 for an all-zero channel."""
    w = np.asarray(weights, dtype=np.float64).reshape(weights.shape[0], -1)
    peak = np.abs(w).max(axis=1) if w.shape[1] else np.zeros(w.shape[0])
    return np.where(peak > 0, peak / cfg.q_p, 1.0)


def quantize_layer(layer: RealLayer, cfg: QuantConfig = QuantConfig(), scales=None):
    """Integer image of ``layer`` plus the per-channel scales used.

    The scales are returned for training and debugging only.
    """
    if scales is None:
        scales = init_scales(layer.weights, cfg)
    scales = np.asarray(scales, dtype=np.float64).reshape(-1)
    if scales.shape != (layer.c_o,):
        raise DomainError(f"need {layer.c_o} scales, got {scales.shape}")
    s_w = scales[:, None, None, None]
    q = QuantizedLayer(
        kind=layer.kind, c_o=layer.c_o, c_i=layer.c_i, k_h=layer.k_h, k_w=layer.k_w,
        padding=layer.padding, t=layer.t,
        weights=lsq_quantize(layer.weights, s_w, cfg.q_n, cfg.q_p),
        bias=lsq_quantize(layer.bias, scales, cfg.wide_q_n, cfg.wide_q_p),
        threshold=lsq_quantize(layer.threshold, scales, cfg.wide_q_n, cfg.wide_q_p),
        neuron=layer.neuron, maxpool=layer.maxpool,
        weight_bits=cfg.weight_bits, wide_bits=cfg.bias_threshold_bits,
    )
    return q, scales
