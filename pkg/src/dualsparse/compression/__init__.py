"""Pruning and quantisation to fully-integer 4-bit spiking layers."""
from .channels import drop_output_channels, prune_network, prune_silent_channels, removable_channels
from .compress import CompressResult, compress_network
from .lsq import (QuantConfig, init_scales, lsq_dequantize, lsq_quantize,
                  lsq_scale_gradient, quantize_layer, round_half_away)
from .rewire import RewiredParam, rewire_backward, rewire_forward
from .training import (LayerSparsity, ToyProblem, TrainConfig, TrainReport,
                       make_toy_problem, toy_train_prune)

__all__ = [
    "CompressResult", "compress_network",
    "drop_output_channels", "prune_network", "prune_silent_channels", "removable_channels",
    "QuantConfig", "init_scales", "lsq_dequantize", "lsq_quantize", "lsq_scale_gradient",
    "quantize_layer", "round_half_away", "RewiredParam", "rewire_backward", "rewire_forward",
    "LayerSparsity", "ToyProblem", "TrainConfig", "TrainReport", "make_toy_problem",
    "toy_train_prune",
]
