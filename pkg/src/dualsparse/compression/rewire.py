"""Gradient-rewiring weight parameterisation, w = sign * relu(theta)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError, ShapeError


@dataclass
class RewiredParam:
    theta: np.ndarray
    sign: np.ndarray
    weight_decay: float = 0.0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.sign = np.asarray(self.sign, dtype=np.float64)
        if self.theta.shape != self.sign.shape:
            raise ShapeError(f"theta {self.theta.shape} vs sign {self.sign.shape}")
        if not np.isin(self.sign, (-1.0, 1.0)).all():
            raise DomainError("sign entries must be exactly -1 or +1")
        if self.weight_decay < 0:
            raise DomainError("weight decay must be non-negative")
        self.sign.setflags(write=False)

    @classmethod
    def from_weights(cls, w, weight_decay: float = 0.0) -> "RewiredParam":
        """Sign from the initial weight, theta = |w| (every connection alive)."""
        w = np.asarray(w, dtype=np.float64)
        return cls(np.abs(w), np.where(w < 0, -1.0, 1.0), weight_decay)

    def pruned_fraction(self) -> float:
        return float((self.theta <= 0).mean()) if self.theta.size else 0.0


def rewire_forward(p: RewiredParam) -> np.ndarray:
    return p.sign * np.maximum(p.theta, 0.0)


def rewire_backward(p: RewiredParam, grad_w) -> np.ndarray:
    """d(loss)/d(theta), including the magnitude penalty lambda * theta.

    Connections with theta <= 0 receive no task gradient (the relu is flat
    there), so only the decay term acts on them.
    """
    grad_w = np.asarray(grad_w, dtype=np.float64)
    if grad_w.shape != p.theta.shape:
        raise ShapeError(f"grad_w {grad_w.shape} vs theta {p.theta.shape}")
    return p.sign * grad_w * (p.theta > 0) + p.weight_decay * p.theta
