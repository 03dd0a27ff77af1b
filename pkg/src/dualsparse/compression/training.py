"""Toy-scale joint pruning + quantisation training.

A two-layer fully-connected spiking network is trained with hand-written
backpropagation through time. Weights go through the rewiring
parameterisation and then through per-channel LSQ fake quantisation, so every
gradient that reaches theta and the scales comes from ``rewire_backward`` and
``lsq_scale_gradient``.

The spike nonlinearity uses a rectangular surrogate of width 1 centred on the
threshold. The readout is the time-averaged current of the output layer.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingError
from ..network import QuantizedLayer, QuantizedNetwork
from ..neuron import NeuronModel
from .lsq import (QuantConfig, init_scales, lsq_input_mask, lsq_quantize,
                  lsq_scale_gradient, round_half_away)
from .rewire import RewiredParam, rewire_backward, rewire_forward


@dataclass
class ToyProblem:
    x_train: np.ndarray  # (n, t, features) spikes as float
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    n_classes: int

    @property
    def t(self) -> int:
        return self.x_train.shape[1]

    @property
    def n_features(self) -> int:
        return self.x_train.shape[2]


def make_toy_problem(seed: int = 0, n_features: int = 32, n_classes: int = 4,
                     n_informative: int = 8, t: int = 4, n_train: int = 1024,
                     n_eval: int = 1024, label_noise: float = 0.1) -> ToyProblem:
    """Rate-coded classes that differ only on a few input features."""
    rng = np.random.default_rng(seed)
    informative = rng.choice(n_features, n_informative, replace=False)
    base = rng.uniform(0.2, 0.8, n_features)
    rates = np.tile(base, (n_classes, 1))
    rates[:, informative] = rng.choice([0.1, 0.9], size=(n_classes, n_informative))

    def sample(n):
        y = rng.integers(0, n_classes, n)
        x = (rng.random((n, t, n_features)) < rates[y][:, None, :]).astype(np.float64)
        flip = rng.random(n) < label_noise
        y = np.where(flip, rng.integers(0, n_classes, n), y)
        return x, y

    x_tr, y_tr = sample(n_train)
    x_ev, y_ev = sample(n_eval)
    return ToyProblem(x_tr, y_tr, x_ev, y_ev, n_classes)


@dataclass
class TrainConfig:
    hidden: int = 32
    batch_size: int = 16
    lr: float = 0.02
    seed: int = 0
    neuron: NeuronModel = NeuronModel.IF
    hidden_threshold: float = 1.0
    output_threshold: float = 1.0
    init_std: float = 0.5
    # optional starting point: ((w1, b1, th1), (w2, b2, th2)) with w as (out, in)
    init: tuple | None = None


@dataclass
class LayerSparsity:
    layer: int
    weight_sparsity: float
    quantized_zero_fraction: float
    spike_sparsity_estimate: float


@dataclass
class TrainReport:
    network: QuantizedNetwork
    layers: list[LayerSparsity]
    loss: float
    baseline_loss: float | None = None
    history: list[float] = field(default_factory=list)

    @property
    def loss_ratio(self) -> float | None:
        if self.baseline_loss is None:
            return None
        return self.loss / self.baseline_loss

    @property
    def weight_sparsity(self) -> float:
        """Pruned fraction over all weights of the network."""
        sizes = [layer.weights.size for layer in self.network.layers]
        vals = [s.weight_sparsity for s in self.layers]
        return float(np.dot(sizes, vals) / sum(sizes))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "weight_sparsity", "spike_sparsity_estimate"])
        for s in self.layers:
            w.writerow([s.layer, f"{s.weight_sparsity:.6f}", f"{s.spike_sparsity_estimate:.6f}"])
        return buf.getvalue()


class _AdamW:
    """Adam with decoupled decay on the parameters listed in ``decay``."""

    def __init__(self, lr, decay: dict, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.decay = decay
        self.m, self.v, self.k = {}, {}, 0

    def step(self, params: dict, grads: dict):
        self.k += 1
        for name, g in grads.items():
            lam = self.decay.get(name, 0.0)
            if lam:
                # grads carry lam * p; pull it out so it bypasses the moment estimates
                g = g - lam * params[name]
            m = self.m.get(name, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(name, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            mh = m / (1 - self.b1 ** self.k)
            vh = v / (1 - self.b2 ** self.k)
            params[name] = params[name] - self.lr * (mh / (np.sqrt(vh) + self.eps) + lam * params[name])


class _FcLayer:
    """Trainable state for one fully-connected spiking layer."""

    def __init__(self, n_out, n_in, std, threshold, rng, train_threshold, qcfg, decay, init=None):
        theta = rng.normal(0.0, std / np.sqrt(n_in), (n_out, n_in))
        sign = rng.choice([-1.0, 1.0], (n_out, n_in))
        self.rw = RewiredParam(theta, sign, decay)
        self.bias = np.zeros(n_out)
        self.threshold = np.full(n_out, float(threshold))
        if init is not None:
            w, b, th = init
            self.rw = RewiredParam.from_weights(np.asarray(w, dtype=np.float64).reshape(n_out, n_in), decay)
            self.bias = np.asarray(b, dtype=np.float64).copy()
            self.threshold = np.asarray(th, dtype=np.float64).copy()
        self.train_threshold = train_threshold
        self.qcfg = qcfg
        self.scale = init_scales(rewire_forward(self.rw), qcfg)

    def fake_quant(self):
        q = self.qcfg
        s = self.scale
        w = rewire_forward(self.rw)
        wq = round_half_away(np.clip(w / s[:, None], -q.q_n, q.q_p))
        bq = round_half_away(np.clip(self.bias / s, -q.wide_q_n, q.wide_q_p))
        tq = round_half_away(np.clip(self.threshold / s, -q.wide_q_n, q.wide_q_p))
        return w, wq * s[:, None], bq * s, tq * s

    def grads(self, w, dw_hat, db_hat, dth_hat):
        q = self.qcfg
        s = self.scale
        sw = s[:, None]
        dw = dw_hat * lsq_input_mask(w, sw, q.q_n, q.q_p)
        db = db_hat * lsq_input_mask(self.bias, s, q.wide_q_n, q.wide_q_p)
        dth = dth_hat * lsq_input_mask(self.threshold, s, q.wide_q_n, q.wide_q_p)
        ds = (dw_hat * lsq_scale_gradient(w, sw, q.q_n, q.q_p)).sum(axis=1)
        ds += db_hat * lsq_scale_gradient(self.bias, s, q.wide_q_n, q.wide_q_p)
        ds += dth_hat * lsq_scale_gradient(self.threshold, s, q.wide_q_n, q.wide_q_p)
        # step-size gradient scaling from the LSQ recipe
        ds /= np.sqrt(w.shape[1] * q.q_p)
        return rewire_backward(self.rw, dw), db, dth, ds

    def to_quantized(self, t, neuron) -> QuantizedLayer:
        q = self.qcfg
        w = rewire_forward(self.rw)
        n_out, n_in = w.shape
        return QuantizedLayer(
            kind="fc", c_o=n_out, c_i=n_in, k_h=1, k_w=1, padding=0, t=t,
            weights=lsq_quantize(w, self.scale[:, None], q.q_n, q.q_p).reshape(n_out, 1, 1, n_in),
            bias=lsq_quantize(self.bias, self.scale, q.wide_q_n, q.wide_q_p),
            threshold=lsq_quantize(self.threshold, self.scale, q.wide_q_n, q.wide_q_p),
            neuron=neuron, weight_bits=q.weight_bits, wide_bits=q.bias_threshold_bits,
        )


def _surrogate(v, th):
    return (np.abs(v - th) < 0.5).astype(np.float64)


class _ToyNet:
    def __init__(self, problem: ToyProblem, cfg: TrainConfig, qcfg: QuantConfig, decay: float):
        rng = np.random.default_rng(cfg.seed)
        self.cfg, self.qcfg = cfg, qcfg
        init = cfg.init or (None, None)
        self.l1 = _FcLayer(cfg.hidden, problem.n_features, cfg.init_std, cfg.hidden_threshold,
                           rng, True, qcfg, decay, init[0])
        self.l2 = _FcLayer(problem.n_classes, cfg.hidden, cfg.init_std, cfg.output_threshold,
                           rng, False, qcfg, decay, init[1])

    def forward_backward(self, x, y, backward=True):
        n, t, _ = x.shape
        leaky = self.cfg.neuron is NeuronModel.LIF
        w1, w1h, b1h, th1h = self.l1.fake_quant()
        w2, w2h, b2h, _ = self.l2.fake_quant()

        v = np.zeros((n, w1h.shape[0]))
        pre, spk = [], []
        for step in range(t):
            cur = x[:, step] @ w1h.T + b1h
            v = v + (cur - v) / 2 if leaky else v + cur
            s = (v > th1h).astype(np.float64)
            pre.append(v)
            spk.append(s)
            v = v * (1 - s)
        spk_mean = np.mean(spk, axis=0)
        logits = spk_mean @ w2h.T + b2h
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        loss = float(-np.log(p[np.arange(n), y] + 1e-12).mean())
        if not np.isfinite(loss):
            raise TrainingError("loss diverged")
        if not backward:
            return loss, None

        dlogits = p
        dlogits[np.arange(n), y] -= 1
        dlogits /= n
        dw2h = dlogits.T @ spk_mean
        db2h = dlogits.sum(axis=0)
        ds_mean = dlogits @ w2h

        dw1h = np.zeros_like(w1h)
        db1h = np.zeros_like(b1h)
        dth1h = np.zeros_like(th1h)
        dv_next = np.zeros_like(v)
        for step in reversed(range(t)):
            sg = _surrogate(pre[step], th1h)
            ds = ds_mean / t
            dv = ds * sg + dv_next * (1 - spk[step])
            dth1h -= (ds * sg).sum(axis=0)
            dcur = dv / 2 if leaky else dv
            dv_next = dv / 2 if leaky else dv
            dw1h += dcur.T @ x[:, step]
            db1h += dcur.sum(axis=0)

        g1 = self.l1.grads(w1, dw1h, db1h, dth1h)
        g2 = self.l2.grads(w2, dw2h, db2h, np.zeros_like(b2h))
        return loss, (g1, g2)

    def params(self) -> dict:
        return {
            "theta1": self.l1.rw.theta, "b1": self.l1.bias, "th1": self.l1.threshold, "s1": self.l1.scale,
            "theta2": self.l2.rw.theta, "b2": self.l2.bias, "s2": self.l2.scale,
        }

    def load(self, p: dict):
        self.l1.rw.theta, self.l1.bias, self.l1.threshold = p["theta1"], p["b1"], p["th1"]
        self.l2.rw.theta, self.l2.bias = p["theta2"], p["b2"]
        self.l1.threshold = np.maximum(self.l1.threshold, 0.05)
        self.l1.scale = np.maximum(p["s1"], 1e-6)
        self.l2.scale = np.maximum(p["s2"], 1e-6)


def _train(problem, epochs, lam, cfg, qcfg):
    net = _ToyNet(problem, cfg, qcfg, lam)
    opt = _AdamW(cfg.lr, {"theta1": lam, "theta2": lam})
    rng = np.random.default_rng(cfg.seed + 1)
    n = problem.x_train.shape[0]
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            _, ((dt1, db1, dth1, ds1), (dt2, db2, _, ds2)) = net.forward_backward(
                problem.x_train[idx], problem.y_train[idx])
            params = net.params()
            opt.step(params, {"theta1": dt1, "b1": db1, "th1": dth1, "s1": ds1,
                              "theta2": dt2, "b2": db2, "s2": ds2})
            net.load(params)
        history.append(net.forward_backward(problem.x_eval, problem.y_eval, backward=False)[0])
    loss = net.forward_backward(problem.x_eval, problem.y_eval, backward=False)[0]
    return net, loss, history


def toy_train_prune(problem: ToyProblem, epochs: int, lam: float,
                    qcfg: QuantConfig = QuantConfig(), cfg: TrainConfig | None = None,
                    baseline: bool = True, spike_batches: int = 4) -> TrainReport:
    """Train with decay ``lam`` and report sparsity plus loss against lam=0."""
    from ..pipeline import estimate_spike_sparsity

    cfg = cfg or TrainConfig()
    net, loss, history = _train(problem, epochs, lam, cfg, qcfg)
    base_loss = None
    if baseline:
        base_loss = loss if lam == 0 else _train(problem, epochs, 0.0, cfg, qcfg)[1]

    t = problem.t
    qnet = QuantizedNetwork((1, 1, problem.n_features, t),
                            [net.l1.to_quantized(t, cfg.neuron), net.l2.to_quantized(t, cfg.neuron)])
    density = estimate_spike_sparsity(qnet, batches=spike_batches, rng=np.random.default_rng(cfg.seed))
    layers = []
    for i, (fc, ql) in enumerate(zip((net.l1, net.l2), qnet.layers)):
        layers.append(LayerSparsity(i, fc.rw.pruned_fraction(), ql.weight_sparsity(), 1.0 - density[i]))
    return TrainReport(qnet, layers, loss, base_loss, history)
