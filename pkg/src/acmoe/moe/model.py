"""Embedding -> L MoE blocks -> linear head, with adaptive routing between blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import RngStream
from ..router import RouterTransform, build_transform, random_transform
from ..wclust import ClusterAssignment
from .config import ModelConfig
from .layer import MoeLayer, aux_load_balance_loss


@dataclass
class ForwardResult:
    pred: np.ndarray
    decisions: list
    transforms: list  # RouterTransform per layer, None where routing is standard
    caches: list
    x: np.ndarray
    h_last: np.ndarray


class MoeModel:
    def __init__(self, config: ModelConfig, d_in: int, d_out: int, params=None):
        self.config = config
        self.d_in = d_in
        self.d_out = d_out
        self.modes = config.layer_modes()
        gen = RngStream(config.seed, 0).generator()
        d = config.d
        if params is None:
            params = {
                # near-identity start so the input geometry reaches the first block
                "w_in": np.eye(d_in, d) + 0.1 * gen.standard_normal((d_in, d)) / np.sqrt(d_in),
                "b_in": np.zeros(d),
                "w_out": gen.standard_normal((d, d_out)) / np.sqrt(d),
                "b_out": np.zeros(d_out),
            }
            for l in range(config.L):
                layer = MoeLayer.init(gen, d, config.d_ff, config.E, config.k, config.p)
                for name, value in layer.params.items():
                    params[f"layer{l}.{name}"] = value
        self.params = params
        self.layers = [
            MoeLayer({n: params[f"layer{l}.{n}"] for n in ("w1", "b1", "w2", "b2", "emb")}, config.k, config.p)
            for l in range(config.L)
        ]
        # fixed random diagonals for the random-transform ablation
        self.random_transforms = [
            random_transform(RngStream(config.seed, 0x5EED + l), config.E, d) if m == "random-ablation" else None
            for l, m in enumerate(self.modes)
        ]

    def _transform_for(self, l, h_prev, dec_prev):
        cfg = self.config
        if self.modes[l] == "random-ablation":
            return self.random_transforms[l]
        if cfg.transform == "identity":
            return RouterTransform.identity(cfg.E, cfg.d)
        if cfg.transform == "optimal":
            return build_transform(h_prev, _labels(dec_prev, cfg.E), "mad", weighting="optimal", lam=cfg.lam)
        return build_transform(h_prev, _labels(dec_prev, cfg.E), cfg.transform, cfg.normalize)

    def forward(self, x, replay: ForwardResult = None) -> ForwardResult:
        """Run the stack. With ``replay``, reuse that pass's transform rows and
        anchors instead of rebuilding them (they are constants for gradients)."""
        P = self.params
        x = np.asarray(x, dtype=np.float64)
        h = x @ P["w_in"] + P["b_in"]
        decisions, transforms, caches = [], [], []
        h_prev = dec_prev = None
        for l, layer in enumerate(self.layers):
            mode = self.modes[l]
            anchor = None if dec_prev is None else dec_prev.top1
            rows = None
            transform = None
            if replay is not None:
                rows = replay.caches[l].rows
                anchor = replay.decisions[l].anchor
                transform = replay.transforms[l]
            elif mode != "standard":
                if not np.all(np.isfinite(h_prev)):
                    raise FloatingPointError(f"activations entering layer {l}")
                transform = self._transform_for(l, h_prev, dec_prev)
                if mode == "ac-mix":
                    rows = dec_prev.gates @ transform.m
                else:
                    rows = transform.m[anchor]
            out, dec, cache = layer.forward(h, rows, anchor)
            decisions.append(dec)
            transforms.append(transform)
            caches.append(cache)
            h_prev, dec_prev = h, dec
            h = out
        pred = h @ P["w_out"] + P["b_out"]
        return ForwardResult(pred, decisions, transforms, caches, x, h)

    def predict(self, x):
        return self.forward(x).pred

    def task_loss(self, x, y) -> float:
        return float(np.mean((self.predict(x) - y) ** 2))

    def loss_and_grads(self, x, y):
        """Mean squared error plus the weighted balance loss, and all parameter gradients."""
        cfg = self.config
        P = self.params
        fw = self.forward(x)
        diff = fw.pred - y
        mse = float(np.mean(diff * diff))
        dpred = 2.0 * diff / diff.size
        grads = {
            "w_out": fw.h_last.T @ dpred,
            "b_out": dpred.sum(axis=0),
        }
        dh = dpred @ P["w_out"].T
        aux_total = 0.0
        for l in reversed(range(cfg.L)):
            aux, dprobs = aux_load_balance_loss(fw.decisions[l], cfg.E, with_grad=True)
            aux_total += aux
            lg, dh = self.layers[l].backward(dh, fw.caches[l], cfg.lambda_aux * dprobs)
            for name, g in lg.items():
                grads[f"layer{l}.{name}"] = g
        grads["w_in"] = fw.x.T @ dh
        grads["b_in"] = dh.sum(axis=0)
        return mse, aux_total, grads, fw


def _labels(decision, E):
    return ClusterAssignment(decision.top1, E)
