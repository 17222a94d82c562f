"""Adam with linear learning-rate warmup, operating on a dict of arrays in place."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, lr=7e-4, beta1=0.9, beta2=0.999, eps=1e-8, warmup=0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.warmup = warmup
        self.m = {}
        self.v = {}
        self.t = 0

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.warmup)

    def current_lr(self) -> float:
        if self.warmup and self.t < self.warmup:
            return self.lr * self.t / self.warmup
        return self.lr

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        lr = self.current_lr()
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if lr == 0.0:
                continue
            # in place so layer views into the same arrays see the update
            params[name] -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
