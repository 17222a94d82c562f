"""A single sparse MoE block with hand-written backward pass.

``out = h + sum_{j in K(h)} g_j(h) FFN_j(h)`` with ``FFN_j(h) = relu(h W1_j + b1_j) W2_j + b2_j``.
Routing scores are ``(h * m) @ emb.T`` where ``m`` is the token's transform
row (all ones for standard routing). The transform and the top-k mask are
constants for differentiation; gradients reach ``emb`` and ``h`` through
the gate values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..router import RoutingDecision, select_top_p, select_topk

PARAM_NAMES = ("w1", "b1", "w2", "b2", "emb")


@dataclass
class ExpertFfn:
    w1: np.ndarray  # (d, d_ff)
    b1: np.ndarray  # (d_ff,)
    w2: np.ndarray  # (d_ff, d)
    b2: np.ndarray  # (d,)

    def __call__(self, h):
        return np.maximum(h @ self.w1 + self.b1, 0.0) @ self.w2 + self.b2


@dataclass
class LayerCache:
    h: np.ndarray
    hm: np.ndarray
    rows: Optional[np.ndarray]
    decision: RoutingDecision
    pieces: list  # per expert: (token idx, pre-activation, hidden, expert output)


class MoeLayer:
    """Parameters are stacked over experts: ``w1`` is (E, d, d_ff), ``emb`` is (E, d)."""

    def __init__(self, params: dict, k: int = 2, p: Optional[float] = None):
        self.params = params
        self.k = k
        self.p = p
        E, d, f = params["w1"].shape
        expected = {"b1": (E, f), "w2": (E, f, d), "b2": (E, d), "emb": (E, d)}
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name} has shape {params[name].shape}, expected {shape}")
        if E < 2:
            raise ValueError("an MoE layer needs at least two experts")

    @classmethod
    def init(cls, gen: np.random.Generator, d: int, d_ff: int, E: int, k: int = 2, p=None, scale: float = 1.0):
        params = {
            "w1": gen.standard_normal((E, d, d_ff)) * (scale / np.sqrt(d)),
            "b1": np.zeros((E, d_ff)),
            "w2": gen.standard_normal((E, d_ff, d)) * (scale / np.sqrt(d_ff)),
            "b2": np.zeros((E, d)),
            "emb": gen.standard_normal((E, d)) / np.sqrt(d),
        }
        return cls(params, k, p)

    @property
    def E(self) -> int:
        return self.params["emb"].shape[0]

    @property
    def d(self) -> int:
        return self.params["emb"].shape[1]

    def expert(self, j: int) -> ExpertFfn:
        P = self.params
        return ExpertFfn(P["w1"][j], P["b1"][j], P["w2"][j], P["b2"][j])

    def forward(self, h, rows=None, anchor=None):
        h = np.asarray(h, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.d:
            raise ValueError(f"expected tokens of shape (n, {self.d}), got {h.shape}")
        if rows is not None and np.shape(rows) not in ((h.shape[1],), h.shape):
            raise ValueError(f"transform rows of shape {np.shape(rows)} do not match tokens {h.shape}")
        P = self.params
        hm = h if rows is None else h * rows
        scores = hm @ P["emb"].T
        if self.p is not None:
            dec = select_top_p(scores, self.p, anchor)
        else:
            dec = select_topk(scores, self.k, anchor)
        out = h.copy()
        pieces = []
        for j in range(self.E):
            idx = np.flatnonzero(dec.mask[:, j])
            if idx.size == 0:
                pieces.append(None)
                continue
            x = h[idx]
            a = x @ P["w1"][j] + P["b1"][j]
            z = np.maximum(a, 0.0)
            y = z @ P["w2"][j] + P["b2"][j]
            out[idx] += dec.gates[idx, j, None] * y
            pieces.append((idx, a, z, y))
        return out, dec, LayerCache(h, hm, rows, dec, pieces)

    def backward(self, dout, cache: Optional[LayerCache], dprobs=None):
        """Gradients of a scalar loss given ``dout`` (and optionally d loss/d probs).

        Returns ``(grads, dh)`` where ``grads`` maps parameter names to arrays.
        """
        if cache is None:
            raise RuntimeError("backward called without a forward cache")
        P = self.params
        dec = cache.decision
        h = cache.h
        grads = {name: np.zeros_like(P[name]) for name in PARAM_NAMES}
        dh = np.array(dout, dtype=np.float64, copy=True)
        dgate = np.zeros_like(dec.gates)
        for j, piece in enumerate(cache.pieces):
            if piece is None:
                continue
            idx, a, z, y = piece
            up = dout[idx]
            dgate[idx, j] = np.sum(up * y, axis=1)
            dy = up * dec.gates[idx, j, None]
            grads["w2"][j] = z.T @ dy
            grads["b2"][j] = dy.sum(axis=0)
            da = (dy @ P["w2"][j].T) * (a > 0)
            grads["w1"][j] = h[idx].T @ da
            grads["b1"][j] = da.sum(axis=0)
            dh[idx] += da @ P["w1"][j].T
        g = dec.gates
        dscores = g * (dgate - np.sum(g * dgate, axis=1, keepdims=True))
        if dprobs is not None:
            pr = dec.probs
            dscores += pr * (dprobs - np.sum(pr * dprobs, axis=1, keepdims=True))
        grads["emb"] = dscores.T @ cache.hm
        dhm = dscores @ P["emb"]
        dh += dhm if cache.rows is None else dhm * cache.rows
        return grads, dh


def aux_load_balance_loss(decision: RoutingDecision, E: Optional[int] = None, with_grad: bool = False):
    """Switch-style balance loss E * sum_k f_k P_k.

    ``f_k`` is the share of tokens whose top-1 expert is ``k`` and ``P_k`` the
    mean full-softmax router probability of ``k``. With ``with_grad`` the
    gradient with respect to the probabilities is returned as well (``f`` is
    a constant).
    """
    probs = decision.probs
    n, E_ = probs.shape
    E = E_ if E is None else E
    if n == 0:
        raise ValueError("load-balance loss of an empty batch")
    f = np.bincount(decision.top1, minlength=E) / n
    P = probs.mean(axis=0)
    loss = float(E * np.dot(f, P))
    if not with_grad:
        return loss
    return loss, np.broadcast_to(E * f / n, probs.shape).copy()
