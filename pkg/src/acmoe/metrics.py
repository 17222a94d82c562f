"""Routing diagnostics: load balance, router instability, convergence speed, overhead."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numerics import RngStream


@dataclass
class LoadBalanceReport:
    per_layer: np.ndarray  # std of assignment percentages, one per layer
    mean: float
    std: float

    def to_csv(self) -> str:
        return _layer_csv(self.per_layer)

    def summary(self) -> dict:
        return {"load_balance_mean": self.mean, "load_balance_std": self.std,
                "per_layer": [float(v) for v in self.per_layer]}


@dataclass
class InstabilityReport:
    per_pair: np.ndarray  # r^l for l = 1..L-1

    def to_csv(self) -> str:
        return _layer_csv(self.per_pair, start=1)

    def summary(self) -> dict:
        vals = [float(v) for v in self.per_pair]
        return {"instability_mean": float(np.mean(vals)) if vals else 0.0, "per_pair": vals}


def _layer_csv(values, start=0):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "value"])
    for i, v in enumerate(values):
        w.writerow([i + start, repr(float(v))])
    return buf.getvalue()


def _labels_of(x):
    top1 = getattr(x, "top1", None)
    return np.asarray(top1 if top1 is not None else x, dtype=np.int64)


def assignment_percentages(labels, E: int) -> np.ndarray:
    labels = _labels_of(labels)
    return 100.0 * np.bincount(labels, minlength=E) / labels.size


def load_balance(decisions: Sequence, E: Optional[int] = None) -> LoadBalanceReport:
    """Population std of per-expert top-1 percentages, per layer and across layers.

    ``decisions`` holds one entry per layer: a RoutingDecision or a label array.
    """
    if len(decisions) == 0:
        raise ValueError("load balance needs at least one layer")
    per_layer = []
    for dec in decisions:
        E_ = E if E is not None else getattr(dec, "scores", np.zeros((0, 0))).shape[1] or None
        labels = _labels_of(dec)
        if E_ is None:
            E_ = int(labels.max()) + 1
        per_layer.append(float(np.std(assignment_percentages(labels, E_))))
    per_layer = np.array(per_layer)
    return LoadBalanceReport(per_layer, float(per_layer.mean()), float(per_layer.std()))


def router_instability(assign_prev, assign_cur) -> float:
    """mean |S_prev - S_cur| over the n x n co-membership matrices (diagonal included).

    Uses sum |S1 - S2| = sum_a n_a^2 + sum_b m_b^2 - 2 sum_ab c_ab^2 where c is the
    contingency table of the two labelings, so memory stays O(n).
    """
    a = _labels_of(assign_prev)
    b = _labels_of(assign_cur)
    if a.shape != b.shape:
        raise ValueError(f"assignments have different lengths ({a.size} vs {b.size})")
    n = a.size
    if n == 0:
        return 0.0
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    na = np.bincount(ia).astype(np.int64)
    nb = np.bincount(ib).astype(np.int64)
    joint = np.bincount(ia * (ib.max() + 1) + ib).astype(np.int64)
    total = int(np.sum(na * na) + np.sum(nb * nb) - 2 * np.sum(joint * joint))
    return total / (n * n)


def instability_report(decisions: Sequence) -> InstabilityReport:
    vals = [router_instability(decisions[i - 1], decisions[i]) for i in range(1, len(decisions))]
    return InstabilityReport(np.array(vals))


def trailing_mean(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate(([0.0], np.cumsum(v)))
    i = np.arange(1, v.size + 1)
    lo = np.maximum(0, i - window)
    return (c[i] - c[lo]) / (i - lo)


def steps_to_threshold(trace, threshold: float, window: int = 10) -> Optional[int]:
    """First step at which the trailing-mean eval loss is at or below ``threshold``.

    ``trace`` is a TrainTrace (its eval series is used) or a plain loss sequence
    indexed by step.
    """
    if hasattr(trace, "eval_loss"):
        steps, values = np.asarray(trace.eval_steps), np.asarray(trace.eval_loss)
    else:
        values = np.asarray(trace, dtype=np.float64)
        steps = np.arange(values.size)
    if values.size == 0:
        raise ValueError("empty trace")
    hit = np.flatnonzero(trailing_mean(values, window) <= threshold)
    return int(steps[hit[0]]) if hit.size else None


# ---------------------------------------------------------------------------
# overhead micro-benchmark
# ---------------------------------------------------------------------------


def _median_ms(fn, n_iters, warmup):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(n_iters):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


def routing_overhead(n: int = 4096, d: int = 64, E: int = 16, k: int = 2, d_ff: Optional[int] = None,
                     n_iters: int = 30, warmup: int = 5, seed: int = 0, metric: str = "mad",
                     interleave: bool = True) -> dict:
    """Median ms per MoE-layer forward pass for standard and adaptive routing.

    The adaptive pass includes building the transform from the previous
    layer's tokens and assignment. Both modes see identical inputs; their
    iterations are interleaved so slow drifts in machine load hit both.
    """
    from .moe.layer import MoeLayer
    from .router import build_transform

    d_ff = 4 * d if d_ff is None else d_ff
    gen = RngStream(seed, 0xBE7C).generator()
    layer = MoeLayer.init(gen, d, d_ff, E, k)
    h_prev = gen.standard_normal((n, d))
    prev_labels = gen.integers(0, E, size=n)
    h = gen.standard_normal((n, d))

    def standard():
        layer.forward(h)

    def adaptive():
        t = build_transform(h_prev, _assignment(prev_labels, E), metric)
        layer.forward(h, t.m[prev_labels], prev_labels)

    if not interleave:
        return {"standard": _median_ms(standard, n_iters, warmup),
                "ac": _median_ms(adaptive, n_iters, warmup)}
    for _ in range(warmup):
        standard()
        adaptive()
    ts, ta = [], []
    for _ in range(n_iters):
        t0 = time.perf_counter()
        standard()
        t1 = time.perf_counter()
        adaptive()
        t2 = time.perf_counter()
        ts.append(t1 - t0)
        ta.append(t2 - t1)
    return {"standard": 1e3 * float(np.median(ts)), "ac": 1e3 * float(np.median(ta))}


def _assignment(labels, E):
    from .wclust import ClusterAssignment

    return ClusterAssignment(labels, E)


def transform_build_scaling(ns=(1_000, 10_000, 100_000), d: int = 64, E: int = 16, n_iters: int = 15,
                            seed: int = 0, metric: str = "mad") -> dict:
    """Median transform-construction time per n and the least-squares log-log slope."""
    from .router import build_transform

    gen = RngStream(seed, 0x5CA1).generator()
    ms = []
    for n in ns:
        h = gen.standard_normal((n, d))
        labels = gen.integers(0, E, size=n)
        a = _assignment(labels, E)
        ms.append(_median_ms(lambda: build_transform(h, a, metric), n_iters, 3))
    slope = float(np.polyfit(np.log(ns), np.log(ms), 1)[0])
    return {"n": list(ns), "ms": ms, "slope": slope}


def summary_json(lb: LoadBalanceReport, inst: InstabilityReport) -> str:
    return json.dumps({**lb.summary(), **inst.summary()}, sort_keys=True, indent=2) + "\n"
