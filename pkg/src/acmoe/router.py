"""Router transforms and routing rules.

A :class:`RouterTransform` stores, for every expert cluster, the diagonal of
the scaling matrix applied to tokens whose previous-layer top-1 expert was
that cluster. Rows are inverse per-feature dispersions rescaled to mean 1.
All selection rules break score ties toward the lower expert index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import as_generator, softmax
from .wclust import ClusterAssignment, DispersionProfile, optimal_weights

FLOOR_ABS = 1e-8
FLOOR_REL = 1e-4
RANDOM_CLIP = 1e-3
MIX_TOL = 1e-9

SOURCES = ("mad", "variance", "random", "identity", "optimal")


@dataclass(frozen=True)
class RouterTransform:
    m: np.ndarray  # (E, d), strictly positive
    source_metric: str = "identity"
    normalized: bool = True

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError(f"transform must be (E, d), got shape {m.shape}")
        if not np.all(np.isfinite(m)) or np.any(m <= 0):
            raise ValueError("transform entries must be finite and strictly positive")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @property
    def E(self) -> int:
        return self.m.shape[0]

    @property
    def d(self) -> int:
        return self.m.shape[1]

    @classmethod
    def identity(cls, E: int, d: int) -> "RouterTransform":
        return cls(np.ones((E, d)), "identity", True)


@dataclass
class RoutingDecision:
    """Routing of a batch of tokens.

    ``mask`` marks selected experts (n, E); ``gates`` holds the restricted
    softmax over the selected set and is zero elsewhere. ``topk`` lists the
    selected indices per token in descending score order (ragged for top-p).
    ``probs`` is the full softmax over all experts.
    """

    scores: np.ndarray
    mask: np.ndarray
    gates: np.ndarray
    topk: list
    probs: np.ndarray
    anchor: Optional[np.ndarray] = None

    @property
    def top1(self) -> np.ndarray:
        if isinstance(self.topk, np.ndarray):
            return self.topk[:, 0].copy()
        return np.array([t[0] for t in self.topk], dtype=np.int64)

    @property
    def n(self) -> int:
        return self.scores.shape[0]

    def token_gates(self, i: int) -> np.ndarray:
        return self.gates[i, self.topk[i]]


# ---------------------------------------------------------------------------
# transform construction
# ---------------------------------------------------------------------------


def cluster_dispersion(batch, labels, E: int, metric: str = "mad"):
    """Per-cluster MAD or variance of every feature in O(n d).

    Tokens are grouped with one stable radix sort on narrow labels, then
    each cluster is a contiguous slice. Returns ``(s, counts)`` with zero
    rows for empty clusters.
    """
    if metric not in ("mad", "variance"):
        raise ValueError(f"unknown dispersion metric {metric!r}")
    h = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, d = h.shape
    counts = np.bincount(labels, minlength=E)
    s = np.zeros((E, d))
    if n == 0:
        return s, counts
    # numpy sorts 8/16-bit integers with a linear-time radix sort when kind="stable"
    narrow = labels.astype(np.uint8 if E <= 256 else np.uint16 if E <= 65536 else np.int64)
    hs = h[np.argsort(narrow, kind="stable")]
    ends = np.cumsum(counts)
    for k in np.flatnonzero(counts):
        x = hs[ends[k] - counts[k]:ends[k]]
        dev = x - x.mean(axis=0)
        s[k] = np.abs(dev).mean(axis=0) if metric == "mad" else (dev * dev).mean(axis=0)
    return s, counts


def _mean_one(rows):
    return rows.shape[1] * rows / np.sum(rows, axis=1, keepdims=True)


def transform_from_dispersion(s, counts, source: str = "mad", normalize: str = "inverse", lam: float = 1.0) -> RouterTransform:
    """Turn a dispersion table into a router transform.

    ``normalize="inverse"`` rescales the inverse dispersions to mean 1;
    ``normalize="dispersion"`` rescales the dispersions to mean 1 and then
    inverts them. ``source="optimal"`` uses d times the optimal
    KL-regularised feature weights instead of plain reciprocals.
    Experts with fewer than two tokens get an all-ones row.
    """
    s = np.asarray(s, dtype=np.float64)
    counts = np.asarray(counts)
    E, d = s.shape
    m = np.ones((E, d))
    live = counts >= 2
    if np.any(live):
        sl = s[live]
        floor = FLOOR_ABS + FLOOR_REL * sl.mean(axis=1, keepdims=True)
        sl = np.maximum(sl, floor)
        if source == "optimal":
            profile = DispersionProfile(sl, "mad", counts[live])
            rows = d * optimal_weights(profile, lam).w
        elif normalize == "inverse":
            rows = _mean_one(1.0 / sl)
        elif normalize == "dispersion":
            rows = 1.0 / _mean_one(sl)
        else:
            raise ValueError(f"unknown normalisation {normalize!r}")
        m[live] = rows
    metric = source if source in SOURCES else "mad"
    return RouterTransform(m, metric, normalize == "inverse" or source == "optimal")


def build_transform(batch, assign, metric: str = "mad", normalize: str = "inverse", weighting: str = "reciprocal", lam: float = 1.0) -> RouterTransform:
    """Router transform from tokens grouped by their assigned expert.

    ``assign`` may be a :class:`ClusterAssignment` or a plain label array
    (then the expert count is inferred from the labels).
    """
    if isinstance(assign, ClusterAssignment):
        labels, E = assign.labels, assign.E
    else:
        labels = np.asarray(assign, dtype=np.int64)
        E = int(labels.max()) + 1 if labels.size else 1
    s, counts = cluster_dispersion(batch, labels, E, metric)
    if weighting == "reciprocal":
        t = transform_from_dispersion(s, counts, metric, normalize)
    elif weighting == "optimal":
        t = transform_from_dispersion(s, counts, "optimal", normalize, lam)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    return t


def random_transform(rng, E: int, d: int, mean: float = 1.0, std: float = 0.5) -> RouterTransform:
    """Normal(mean, std) diagonals clipped below at 1e-3, without renormalisation."""
    m = as_generator(rng).normal(mean, std, size=(E, d))
    return RouterTransform(np.maximum(m, RANDOM_CLIP), "random", False)


def mix_transforms(transform: RouterTransform, anchors, affinities) -> np.ndarray:
    """Convex combination of transform rows, e.g. over a token's previous top-k experts."""
    anchors = np.atleast_1d(np.asarray(anchors, dtype=np.int64))
    a = np.atleast_1d(np.asarray(affinities, dtype=np.float64))
    if anchors.shape != a.shape:
        raise ValueError("anchors and affinities must have the same length")
    if np.any(a < 0) or abs(a.sum() - 1.0) > MIX_TOL:
        raise ValueError(f"affinities must lie on the simplex (sum = {a.sum():.12g})")
    if np.any(anchors < 0) or np.any(anchors >= transform.E):
        raise ValueError("anchor index out of range")
    if anchors.size == 1:
        return transform.m[anchors[0]].copy()
    return a @ transform.m[anchors]


# ---------------------------------------------------------------------------
# routing rules
# ---------------------------------------------------------------------------


def _ranked(scores):
    # stable sort on negated scores keeps lower indices first among ties
    return np.argsort(-scores, axis=1, kind="stable")


def _restricted_softmax(scores, mask):
    masked = np.where(mask, scores, -np.inf)
    top = np.max(masked, axis=1, keepdims=True)
    z = np.where(mask, np.exp(masked - top), 0.0)
    return z / np.sum(z, axis=1, keepdims=True)


def _decision(scores, mask, topk, anchor=None):
    gates = _restricted_softmax(scores, mask)
    return RoutingDecision(scores, mask, gates, topk, softmax(scores, axis=1), anchor)


def select_topk(scores, k: int, anchor=None) -> RoutingDecision:
    scores = np.atleast_2d(scores)
    E = scores.shape[1]
    if not 1 <= k <= E:
        raise ValueError(f"k must satisfy 1 <= k <= E={E}, got {k}")
    order = _ranked(scores)[:, :k]
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return _decision(scores, mask, order, anchor)


def select_top_p(scores, p: float, anchor=None) -> RoutingDecision:
    scores = np.atleast_2d(scores)
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    probs = softmax(scores, axis=1)
    mask = probs >= p
    order = _ranked(scores)
    empty = ~mask.any(axis=1)
    mask[empty, order[empty, 0]] = True
    topk = [row[m[row]] for row, m in zip(order, mask)]
    return _decision(scores, mask, topk, anchor)


def ac_scores(h, experts, rows):
    """Scores h^T diag(m) e_j, with one transform row per token (or one shared row)."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    return (h * rows) @ np.asarray(experts, dtype=np.float64).T


def _anchor_rows(transform, anchor):
    anchor = np.atleast_1d(np.asarray(anchor, dtype=np.int64))
    if np.any(anchor < 0) or np.any(anchor >= transform.E):
        raise ValueError(f"anchor must lie in [0, {transform.E})")
    return anchor, transform.m[anchor]


def route_standard(h, experts, k: int) -> RoutingDecision:
    """Dot-product top-k routing; ``h`` may be a single token or an (n, d) batch."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    return select_topk(h @ np.asarray(experts, dtype=np.float64).T, k)


def route_ac(h, experts, transform: RouterTransform, anchor, k: int) -> RoutingDecision:
    """Top-k routing in the space scaled by each token's anchor-cluster transform row."""
    anchor, rows = _anchor_rows(transform, anchor)
    return select_topk(ac_scores(h, experts, rows), k, anchor)


def route_top_p(h, experts, p: float, transform: Optional[RouterTransform] = None, anchor=None) -> RoutingDecision:
    """Select every expert whose full-softmax probability is at least ``p``."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    if transform is None:
        return select_top_p(h @ np.asarray(experts, dtype=np.float64).T, p)
    if anchor is None:
        raise ValueError("a transform requires anchors")
    anchor, rows = _anchor_rows(transform, anchor)
    return select_top_p(ac_scores(h, experts, rows), p, anchor)
