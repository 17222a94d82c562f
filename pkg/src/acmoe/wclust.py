"""Feature-weighted clustering with cluster-wise weights.

For a fixed assignment of tokens to clusters, every cluster ``k`` gets a
weight vector on the simplex minimising

    sum_q w_qk s_qk + lam * KL(u || w_k),

where ``s_qk`` is the within-cluster pairwise dispersion of feature ``q`` and
``u`` the uniform distribution. The minimiser is
``w_qk = (lam/d) / (s_qk + alpha_k)``, with ``alpha_k`` the root of
``sum_q 1/(s_qk + alpha_k) = d/lam`` lying above ``-min_q s_qk``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_LAMBDA = 1.0
BISECTION_RTOL = 1e-14
BISECTION_MAX_ITER = 400
BRUTE_FORCE_MAX_N = 10
BRUTE_FORCE_MAX_E = 3

PAIRWISE_METRICS = ("pairwise-sq", "pairwise-abs")


class SolverError(RuntimeError):
    """Raised when the multiplier root cannot be bracketed."""


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    E: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if labels.size and (labels.min() < 0 or labels.max() >= self.E):
            raise ValueError(f"labels must lie in [0, {self.E})")
        object.__setattr__(self, "labels", labels)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.E)


@dataclass
class DispersionProfile:
    """Per-cluster, per-feature dispersion; rows of empty clusters are zero and flagged."""

    s: np.ndarray
    metric: str
    counts: np.ndarray
    empty: np.ndarray = field(default=None)

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.empty is None:
            self.empty = self.counts == 0
        if not np.all(np.isfinite(self.s)) or np.any(self.s < 0):
            raise ValueError("dispersions must be finite and non-negative")


@dataclass
class FeatureWeights:
    w: np.ndarray
    lam: float
    alpha: np.ndarray

    def kkt_residuals(self, profile: DispersionProfile) -> np.ndarray:
        """Stationarity residual s_qk - (lam/d)/w_qk + alpha_k for every entry."""
        d = self.w.shape[1]
        r = profile.s - (self.lam / d) / self.w + self.alpha[:, None]
        r[profile.empty] = 0.0
        return r


def _validate_batch(batch, assign):
    h = np.asarray(batch, dtype=np.float64)
    if h.ndim != 2:
        raise ValueError(f"token batch must be 2-d (n, d), got shape {h.shape}")
    if h.shape[0] != assign.labels.size:
        raise ValueError(f"{h.shape[0]} tokens but {assign.labels.size} labels")
    return h


def _abs_pair_sum(x):
    """sum_{i,j} |x_i - x_j| for every column of x, via sorting."""
    xs = np.sort(x, axis=0)
    n = xs.shape[0]
    coef = 2.0 * np.arange(1, n + 1) - n - 1
    return 2.0 * (coef @ xs)


def pairwise_dispersion(batch, assign: ClusterAssignment, rho: str = "squared") -> DispersionProfile:
    """s_qk = N_k^-2 sum_{i,j in k} rho(h_iq, h_jq).

    The squared form uses the identity N^-2 sum (x_i - x_j)^2 = 2 var(x), so it
    costs O(n d); the absolute form sorts each cluster column.
    """
    h = _validate_batch(batch, assign)
    E, d = assign.E, h.shape[1]
    counts = assign.counts
    s = np.zeros((E, d))
    for k in np.flatnonzero(counts):
        xk = h[assign.labels == k]
        if rho == "squared":
            dev = xk - xk.mean(axis=0)
            s[k] = 2.0 * np.mean(dev * dev, axis=0)
        elif rho == "absolute":
            s[k] = _abs_pair_sum(xk) / counts[k] ** 2
        else:
            raise ValueError(f"unknown pairwise metric {rho!r}")
    metric = "pairwise-sq" if rho == "squared" else "pairwise-abs"
    return DispersionProfile(s, metric, counts)


def _solve_shift(x, lam):
    """Solve sum_q 1/(x_q + t) = d/lam for t > 0, row-wise, where min_q x_q = 0.

    Since the smallest term is 1/t and every term is at most 1/t, the root
    satisfies lam/d <= t <= lam, which gives a bracket without expansion.
    Bisecting in the shifted variable keeps full relative precision near the
    pole at t = 0.
    """
    x = np.atleast_2d(x)
    d = x.shape[1]
    target = d / lam
    lo = np.full(x.shape[0], lam / d)
    hi = np.full(x.shape[0], float(lam))
    for _ in range(BISECTION_MAX_ITER):
        mid = 0.5 * (lo + hi)
        phi = np.sum(1.0 / (x + mid[:, None]), axis=1) - target
        pos = phi > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
        if np.all(hi - lo <= BISECTION_RTOL * hi):
            break
    t = 0.5 * (lo + hi)
    # two Newton steps from inside the bracket remove the last bisection ulps
    for _ in range(2):
        r = 1.0 / (x + t[:, None])
        step = (np.sum(r, axis=1) - target) / np.sum(r * r, axis=1)
        t = np.clip(t + step, lo, hi)
    return t


def _check_rows(s, lam):
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    if not (np.isfinite(lam) and lam > 0):
        raise ValueError(f"lambda must be positive and finite, got {lam}")
    if s.shape[1] == 0:
        raise ValueError("dispersion rows must be non-empty")
    if not np.all(np.isfinite(s)):
        raise SolverError(f"cannot bracket the multiplier: non-finite dispersions {s[~np.isfinite(s)]}")
    if np.any(s < 0):
        raise ValueError("dispersions must be non-negative")
    return s


def solve_alpha(s_row, lam: float = DEFAULT_LAMBDA) -> float:
    """Root of sum_q 1/(s_q + alpha) = d/lam on (-min s, inf).

    This is the only root that keeps every weight positive; the equation has
    d - 1 further roots between consecutive poles.
    """
    s = _check_rows(s_row, lam)
    if s.shape[0] != 1:
        raise ValueError("solve_alpha takes a single dispersion row")
    smin = s.min()
    t = _solve_shift(s - smin, lam)[0]
    return float(t - smin)


def optimal_weights(profile: DispersionProfile, lam: float = DEFAULT_LAMBDA) -> FeatureWeights:
    """Closed-form optimal weights for every cluster; empty clusters get 1/d."""
    s = _check_rows(profile.s, lam)
    E, d = s.shape
    smin = s.min(axis=1, keepdims=True)
    x = s - smin
    t = _solve_shift(x, lam)
    w = (lam / d) / (x + t[:, None])
    alpha = t - smin[:, 0]
    empty = np.asarray(profile.empty, dtype=bool)
    w[empty] = 1.0 / d
    alpha[empty] = lam
    return FeatureWeights(w, float(lam), alpha)


def objective_from_profile(profile: DispersionProfile, weights: FeatureWeights) -> float:
    w = weights.w
    d = w.shape[1]
    live = ~np.asarray(profile.empty, dtype=bool)
    fit = np.sum(w * profile.s, axis=1)
    kl = np.sum(np.log(1.0 / (d * w)), axis=1) / d
    return float(np.sum((fit + weights.lam * kl)[live]))


def clustering_objective(batch, assign: ClusterAssignment, weights: FeatureWeights, lam=None, rho="squared"):
    """Regularised weighted within-cluster dispersion, summed over non-empty clusters.

    Each pair sum is normalised by N_k^2, so a cluster contributes
    sum_q [w_qk s_qk + (lam/d) log(1/(d w_qk))].
    """
    h = _validate_batch(batch, assign)
    w = np.asarray(weights.w)
    if w.shape != (assign.E, h.shape[1]):
        raise ValueError(f"weights have shape {w.shape}, expected {(assign.E, h.shape[1])}")
    lam = weights.lam if lam is None else lam
    profile = pairwise_dispersion(h, assign, rho)
    return objective_from_profile(profile, FeatureWeights(w, lam, weights.alpha))


def _canonical_labelings(n, E):
    """Label vectors up to a permutation of cluster ids (restricted growth strings)."""
    def grow(prefix, used):
        if len(prefix) == n:
            yield prefix
            return
        for k in range(min(used + 1, E)):
            yield from grow(prefix + [k], max(used, k + 1))

    yield from grow([], 0)


def brute_force_joint(batch, E: int, lam: float = DEFAULT_LAMBDA, rho: str = "squared"):
    """Exhaustive minimiser of the joint assignment/weight problem for tiny inputs.

    The objective is invariant to relabelling clusters, so only one labelling
    per partition is scored. Returns ``(assignment, weights, objective)``.
    """
    h = np.asarray(batch, dtype=np.float64)
    n = h.shape[0]
    if n > BRUTE_FORCE_MAX_N or E > BRUTE_FORCE_MAX_E:
        raise ValueError(
            f"brute force is limited to n <= {BRUTE_FORCE_MAX_N}, E <= {BRUTE_FORCE_MAX_E} (got n={n}, E={E})"
        )
    best = None
    for labels in _canonical_labelings(n, E):
        assign = ClusterAssignment(np.array(labels), E)
        profile = pairwise_dispersion(h, assign, rho)
        weights = optimal_weights(profile, lam)
        obj = objective_from_profile(profile, weights)
        if best is None or obj < best[2] - 1e-15:
            best = (assign, weights, obj)
    return best

