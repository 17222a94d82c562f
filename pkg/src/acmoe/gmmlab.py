"""Gaussian-mixture experiments for routing robustness and conditioning.

Everything here is in the two-cluster regime: tokens come from the correct
cluster ``k*`` (index 0 of a spec), are contaminated by zero-mean noise, and
are assigned by a nearest-mean rule, either in plain L2 or in the diagonal
metric ``sum_q m_q (x_q - mu_q)^2`` given by a router transform row.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import (
    RngStream,
    SYMMETRY_TOL,
    as_generator,
    condition_number,
    normal_cdf,
    sample_gaussian,
    sym_eigen,
)

MC_CHUNK = 1 << 16
MAD_PER_STD = math.sqrt(2.0 / math.pi)  # MAD of a normal is sigma * sqrt(2/pi)


class DegenerateVarianceError(ValueError):
    pass


def _psd_matrix(a, name):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_TOL * max(1.0, np.max(np.abs(a))):
        raise ValueError(f"{name} is not symmetric")
    w = np.linalg.eigvalsh(a)
    if w.size and w[0] < -1e-10 * max(1.0, abs(w[-1])):
        raise ValueError(f"{name} is not positive semi-definite (min eigenvalue {w[0]:.3e})")
    return a


@dataclass
class GmmSpec:
    means: np.ndarray  # (C, d)
    covs: np.ndarray  # (C, d, d)
    mix: Optional[np.ndarray] = None

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        C, d = self.means.shape
        covs = np.asarray(self.covs, dtype=np.float64)
        if covs.ndim == 2:  # one shared covariance
            covs = np.broadcast_to(covs, (C, d, d))
        if covs.shape != (C, d, d):
            raise ValueError(f"covs has shape {covs.shape}, expected {(C, d, d)}")
        self.covs = np.stack([_psd_matrix(c, f"covs[{i}]") for i, c in enumerate(covs)])
        mix = np.full(C, 1.0 / C) if self.mix is None else np.asarray(self.mix, dtype=np.float64)
        if mix.shape != (C,) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
            raise ValueError("mix must be a probability vector with one entry per component")
        self.mix = mix

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @classmethod
    def diagonal(cls, means, stds, mix=None):
        stds = np.atleast_2d(np.asarray(stds, dtype=np.float64))
        return cls(means, np.stack([np.diag(s * s) for s in stds]), mix)

    def _pair(self):
        if self.n_components != 2:
            raise ValueError(f"this check needs exactly two clusters, got {self.n_components}")
        return self.means[0], self.means[1], self.covs[0]


@dataclass
class ContaminationSpec:
    cov_eps: np.ndarray

    def __post_init__(self):
        self.cov_eps = _psd_matrix(self.cov_eps, "cov_eps")

    @classmethod
    def isotropic(cls, d: int, scale: float):
        return cls(scale * scale * np.eye(d))

    @classmethod
    def none(cls, d: int):
        return cls(np.zeros((d, d)))


def _row(metric_row, d):
    if metric_row is None:
        return np.ones(d)
    m = np.asarray(metric_row, dtype=np.float64).ravel()
    if m.shape != (d,) or np.any(m <= 0):
        raise ValueError(f"metric row must hold {d} positive entries")
    return m


def misassignment_closed_form(mu_star, mu_other, cov_star, cov_eps=None, metric_row=None) -> float:
    """Probability that a contaminated draw from ``k*`` lands nearer the other mean.

    Writing ``delta = mu_other - mu_star`` and ``S = cov_star + cov_eps``, the
    L2 rule errs with probability ``1 - Phi(|delta|^2 / (2 sqrt(delta' S delta)))``.
    With a metric row ``m`` the same argument gives
    ``1 - Phi(|delta|_m^2 / (2 sqrt(delta' M S M delta)))``.
    """
    mu_star = np.asarray(mu_star, dtype=np.float64).ravel()
    delta = np.asarray(mu_other, dtype=np.float64).ravel() - mu_star
    d = delta.size
    S = np.atleast_2d(np.asarray(cov_star, dtype=np.float64))
    if cov_eps is not None:
        S = S + np.atleast_2d(np.asarray(cov_eps, dtype=np.float64))
    m = _row(metric_row, d)
    md = m * delta
    sep = float(np.dot(delta, md))
    if sep == 0.0:
        return 0.5
    var = float(md @ S @ md)
    if not var > 0.0:
        raise DegenerateVarianceError(
            f"projected variance delta'MSM delta = {var:.3e} is not positive for a nonzero separation")
    return 1.0 - normal_cdf(sep / (2.0 * math.sqrt(var)))


def _chunk_errors(stream: RngStream, cnt, mu_star, mu_other, cov_star, cov_eps, rows):
    """Draw one chunk and return per-rule error indicators (ties broken by one shared coin)."""
    gen = stream.generator()
    h = sample_gaussian(gen, mu_star, cov_star, cnt)
    if cov_eps is not None:
        h = h + sample_gaussian(gen, np.zeros(mu_star.size), cov_eps, cnt)
    coin = gen.random(cnt) < 0.5
    out = []
    for m in rows:
        d_star = ((h - mu_star) ** 2) @ m
        d_other = ((h - mu_other) ** 2) @ m
        out.append((d_other < d_star) | ((d_other == d_star) & coin))
    return out


def _run_chunks(rng, n, workers, fn):
    if n < 1:
        raise ValueError("need at least one sample")
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    sizes = [MC_CHUNK] * (n // MC_CHUNK) + ([n % MC_CHUNK] if n % MC_CHUNK else [])
    jobs = [(stream.substream(i), c) for i, c in enumerate(sizes)]
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(lambda j: fn(*j), jobs))  # map keeps chunk order
    return [fn(*j) for j in jobs]


def _rate(count, n):
    p = count / n
    return p, math.sqrt(p * (1.0 - p) / n)


def misassignment_monte_carlo(spec: GmmSpec, contamination: Optional[ContaminationSpec], rng, n: int,
                              metric_row=None, workers: int = 1):
    """Error frequency of the nearest-mean rule and its binomial standard error.

    Samples are split into fixed-size chunks, each drawn from its own
    substream, and counts are summed in chunk order, so the result does not
    depend on ``workers``.
    """
    mu_star, mu_other, cov_star = spec._pair()
    cov_eps = None if contamination is None else contamination.cov_eps
    m = _row(metric_row, spec.d)
    counts = _run_chunks(rng, n, workers, lambda s, c: int(
        _chunk_errors(s, c, mu_star, mu_other, cov_star, cov_eps, [m])[0].sum()))
    return _rate(sum(counts), n)


def robustness_compare(spec: GmmSpec, contamination: Optional[ContaminationSpec], rng, n: int,
                       transform_row, workers: int = 1) -> dict:
    """Paired error rates of the L2 rule and the transform-weighted rule on one sample stream."""
    mu_star, mu_other, cov_star = spec._pair()
    cov_eps = None if contamination is None else contamination.cov_eps
    rows = [np.ones(spec.d), _row(transform_row, spec.d)]

    def chunk(s, c):
        e_std, e_ac = _chunk_errors(s, c, mu_star, mu_other, cov_star, cov_eps, rows)
        return np.array([e_std.sum(), e_ac.sum(), (e_std & ~e_ac).sum(), (e_ac & ~e_std).sum()])

    tot = np.sum(_run_chunks(rng, n, workers, chunk), axis=0)
    p_std, se_std = _rate(int(tot[0]), n)
    p_ac, se_ac = _rate(int(tot[1]), n)
    # paired SE of the difference of the two indicators
    disc = (tot[2] + tot[3]) / n
    mean_diff = (tot[2] - tot[3]) / n
    se_diff = math.sqrt(max(disc - mean_diff**2, 0.0) / n)
    return {
        "standard": p_std, "standard_se": se_std,
        "ac": p_ac, "ac_se": se_ac,
        "combined_se": math.sqrt(se_std**2 + se_ac**2),
        "paired_se": se_diff,
        "standard_only_errors": int(tot[2]),
        "ac_only_errors": int(tot[3]),
        "n": n,
    }


# ---------------------------------------------------------------------------
# separation under the transform
# ---------------------------------------------------------------------------


def transform_from_cov(cov, metric: str = "mad") -> np.ndarray:
    """Mean-1 inverse-dispersion row for a Gaussian cluster with covariance ``cov``.

    Population dispersions of a normal coordinate: MAD = sigma sqrt(2/pi),
    variance = sigma^2.
    """
    var = np.diag(np.atleast_2d(np.asarray(cov, dtype=np.float64)))
    if np.any(var <= 0):
        raise ValueError("every coordinate needs positive variance")
    if metric == "mad":
        s = np.sqrt(var) * MAD_PER_STD
    elif metric == "variance":
        s = var
    else:
        raise ValueError(f"unknown metric {metric!r}")
    raw = 1.0 / s
    return raw * (raw.size / raw.sum())


def separation_gain(spec: GmmSpec, cluster_index: int, transform_row, other: Optional[int] = None):
    """Return ``(|mu_k - mu_a|^2_M, |mu_k - mu_a|^2)`` for cluster ``a`` and another ``k``."""
    a = cluster_index
    k = (1 - a if spec.n_components == 2 else None) if other is None else other
    if k is None:
        raise ValueError("name the other cluster when the spec has more than two")
    delta = spec.means[k] - spec.means[a]
    m = _row(transform_row, spec.d)
    return float(np.dot(m * delta, delta)), float(np.dot(delta, delta))


def separation_assumption_holds(delta, transform_row) -> bool:
    """Sufficient condition for the metric to lengthen ``delta``.

    Split features into tight (m_q > 1) and loose (m_q <= 1). With
    ``a = min_tight (m_q - 1)``, since every loose term loses at most its own
    mass, the gain is nonnegative whenever the loose share of |delta|^2 is at
    most ``a / (1 + a)``.
    """
    delta = np.asarray(delta, dtype=np.float64).ravel()
    m = np.asarray(transform_row, dtype=np.float64).ravel()
    mass = delta * delta
    tight = m > 1.0
    if not tight.any():
        return False
    a = float(np.min(m[tight] - 1.0))
    total = mass.sum()
    if total == 0.0:
        return False
    return mass[~tight].sum() / total <= a / (1.0 + a)


def tight_feature_instance(rng, d: int = 8, n_tight: int = 2, tight_std: float = 0.3,
                           loose_std: float = 1.5, separation: float = 2.0, loose_share: float = 0.5,
                           max_tries: int = 100):
    """Two clusters sharing a covariance that is tight on a random feature subset.

    The separation is placed mostly on the tight features; a random share of
    up to ``loose_share`` of the allowed loose mass lies on loose features.
    Returns ``(spec, transform_row)`` with the row built from the covariance.
    """
    if not 1 <= n_tight < d:
        raise ValueError("need 1 <= n_tight < d")
    gen = as_generator(rng)
    for _ in range(max_tries):
        tight = gen.choice(d, size=n_tight, replace=False)
        stds = np.full(d, loose_std)
        stds[tight] = tight_std * gen.uniform(0.8, 1.2, size=n_tight)
        cov = np.diag(stds * stds)
        m = transform_from_cov(cov)
        t_mask = m > 1.0
        a = float(np.min(m[t_mask] - 1.0))
        share = loose_share * gen.uniform() * a / (1.0 + a)
        delta = np.zeros(d)
        dt = gen.standard_normal(t_mask.sum())
        dl = gen.standard_normal((~t_mask).sum())
        delta[t_mask] = dt / np.linalg.norm(dt) * math.sqrt(1.0 - share)
        delta[~t_mask] = dl / np.linalg.norm(dl) * math.sqrt(share)
        delta *= separation
        if separation_assumption_holds(delta, m):
            return GmmSpec(np.stack([np.zeros(d), delta]), np.stack([cov, cov])), m
    raise RuntimeError("could not construct an instance satisfying the tight-feature assumption")


# ---------------------------------------------------------------------------
# conditioning
# ---------------------------------------------------------------------------


def conditioning_compare(cov, transform_row=None):
    """``(kappa(S), kappa(M S M))``; by default M comes from the per-coordinate dispersions of S."""
    cov = np.asarray(cov, dtype=np.float64)
    m = transform_from_cov(cov) if transform_row is None else _row(transform_row, cov.shape[0])
    mcm = (m[:, None] * cov) * m[None, :]
    return condition_number(cov), condition_number(mcm)


def axis_alignment(vectors) -> tuple:
    """Match eigenvector columns to coordinate axes by largest |component|.

    Returns ``(perm, align)`` with ``perm[j]`` the axis of column ``j`` and
    ``align[j] = v_j[perm[j]]^2``; ``perm`` is None when two columns pick the
    same axis.
    """
    V = np.asarray(vectors)
    perm = np.argmax(np.abs(V), axis=0)
    align = V[perm, np.arange(V.shape[1])] ** 2
    if np.unique(perm).size != perm.size:
        return None, align
    return perm, align


@dataclass
class EigenGapCheck:
    qualifies: bool
    residuals: Optional[np.ndarray]  # per axis: |lambda_i - S_ii| - eps * max_j |lambda_i - lambda_j|
    alignment: np.ndarray

    def holds(self, tol: float = 1e-9) -> bool:
        return self.qualifies and bool(np.all(self.residuals <= tol))


def eigen_gap_bound_check(cov, epsilon: float) -> EigenGapCheck:
    """Check ``|lambda_i - S_ii| <= eps * max_{j != i} |lambda_i - lambda_j|``.

    ``lambda_i`` is the eigenvalue whose eigenvector is matched to axis ``i``.
    The instance qualifies when every matched eigenvector has squared
    alignment ``(v_i . b_i)^2 >= 1 - eps``; otherwise it is rejected and no
    residuals are returned.
    """
    cov = np.asarray(cov, dtype=np.float64)
    eig = sym_eigen(cov)
    perm, align = axis_alignment(eig.eigenvectors)
    if perm is None or np.any(align < 1.0 - epsilon):
        return EigenGapCheck(False, None, align)
    lam = np.empty_like(eig.eigenvalues)
    lam[perm] = eig.eigenvalues
    gaps = np.abs(lam[:, None] - lam[None, :])
    np.fill_diagonal(gaps, 0.0)
    res = np.abs(lam - np.diag(cov)) - epsilon * gaps.max(axis=1)
    # scale-aware slack for rounding in the eigensolve
    res = res - 1e-12 * max(1.0, float(np.max(np.abs(lam))))
    return EigenGapCheck(True, res, align)


def near_axis_spd(rng, d: int, epsilon: float = 0.05, spread: float = 10.0, max_tries: int = 50):
    """Random SPD matrix whose eigenvectors have squared axis alignment >= 1 - epsilon.

    Eigenvalues are log-uniform on [1, spread]; the basis is the Q factor of
    a small random perturbation of the identity, shrunk until it qualifies.
    """
    gen = as_generator(rng)
    lam = np.exp(gen.uniform(0.0, math.log(spread), size=d))
    t = math.sqrt(epsilon)
    for _ in range(max_tries):
        Q, R = np.linalg.qr(np.eye(d) + t * gen.standard_normal((d, d)) / math.sqrt(d))
        Q = Q * np.sign(np.diag(R))
        perm, align = axis_alignment(Q)
        if perm is not None and np.all(perm == np.arange(d)) and np.all(align >= 1.0 - epsilon):
            S = (Q * lam) @ Q.T
            return 0.5 * (S + S.T)
        t *= 0.7
    raise RuntimeError("could not draw a qualifying near-axis basis")
