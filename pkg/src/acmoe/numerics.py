"""Dense linear algebra, statistics and reproducible sampling.

Everything here works on float64 numpy arrays. Randomness goes through
:class:`RngStream`, a thin wrapper over numpy's counter-based Philox
generator keyed by ``(seed, stream_id)``, so a given stream yields the same
draws on any host and independently of how many workers share a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

SYMMETRY_TOL = 1e-10
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
MAX_EIGEN_DIM = 512
SINGULAR_TOL = 1e-12
CHOLESKY_JITTER = 1e-12


class NumericsError(ValueError):
    """Base class for numerical contract violations."""


class SymmetryError(NumericsError):
    pass


class ConvergenceError(NumericsError):
    pass


class SingularMatrixError(NumericsError):
    pass


class FactorizationError(NumericsError):
    pass


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RngStream:
    """Identifies an independent, reproducible random stream.

    ``counter`` is the Philox block counter at which the stream starts; two
    streams that differ only in ``stream_id`` use different Philox keys and
    therefore never overlap.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id", "counter"):
            v = getattr(self, name)
            if not 0 <= int(v) < 2**64:
                raise ValueError(f"{name} must fit in an unsigned 64-bit integer, got {v}")

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        counter = np.array([self.counter, 0, 0, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def substream(self, index: int) -> "RngStream":
        """Derive a child stream; children of distinct streams do not collide."""
        mixed = (self.stream_id * 0x9E3779B97F4A7C15 + index + 1) % 2**64
        return RngStream(self.seed, mixed)


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


# ---------------------------------------------------------------------------
# eigen decomposition
# ---------------------------------------------------------------------------


class EigenDecomposition(NamedTuple):
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns, orthonormal


def _check_symmetric(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise SymmetryError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericsError("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > SYMMETRY_TOL * scale:
        raise SymmetryError(f"matrix is not symmetric (max |A - A^T| = {asym:.3e})")
    return a


def sym_eigen(a, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS) -> EigenDecomposition:
    """Eigen-decompose a symmetric matrix with cyclic Jacobi rotations.

    Sweeps over all (p, q) pairs until the off-diagonal Frobenius norm drops
    below ``tol * ||A||_F``. Rotations are applied as vectorised row/column
    updates.
    """
    a = _check_symmetric(a)
    n = a.shape[0]
    if n > MAX_EIGEN_DIM:
        raise NumericsError(f"dimension {n} exceeds the supported maximum {MAX_EIGEN_DIM}")
    A = 0.5 * (a + a.T)
    V = np.eye(n)
    fro = float(np.linalg.norm(A))
    target = tol * fro

    mask = ~np.eye(n, dtype=bool)
    negligible = 1e-18 * fro

    def off_norm():
        return float(np.linalg.norm(A[mask]))

    for _ in range(max_sweeps + 1):
        if off_norm() <= target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= negligible:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J with J the (p, q) Givens rotation
                ap = A[:, p].copy()
                aq = A[:, q]
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap = A[p, :].copy()
                aq = A[q, :]
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                V[:, p] = c * vp - s * V[:, q]
                V[:, q] = s * vp + c * V[:, q]
    else:
        raise ConvergenceError(
            f"Jacobi did not converge in {max_sweeps} sweeps (off-diagonal norm {off_norm():.3e})"
        )

    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return EigenDecomposition(w[order], V[:, order])


def condition_number(a) -> float:
    """Spectral condition number lambda_max / lambda_min of an SPD matrix."""
    w = sym_eigen(a).eigenvalues
    if w[-1] <= SINGULAR_TOL:
        raise SingularMatrixError(f"smallest eigenvalue {w[-1]:.3e} is not positive")
    return float(w[0] / w[-1])


# ---------------------------------------------------------------------------
# scalar special functions and statistics
# ---------------------------------------------------------------------------


def normal_cdf(x):
    """Standard normal CDF, evaluated through erfc to keep the lower tail accurate."""
    if np.ndim(x) == 0:
        return 0.5 * math.erfc(-float(x) / math.sqrt(2.0))
    return np.array([0.5 * math.erfc(-float(v) / math.sqrt(2.0)) for v in np.ravel(x)]).reshape(
        np.shape(x)
    )


def softmax(scores, axis: int = -1) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    z = np.exp(s - np.max(s, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def dispersion(values, metric: str = "mad") -> float:
    """Population spread of a sample: mean absolute deviation or variance."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("dispersion of an empty sample is undefined")
    dev = x - x.mean()
    if metric == "mad":
        return float(np.mean(np.abs(dev)))
    if metric == "variance":
        return float(np.mean(dev * dev))
    raise ValueError(f"unknown dispersion metric {metric!r}")


# ---------------------------------------------------------------------------
# Gaussian sampling
# ---------------------------------------------------------------------------


def _cholesky_psd(cov):
    """Lower Cholesky factor of a PSD matrix.

    Coordinates with zero variance are excluded up front (in a PSD matrix
    their whole row is zero), then one 1e-12 diagonal jitter retry is allowed
    before giving up.
    """
    d = cov.shape[0]
    L = np.zeros((d, d))
    diag = np.diag(cov)
    if np.any(diag < -CHOLESKY_JITTER):
        raise FactorizationError("covariance has a negative diagonal entry")
    live = np.flatnonzero(diag > 0.0)
    if live.size == 0:
        return L
    dead = np.setdiff1d(np.arange(d), live)
    if dead.size and np.any(cov[np.ix_(dead, np.arange(d))] != 0.0):
        raise FactorizationError("covariance is not positive semi-definite")
    sub = cov[np.ix_(live, live)]
    try:
        Ls = np.linalg.cholesky(sub)
    except np.linalg.LinAlgError:
        try:
            Ls = np.linalg.cholesky(sub + CHOLESKY_JITTER * np.eye(live.size))
        except np.linalg.LinAlgError as exc:
            raise FactorizationError("covariance is not positive semi-definite") from exc
    L[np.ix_(live, live)] = Ls
    return L


def sample_gaussian(rng, mean, cov, n: int) -> np.ndarray:
    """Draw ``n`` rows from N(mean, cov) via a Cholesky factor."""
    mean = np.asarray(mean, dtype=np.float64).ravel()
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    d = mean.size
    if cov.shape != (d, d):
        raise ValueError(f"mean has dimension {d} but covariance has shape {cov.shape}")
    cov = _check_symmetric(cov)
    L = _cholesky_psd(cov)
    z = as_generator(rng).standard_normal((int(n), d))
    return mean + z @ L.T
