"""Synthetic regression task with latent cluster structure.

Tokens come from a Gaussian mixture whose components are tight along their
own small subset of features and loose elsewhere, and are separated along
those tight features. The target is a component-specific affine map of the
token plus noise, so routing each component to its own expert pays off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import RngStream, as_generator


@dataclass
class GmmTask:
    means: np.ndarray  # (C, d)
    stds: np.ndarray  # (C, d), diagonal covariances
    maps: np.ndarray  # (C, d_out, d)
    offsets: np.ndarray  # (C, d_out)
    noise: float

    @classmethod
    def make(cls, seed: int = 0, d: int = 16, n_clusters: int = 8, d_out: int = 8,
             tight_dims: int = 4, tight_std: float = 0.25, loose_std: float = 1.5,
             separation: float = 2.0, noise: float = 0.05):
        gen = RngStream(seed, 0xDA7A).generator()
        means = np.zeros((n_clusters, d))
        stds = np.full((n_clusters, d), loose_std)
        for c in range(n_clusters):
            tight = gen.choice(d, size=tight_dims, replace=False)
            means[c, tight] = separation * gen.choice([-1.0, 1.0], size=tight_dims)
            stds[c, tight] = tight_std
        maps = gen.standard_normal((n_clusters, d_out, d)) / np.sqrt(d)
        offsets = gen.standard_normal((n_clusters, d_out))
        return cls(means, stds, maps, offsets, noise)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def d_out(self) -> int:
        return self.maps.shape[1]

    @property
    def n_clusters(self) -> int:
        return self.means.shape[0]

    def sample(self, rng, n: int):
        """Return ``(x, y, c)``: tokens, targets and latent component labels."""
        gen = as_generator(rng)
        c = gen.integers(0, self.n_clusters, size=n)
        x = self.means[c] + self.stds[c] * gen.standard_normal((n, self.d))
        y = np.einsum("nij,nj->ni", self.maps[c], x) + self.offsets[c]
        y += self.noise * gen.standard_normal(y.shape)
        return x, y, c
