"""Hypersphere set-up and the sphere-tied Gaussian prior.

Prior samples are ``C + sigma * eps`` with ``sigma = nu * R / sqrt(N)``, so the
expected squared distance from the centre is ``nu**2 * R**2``: ``nu < 1`` keeps
most samples inside the sphere and ``nu > 1`` pushes them outside. Each sample
is then labelled by whether it actually landed inside the sphere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .networks import ENCODER_CLASS, PRIOR_CLASS

CENTER_EPS = 0.1
MIN_RADIUS = 1e-6


def init_center(mean_batches: Iterable[np.ndarray], eps: float = CENTER_EPS) -> np.ndarray:
    """Mean of the encoder mean-head outputs, with near-zero coordinates pushed to +/-eps.

    ``mean_batches`` yields (batch, N) arrays from one untaped pass over the data.
    """
    total = None
    count = 0
    for batch in mean_batches:
        batch = np.asarray(batch, dtype=np.float64)
        s = batch.sum(axis=0)
        total = s if total is None else total + s
        count += batch.shape[0]
    if count == 0:
        raise ValueError("cannot initialize the centre from an empty stream")
    c = total / count
    small = np.abs(c) < eps
    c[small] = np.where(c[small] < 0, -eps, eps)
    return c.astype(np.float32)


def update_radius(distances, nu_svdd: float) -> float:
    """Radius minimizing ``R^2 + 1/(nu n) sum max(0, d_i^2 - R^2)`` over R.

    This is the (1 - nu) quantile of the distances. When ``n * (1 - nu)`` is an
    integer the objective is flat between two order statistics and the
    linear-interpolation quantile, which lies in that interval, is returned;
    otherwise the minimizer is the single order statistic ``d_(ceil(n(1-nu)))``.
    """
    d = np.sort(np.asarray(distances, dtype=np.float64).ravel())
    if d.size == 0:
        raise ValueError("cannot update the radius from an empty distance set")
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    if not 0 < nu_svdd <= 1:
        raise ValueError("nu_svdd must lie in (0, 1]")
    n = d.size
    q = 1.0 - nu_svdd
    pos = n * q
    k = round(pos)
    if math.isclose(pos, k, rel_tol=0, abs_tol=1e-9):
        r = float(np.quantile(d, q))
    else:
        r = float(d[math.ceil(pos) - 1])
    return max(r, MIN_RADIUS)


def soft_boundary_objective(distances, radius, nu_svdd: float) -> np.ndarray:
    """The SVDD objective in R, evaluated for one radius or an array of them."""
    d2 = np.asarray(distances, dtype=np.float64).ravel() ** 2
    r = np.asarray(radius, dtype=np.float64)
    r2 = r[..., None] ** 2
    return r ** 2 + np.maximum(0.0, d2 - r2).sum(axis=-1) / (nu_svdd * d2.size)


@dataclass
class PriorSampler:
    center: np.ndarray
    radius: float
    nu_prior: float = 1.0
    rng_seed: int = 0
    _rng: np.random.Generator | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("prior radius must be positive")
        if self.nu_prior <= 0:
            raise ValueError("nu_prior must be positive")

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def sigma(self) -> float:
        return self.nu_prior * self.radius / math.sqrt(self.dim)

    def sample(self, count: int, rng: np.random.Generator | None = None) -> np.ndarray:
        if rng is None:
            if self._rng is None:
                self._rng = np.random.default_rng(self.rng_seed)
            rng = self._rng
        return sample_prior(self, count, rng)


def sample_prior(sampler: PriorSampler, count: int, rng: np.random.Generator) -> np.ndarray:
    eps = rng.standard_normal((count, sampler.dim))
    return sampler.center + sampler.sigma * eps


@dataclass
class LabeledNoise:
    vectors: np.ndarray
    labels: np.ndarray

    @property
    def encoder_fraction(self) -> float:
        return float(np.mean(self.labels == ENCODER_CLASS))


def assign_labels(vectors, center, radius: float) -> LabeledNoise:
    """Prior class when ``|v - C| <= R`` (boundary included), encoder class otherwise."""
    v = np.asarray(vectors, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != c.shape[0]:
        raise ValueError(f"vectors {v.shape} do not match centre of length {c.shape[0]}")
    dist = np.sqrt(((v - c) ** 2).sum(axis=1))
    labels = np.where(dist <= radius, PRIOR_CLASS, ENCODER_CLASS).astype(np.int8)
    return LabeledNoise(v, labels)
