"""Gaussian random fields with a squared-exponential kernel, sampled at nodes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .exceptions import CovarianceNotPD

MAX_JITTER = 1e-6


@dataclass(frozen=True)
class GrfSpec:
    mean: float = 0.0
    sigma: float = 0.1
    ell: float = 0.1
    jitter: float = 1e-10

    def __post_init__(self):
        if not (self.sigma > 0 and self.ell > 0 and self.jitter >= 0):
            raise ValueError(f"invalid GRF spec {self}")


def covariance_matrix(points, spec, jitter=None):
    """``sigma^2 exp(-|x - y|^2 / (2 ell^2)) + jitter * I``."""
    points = np.asarray(points, dtype=float)
    d2 = cdist(points, points, "sqeuclidean")
    cov = spec.sigma ** 2 * np.exp(-d2 / (2.0 * spec.ell ** 2))
    cov = 0.5 * (cov + cov.T)
    cov[np.diag_indices_from(cov)] += spec.jitter if jitter is None else jitter
    return cov


class GaussianRandomField:
    """Cholesky-factored field over a fixed point set.

    The factor is computed once; jitter is escalated by factors of ten (up to
    ``1e-6``) when the covariance is numerically indefinite.
    """

    def __init__(self, points, spec):
        self.points = np.asarray(points, dtype=float)
        self.spec = spec
        jitter = spec.jitter
        while True:
            try:
                self.factor = np.linalg.cholesky(covariance_matrix(self.points, spec, jitter))
                break
            except np.linalg.LinAlgError:
                if jitter >= MAX_JITTER:
                    raise CovarianceNotPD(
                        f"covariance not positive definite with jitter {jitter:g}") from None
                jitter = min(max(jitter * 10.0, 1e-12), MAX_JITTER)
        self.jitter = jitter

    def draw(self, rng):
        z = rng.standard_normal(len(self.points))
        return self.spec.mean + self.factor @ z

    def sample(self, seed):
        return self.draw(np.random.default_rng(seed))

    def scaled_initial_guess(self, seed, target_range=(1e-4, 1e-2)):
        rng = np.random.default_rng(seed)
        lo, hi = np.log10(target_range[0]), np.log10(target_range[1])
        for _ in range(2):
            g = self.draw(rng)
            t = 10.0 ** rng.uniform(lo, hi)
            gmax = np.abs(g).max()
            if gmax > 0:
                return g * (t / gmax)
        raise CovarianceNotPD("sampled field is identically zero")


def sample(points, spec, seed):
    """One field realisation; deterministic in ``(points, spec, seed)``."""
    return GaussianRandomField(points, spec).sample(seed)


def scaled_initial_guess(points, spec, seed, target_range=(1e-4, 1e-2)):
    """Field rescaled so its max-norm is log-uniform in ``target_range``."""
    return GaussianRandomField(points, spec).scaled_initial_guess(seed, target_range)
