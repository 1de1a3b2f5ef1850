"""Importance-sampling reference posteriors and MMD calibration diagnostics."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .tasks import Task


class DegeneratePosteriorWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ParticlePosterior:
    particles: np.ndarray  # (N, d) parameter units
    log_weights: np.ndarray  # (N,) normalised

    @property
    def weights(self):
        return np.exp(self.log_weights)

    @property
    def ess(self) -> float:
        return float(np.exp(-logsumexp(2 * self.log_weights)))

    def mean(self):
        return self.weights @ self.particles

    def std(self):
        m = self.mean()
        return np.sqrt(np.maximum(self.weights @ (self.particles - m) ** 2, 0.0))

    def resample(self, rng, n: int):
        idx = rng.choice(len(self.particles), size=n, p=self.weights / self.weights.sum())
        return self.particles[idx]


def is_posterior(task: Task, xs, ys, n_particles: int, rng, min_ess: float = 10.0) -> ParticlePosterior:
    """Prior-proposal importance sampler: weights are the history log-likelihood."""
    theta = task.prior_sample(rng, n_particles)
    logw = np.zeros(n_particles)
    for x, y in zip(xs, ys):
        logw = logw + task.loglik(np.asarray(y, dtype=float), np.asarray(x, dtype=float), theta)
    logw = logw - logsumexp(logw)
    post = ParticlePosterior(theta, logw)
    if post.ess < min_ess:
        warnings.warn(f"importance sampler degenerate: ESS {post.ess:.1f} < {min_ess}", DegeneratePosteriorWarning)
    return post


def median_bandwidth(a, b) -> float:
    z = np.concatenate([np.atleast_2d(a), np.atleast_2d(b)])
    d2 = np.sum((z[:, None, :] - z[None, :, :]) ** 2, axis=-1)
    iu = np.triu_indices(len(z), 1)
    med = np.median(d2[iu])
    return float(np.sqrt(0.5 * med)) if med > 0 else 1.0


def mmd(a, b, bandwidth=None, biased: bool = False) -> float:
    """Gaussian-kernel MMD; the unbiased MMD^2 is floored at 0 before the square root."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both sample sets must be nonempty")
    h = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)

    def gram(u, v):
        return np.exp(-np.sum((u[:, None, :] - v[None, :, :]) ** 2, axis=-1) / (2 * h * h))

    kaa, kbb, kab = gram(a, a), gram(b, b), gram(a, b)
    n, m = len(a), len(b)
    if biased or n < 2 or m < 2:
        val = kaa.mean() + kbb.mean() - 2 * kab.mean()
    else:
        val = (kaa.sum() - np.trace(kaa)) / (n * (n - 1)) + (kbb.sum() - np.trace(kbb)) / (m * (m - 1)) - 2 * kab.mean()
    return float(np.sqrt(max(val, 0.0)))
