"""Diagonal Gaussian mixtures and finite categorical beliefs with batched evaluation.

Both classes carry arbitrary leading batch dimensions.  Samples broadcast a noise
array against those batch dimensions, so callers control the sample layout simply by
the shape of the noise they pass in.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
LOG_2PI = math.log(2 * math.pi)


def logsumexp(a, axis=-1, keepdims=False):
    """Plain numpy log-sum-exp over one axis (much lighter than the scipy version on small axes)."""
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def softmax(a, axis=-1):
    e = np.exp(a - np.max(a, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass(frozen=True)
class GaussianMixture:
    log_weights: np.ndarray  # batch + (K,)
    means: np.ndarray  # batch + (K, d)
    stds: np.ndarray  # batch + (K, d)

    def __post_init__(self):
        lw = np.asarray(self.log_weights, dtype=float)
        object.__setattr__(self, "log_weights", lw - logsumexp(lw, axis=-1, keepdims=True))
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float))
        object.__setattr__(self, "stds", np.asarray(self.stds, dtype=float))

    @property
    def n_components(self) -> int:
        return self.log_weights.shape[-1]

    @property
    def dim(self) -> int:
        return self.means.shape[-1]

    @property
    def batch_shape(self):
        return self.log_weights.shape[:-1]

    @property
    def weights(self):
        return np.exp(self.log_weights)

    def unsqueeze(self, n: int = 1) -> "GaussianMixture":
        """Append ``n`` singleton batch axes (for broadcasting against sample axes)."""
        s = (slice(None),) * len(self.batch_shape) + (None,) * n
        return GaussianMixture(self.log_weights[s], self.means[s], self.stds[s])

    def index(self, idx) -> "GaussianMixture":
        return GaussianMixture(self.log_weights[idx], self.means[idx], self.stds[idx])

    @cached_property
    def _inv_std(self):
        return 1.0 / self.stds

    @cached_property
    def _log_norm(self):
        """Per-component log weight plus Gaussian normaliser."""
        return self.log_weights - np.sum(np.log(self.stds), axis=-1) - 0.5 * self.dim * LOG_2PI

    def log_prob(self, theta):
        theta = np.asarray(theta, dtype=float)
        # accumulate the squared standardized distance one coordinate at a time to
        # avoid a batch + (K, d) temporary
        sq = None
        for j in range(self.dim):
            z = (theta[..., j, None] - self.means[..., j]) * self._inv_std[..., j]
            z *= z
            sq = z if sq is None else sq + z
        comp = self._log_norm - 0.5 * sq
        m = np.max(comp, axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        comp -= m
        np.exp(comp, out=comp)
        with np.errstate(divide="ignore"):
            return np.log(np.sum(comp, axis=-1)) + m[..., 0]

    def sample_reparam(self, eps_gumbel, eps_gauss, temperature=0.5):
        """Relaxed sample: softmax((logw + g)/temperature)-weighted sum of component draws."""
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        p = softmax((self.log_weights + eps_gumbel) / temperature, axis=-1)
        comp = self.means + self.stds * eps_gauss
        return np.einsum("...k,...kd->...d", p, comp)

    def sample_hard(self, eps_gumbel, eps_gauss):
        """Exact sample via Gumbel-max component selection."""
        k = np.argmax(self.log_weights + eps_gumbel, axis=-1)
        comp = self.means + self.stds * eps_gauss
        return np.take_along_axis(comp, k[..., None, None], axis=-2)[..., 0, :]

    def sample(self, rng, n: int):
        shape = (n,) + self.batch_shape
        g = rng.gumbel(size=shape + (self.n_components,))
        e = rng.standard_normal(shape + (self.n_components, self.dim))
        return self.sample_hard(g, e)

    def mean(self):
        return np.sum(self.weights[..., None] * self.means, axis=-2)

    def variance(self):
        w = self.weights[..., None]
        m = self.mean()
        return np.sum(w * (self.stds**2 + self.means**2), axis=-2) - m**2


def predictive_moments(gmm: GaussianMixture):
    """Mean and variance of a mixture via the law of total variance (last axis squeezed for 1-D)."""
    m, v = gmm.mean(), gmm.variance()
    if gmm.dim == 1:
        return m[..., 0], np.maximum(v[..., 0], 0.0)
    return m, np.maximum(v, 0.0)


@dataclass(frozen=True)
class Categorical:
    """Belief over the rows of a fixed ``support`` array."""

    support: np.ndarray  # (K, d)
    log_weights: np.ndarray  # batch + (K,)

    def __post_init__(self):
        lw = np.asarray(self.log_weights, dtype=float)
        with np.errstate(invalid="ignore"):
            object.__setattr__(self, "log_weights", lw - logsumexp(lw, axis=-1, keepdims=True))
        object.__setattr__(self, "support", np.asarray(self.support, dtype=float))

    @property
    def n_components(self) -> int:
        return self.log_weights.shape[-1]

    @property
    def dim(self) -> int:
        return self.support.shape[-1]

    @property
    def batch_shape(self):
        return self.log_weights.shape[:-1]

    @property
    def weights(self):
        return np.exp(self.log_weights)

    def unsqueeze(self, n: int = 1) -> "Categorical":
        s = (slice(None),) * len(self.batch_shape) + (None,) * n
        return Categorical(self.support, self.log_weights[s])

    def index(self, idx) -> "Categorical":
        return Categorical(self.support, self.log_weights[idx])

    def support_index(self, theta):
        theta = np.asarray(theta, dtype=float)
        d = np.sum((theta[..., None, :] - self.support) ** 2, axis=-1)
        return np.argmin(d, axis=-1)

    def log_prob(self, theta):
        k = self.support_index(theta)
        lw, k = np.broadcast_arrays(self.log_weights, k[..., None])
        return np.take_along_axis(lw, k[..., :1], axis=-1)[..., 0]

    def sample_reparam(self, eps_gumbel, eps_gauss=None, temperature=None):
        """Gumbel-max draw; a finite support has no useful continuous relaxation."""
        k = np.argmax(self.log_weights + eps_gumbel, axis=-1)
        return self.support[k]

    sample_hard = sample_reparam

    def sample(self, rng, n: int):
        g = rng.gumbel(size=(n,) + self.batch_shape + (self.n_components,))
        return self.sample_reparam(g)

    def mean(self):
        return np.sum(self.weights[..., None] * self.support, axis=-2)

    def variance(self):
        m = self.mean()
        return np.sum(self.weights[..., None] * self.support**2, axis=-2) - m**2
